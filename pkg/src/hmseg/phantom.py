"""Synthetic two-modality brain phantoms.

Control phantoms expose only the T1-like channel and tissue annotations; lesion
phantoms expose both channels and lesion annotations. Both kinds share the
exact same tissue-generation code, so the intensity distribution of every
tissue class is the same in the two populations once lesion pixels are
excluded. Full label maps are always kept so the true tissue risk on lesion
data can be measured.
"""

from __future__ import annotations

import csv
import io
import shutil
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .io import FormatError, atomic_write
from .labels import DEFAULT_TAXONOMY, ClassTaxonomy, decompose_labels
from .network import ModalityMask

SAMPLE_MAGIC = b"HMS1\n"
KINDS = ("control", "lesion")
VISIBLE = ("tissue", "lesion", "full")
WM, GM, BASAL, VENTRICLES, CEREBELLUM, BRAINSTEM, LESION = 1, 2, 3, 4, 5, 6, 7

# (T1-like mean, Flair-like mean) per class id 0..7
DEFAULT_MEANS = (
    (0.02, 0.02),
    (0.90, 0.45),
    (0.45, 0.60),
    (0.65, 0.52),
    (0.15, 0.10),
    (0.55, 0.56),
    (0.78, 0.48),
    (0.78, 0.95),
)
DEFAULT_STDS = (
    (0.02, 0.02),
    (0.04, 0.04),
    (0.04, 0.04),
    (0.04, 0.04),
    (0.04, 0.04),
    (0.04, 0.04),
    (0.04, 0.04),
    (0.04, 0.04),
)


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 96
    width: int = 96
    n_control: int = 60
    n_lesion: int = 60
    lesion_count_range: tuple[int, int] = (1, 4)
    lesion_radius_range: tuple[float, float] = (2.0, 6.0)
    center_jitter: float = 3.0
    axis_jitter: float = 0.06
    boundary_amplitude: float = 0.04
    gyri_amplitude: float = 0.06
    structure_jitter: float = 0.03
    means: tuple = DEFAULT_MEANS
    stds: tuple = DEFAULT_STDS
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        n = DEFAULT_TAXONOMY.n_classes
        if len(self.means) != n or len(self.stds) != n:
            raise ValueError(f"intensity tables need {n} rows")
        if any(len(r) != 2 for r in (*self.means, *self.stds)):
            raise ValueError("intensity tables need one column per modality (2)")
        gap = self.means[LESION][1] - self.means[WM][1]
        if gap < 2 * max(self.stds[LESION][1], self.stds[WM][1]):
            raise ValueError("lesion Flair intensity must exceed white matter by at least 2 stds")
        if self.height < 32 or self.width < 32:
            raise ValueError("phantoms need at least 32x32 pixels")
        lo, hi = self.lesion_count_range
        if not 1 <= lo <= hi:
            raise ValueError("lesion_count_range must satisfy 1 <= lo <= hi")
        rlo, rhi = self.lesion_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("lesion_radius_range must satisfy 0 < lo <= hi")


@dataclass
class Sample:
    image: np.ndarray          # [M,H,W] float64
    labels_full: np.ndarray    # [H,W] uint8
    kind: str
    visible: str
    sample_id: str = ""
    n_classes: int = DEFAULT_TAXONOMY.n_classes

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.visible not in VISIBLE:
            raise ValueError(f"visible must be one of {VISIBLE}, got {self.visible!r}")
        if self.image.ndim != 3 or self.image.shape[1:] != self.labels_full.shape:
            raise ValueError("image [M,H,W] and labels [H,W] must agree spatially")

    @property
    def mask(self) -> ModalityMask:
        n = self.image.shape[0]
        return ModalityMask.of(0, n=n) if self.kind == "control" else ModalityMask.all(n)

    def visible_labels(self, tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> np.ndarray:
        """The label map training is allowed to see."""
        y_t, y_l = decompose_labels(self.labels_full, tax)
        if self.visible == "tissue":
            return y_t
        if self.visible == "lesion":
            return y_l
        return self.labels_full

    def with_image(self, image: np.ndarray) -> "Sample":
        return replace(self, image=image)

    def crop(self, top: int, left: int, h: int, w: int) -> "Sample":
        return replace(self, image=self.image[:, top:top + h, left:left + w].copy(),
                       labels_full=self.labels_full[top:top + h, left:left + w].copy())


# ---------------------------------------------------------------------------
# geometry


def _ellipse(xx, yy, cx, cy, ax, ay):
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def tissue_phantom(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Label map with background and the six tissue classes, all nonempty."""
    h, w = config.height, config.width
    for _ in range(config.max_retries):
        cx = w / 2 + rng.uniform(-config.center_jitter, config.center_jitter)
        cy = h / 2 + rng.uniform(-config.center_jitter, config.center_jitter)
        a = 0.40 * w * (1 + rng.uniform(-config.axis_jitter, config.axis_jitter))
        b = 0.44 * h * (1 + rng.uniform(-config.axis_jitter, config.axis_jitter))
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        u = (xx - cx) / a
        v = (yy - cy) / b
        rho = np.hypot(u, v)
        theta = np.arctan2(v, u)

        outer = np.ones_like(theta)
        for k in (2, 3, 4):
            outer += config.boundary_amplitude / k * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
        inner = np.full_like(theta, 0.78)
        for k in (5, 7, 9, 11):
            inner += config.gyri_amplitude * np.sin(k * theta + rng.uniform(0, 2 * np.pi)) / 2

        j = config.structure_jitter
        lab = np.zeros((h, w), dtype=np.uint8)
        brain = rho <= outer
        lab[brain] = GM
        lab[rho <= inner] = WM
        for side in (-1, 1):
            bx = side * (0.30 + rng.uniform(-j, j))
            lab[_ellipse(u, v, bx, -0.05 + rng.uniform(-j, j), 0.11 + rng.uniform(-j, j) / 2,
                         0.17 + rng.uniform(-j, j))] = BASAL
        for side in (-1, 1):
            vx = side * (0.09 + rng.uniform(-j, j) / 2)
            lab[_ellipse(u, v, vx, -0.08 + rng.uniform(-j, j), 0.06 + rng.uniform(0, j) / 2,
                         0.24 + rng.uniform(-j, j))] = VENTRICLES
        cb = _ellipse(u, v, rng.uniform(-j, j), 0.74 + rng.uniform(-j, j),
                      0.42 + rng.uniform(-j, j), 0.20 + rng.uniform(-j, j) / 2)
        lab[cb & brain] = CEREBELLUM
        lab[_ellipse(u, v, rng.uniform(-j, j) / 2, 0.50 + rng.uniform(-j, j),
                     0.12 + rng.uniform(-j, j) / 2, 0.12 + rng.uniform(-j, j) / 2)] = BRAINSTEM
        counts = np.bincount(lab.ravel(), minlength=7)
        if (counts[:7] >= 5).all():
            return lab
    raise RuntimeError(f"could not draw a phantom with every tissue class in {config.max_retries} tries")


def _add_lesions(config: PhantomConfig, rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    """Lesion mask made of thresholded Gaussian blobs inside white matter."""
    h, w = labels.shape
    wm = np.argwhere(labels == WM)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(config.max_retries):
        n = int(rng.integers(config.lesion_count_range[0], config.lesion_count_range[1] + 1))
        field_ = np.zeros((h, w))
        for _ in range(n):
            cy, cx = wm[rng.integers(len(wm))]
            r = rng.uniform(*config.lesion_radius_range)
            # sigma chosen so each isolated blob crosses 0.5 at radius r
            sy = r * rng.uniform(0.7, 1.3) / np.sqrt(2 * np.log(2))
            sx = r * rng.uniform(0.7, 1.3) / np.sqrt(2 * np.log(2))
            field_ += np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        lesion = (field_ > 0.5) & (labels == WM)
        if lesion.any():
            return lesion
    raise RuntimeError("could not place a lesion inside white matter")


def _intensities(config: PhantomConfig, rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    means = np.asarray(config.means)
    stds = np.asarray(config.stds)
    noise = rng.standard_normal((2, *labels.shape))
    return means[labels].transpose(2, 0, 1) + stds[labels].transpose(2, 0, 1) * noise


def sample_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), KINDS.index(kind), int(index)])


def generate_sample(config: PhantomConfig, rng: np.random.Generator, kind: str,
                    sample_id: str = "") -> Sample:
    """Draw one raw (unnormalised) phantom of the given kind."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    labels = tissue_phantom(config, rng)
    image = _intensities(config, rng, labels)
    if kind == "lesion":
        lesion = _add_lesions(config, rng, labels)
        lesion_img = _intensities(config, rng, np.full_like(labels, LESION))
        image = np.where(lesion[None], lesion_img, image)
        labels = np.where(lesion, LESION, labels).astype(np.uint8)
    visible = "tissue" if kind == "control" else "lesion"
    return Sample(image, labels, kind, visible, sample_id)


# ---------------------------------------------------------------------------
# preprocessing


def normalize(image: np.ndarray) -> np.ndarray:
    """Per channel: map the 1st/99th percentiles to 0/1, clamp, then z-score.

    Percentiles use the nearest order statistic outward (``lower``/``higher``)
    so the map commutes with positive affine intensity changes and is a fixed
    point on its own output.
    """
    image = np.asarray(image, dtype=np.float64)
    out = np.empty_like(image)
    for m, ch in enumerate(image):
        lo = np.percentile(ch, 1, method="lower")
        hi = np.percentile(ch, 99, method="higher")
        if not hi > lo:
            raise ValueError(f"channel {m} is (nearly) constant; cannot normalise")
        y = np.clip((ch - lo) / (hi - lo), 0.0, 1.0)
        sd = y.std()
        if sd == 0:
            raise ValueError(f"channel {m} is constant after clamping")
        out[m] = (y - y.mean()) / sd
    return out


# ---------------------------------------------------------------------------
# on-disk format


def encode_sample(s: Sample) -> bytes:
    m, h, w = s.image.shape
    buf = io.BytesIO()
    buf.write(SAMPLE_MAGIC)
    buf.write(f"{h} {w} {m} {s.n_classes} {s.kind} {s.visible}\n".encode("ascii"))
    buf.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(s.labels_full, dtype=np.uint8).tobytes())
    return buf.getvalue()


def decode_sample(raw: bytes, sample_id: str = "") -> Sample:
    if not raw.startswith(SAMPLE_MAGIC):
        raise FormatError("not an HMS1 sample file")
    nl = raw.find(b"\n", len(SAMPLE_MAGIC))
    if nl < 0:
        raise FormatError("truncated HMS1 header")
    parts = raw[len(SAMPLE_MAGIC):nl].decode("ascii").split()
    if len(parts) != 6:
        raise FormatError(f"malformed HMS1 header {parts!r}")
    h, w, m, c = (int(p) for p in parts[:4])
    kind, visible = parts[4], parts[5]
    body = raw[nl + 1:]
    n_img = m * h * w * 8
    if len(body) != n_img + h * w:
        raise FormatError(f"HMS1 payload has {len(body)} bytes, expected {n_img + h * w}")
    image = np.frombuffer(body[:n_img], dtype="<f8").reshape(m, h, w).astype(np.float64)
    labels = np.frombuffer(body[n_img:], dtype=np.uint8).reshape(h, w).copy()
    return Sample(image, labels, kind, visible, sample_id, c)


def save_sample(path, s: Sample) -> None:
    atomic_write(path, encode_sample(s))


def load_sample(path, sample_id: str = "") -> Sample:
    return decode_sample(Path(path).read_bytes(), sample_id)


class PhantomDataset:
    """Lazy view over a generated dataset directory.

    Samples are read on first access and returned normalised. Every file read
    is appended to ``access_log``.
    """

    def __init__(self, root, kind: str | None = None, ids=None, normalise: bool = True):
        self.root = Path(root)
        rows = read_manifest(self.root / "manifest.csv")
        if kind is not None:
            rows = [r for r in rows if r["kind"] == kind]
        if ids is not None:
            wanted = set(ids)
            rows = [r for r in rows if r["id"] in wanted]
        self.rows = rows
        self.kind = kind
        self.normalise = normalise
        self.access_log: list[Path] = []
        self._cache: dict[str, Sample] = {}

    @property
    def ids(self) -> list[str]:
        return [r["id"] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        for r in self.rows:
            yield self[r["id"]]

    def __getitem__(self, sample_id: str) -> Sample:
        if sample_id not in self._cache:
            row = next((r for r in self.rows if r["id"] == sample_id), None)
            if row is None:
                raise KeyError(sample_id)
            path = self.root / row["path"]
            self.access_log.append(path)
            s = load_sample(path, sample_id)
            if self.normalise:
                s = s.with_image(normalize(s.image))
            self._cache[sample_id] = s
        return self._cache[sample_id]

    def subset(self, ids) -> "PhantomDataset":
        sub = PhantomDataset.__new__(PhantomDataset)
        wanted = set(ids)
        sub.root, sub.kind, sub.normalise = self.root, self.kind, self.normalise
        sub.rows = [r for r in self.rows if r["id"] in wanted]
        sub.access_log = self.access_log
        sub._cache = self._cache
        return sub


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if set(r) != {"id", "kind", "visible", "path"}:
            raise FormatError(f"bad manifest row {r!r}")
    return rows


# ---------------------------------------------------------------------------
# H4 audit


KS_C_ALPHA = {0.05: 1.3581, 0.01: 1.6276}


def ks_statistic(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_x - F_y|."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    y = np.sort(np.asarray(y, dtype=np.float64))
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / x.size
    fy = np.searchsorted(y, grid, side="right") / y.size
    return float(np.abs(fx - fy).max())


def ks_critical(n: int, m: int, alpha: float = 0.01) -> float:
    c = np.sqrt(-0.5 * np.log(alpha / 2))
    return float(c * np.sqrt((n + m) / (n * m)))


@dataclass
class H4Row:
    class_id: int
    modality: int
    n_control: int
    n_lesion: int
    mean_control: float
    mean_lesion: float
    std_error: float
    ks: float
    ks_critical: float

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean_control - self.mean_lesion) <= 3 * self.std_error

    @property
    def ks_ok(self) -> bool:
        return self.ks < self.ks_critical


def h4_audit(controls, lesions, tax: ClassTaxonomy = DEFAULT_TAXONOMY, alpha: float = 0.01) -> list[H4Row]:
    """Compare per-class tissue intensities of control and lesion samples.

    Lesion pixels are excluded because they carry a lesion label.
    """
    rows = []
    n_mod = controls[0].image.shape[0]
    for c in tax.tissue_ids:
        for m in range(n_mod):
            xc = np.concatenate([s.image[m][s.labels_full == c] for s in controls])
            xl = np.concatenate([s.image[m][s.labels_full == c] for s in lesions])
            se = float(np.sqrt(xc.var(ddof=1) / xc.size + xl.var(ddof=1) / xl.size))
            rows.append(H4Row(c, m, xc.size, xl.size, float(xc.mean()), float(xl.mean()), se,
                              ks_statistic(xc, xl), ks_critical(xc.size, xl.size, alpha)))
    return rows


def write_h4_report(path, rows: list[H4Row], tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["class_id", "class_name", "modality", "n_control", "n_lesion", "mean_control",
                     "mean_lesion", "std_error", "ks", "ks_critical", "mean_ok", "ks_ok"])
        for r in rows:
            wr.writerow([r.class_id, tax.name(r.class_id), r.modality, r.n_control, r.n_lesion,
                         repr(r.mean_control), repr(r.mean_lesion), repr(r.std_error), repr(r.ks),
                         repr(r.ks_critical), int(r.mean_ok), int(r.ks_ok)])


# ---------------------------------------------------------------------------
# dataset generation


def sample_id(kind: str, index: int) -> str:
    return f"{kind[0]}{index:04d}"


def generate_samples(config: PhantomConfig, kind: str, n: int, start: int = 0) -> list[Sample]:
    out = []
    for i in range(start, start + n):
        out.append(generate_sample(config, sample_rng(config.seed, kind, i), kind, sample_id(kind, i)))
    return out


def config_to_text(cfg) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"


def generate_dataset(config: PhantomConfig, out_dir) -> Path:
    """Write samples, ``manifest.csv``, ``h4_audit.csv`` and ``phantom.cfg``.

    Anything written is removed again if generation fails.
    """
    out = Path(out_dir)
    created_root = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    sample_dir = out / "samples"
    created_samples = not sample_dir.exists()
    sample_dir.mkdir(exist_ok=True)
    written: list[Path] = []
    try:
        rows = []
        by_kind: dict[str, list[Sample]] = {}
        for kind, n in (("control", config.n_control), ("lesion", config.n_lesion)):
            samples = generate_samples(config, kind, n)
            by_kind[kind] = samples
            for s in samples:
                rel = Path("samples") / f"{s.sample_id}.hms"
                save_sample(out / rel, s)
                written.append(out / rel)
                rows.append({"id": s.sample_id, "kind": s.kind, "visible": s.visible, "path": rel.as_posix()})
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=["id", "kind", "visible", "path"], lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
        atomic_write(out / "manifest.csv", buf.getvalue().encode())
        written.append(out / "manifest.csv")
        atomic_write(out / "phantom.cfg", config_to_text(config).encode())
        written.append(out / "phantom.cfg")
        if by_kind["control"] and by_kind["lesion"]:
            write_h4_report(out / "h4_audit.csv", h4_audit(by_kind["control"], by_kind["lesion"]))
            written.append(out / "h4_audit.csv")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        if created_samples:
            shutil.rmtree(sample_dir, ignore_errors=True)
        if created_root:
            shutil.rmtree(out, ignore_errors=True)
        raise
    return out
