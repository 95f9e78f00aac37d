"""Probabilistic Jaccard loss, its tissue/lesion split and triangle-inequality tools."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .io import save_tensor
from .labels import DEFAULT_TAXONOMY, ClassTaxonomy
from .tensor import Tensor

SUM_TOL = 1e-6
VIOLATION_TOL = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    omega: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=np.float64)
        if w.ndim != 1 or (w < 0).any():
            raise ValueError("class weights must be a nonnegative vector")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"class weights must sum to 1, got {w.sum()!r}")

    def array(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.omega)


def default_weights(tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> ClassWeights:
    """1/16 per tissue class, 1/2 for the lesion class, 1/8 for background."""
    if not tax.is_default():
        raise ValueError("default weights are defined only for the default taxonomy; pass ClassWeights explicitly")
    w = np.zeros(tax.n_classes)
    w[tax.background_id] = 1 / 8
    w[list(tax.tissue_ids)] = 1 / 16
    w[list(tax.lesion_ids)] = 1 / 2
    return ClassWeights(tuple(w.tolist()))


def _check_distribution(x: np.ndarray, what: str) -> None:
    s = x.sum(axis=0)
    if np.abs(s - 1.0).max() > SUM_TOL:
        raise ValueError(f"{what} channels must sum to 1 at every pixel (max deviation {np.abs(s - 1.0).max():.2e})")


def jaccard_loss(pred, target, w: ClassWeights, class_subset: Sequence[int] | None = None,
                 check: bool = True) -> Tensor:
    """Weighted one-versus-all soft Jaccard loss between two [C,H,W] maps.

    Returns ``sum_c w_c * (1 - sum(g p) / sum(g^2 + p^2 - g p))`` over the chosen
    classes. A class with a zero denominator contributes nothing.
    """
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    if pred.shape != target.shape or pred.ndim != 3:
        raise ValueError(f"pred and target must share a [C,H,W] shape, got {pred.shape} and {target.shape}")
    if len(w) != pred.shape[0]:
        raise ValueError(f"{len(w)} weights for {pred.shape[0]} channels")
    if check:
        _check_distribution(pred.data, "pred")
        _check_distribution(target.data, "target")
    omega = w.array()
    if class_subset is not None:
        idx = sorted(set(int(c) for c in class_subset))
        pred = T.take_channels(pred, idx)
        target = T.take_channels(target, idx)
        omega = omega[idx]
    gp = T.mul(target, pred)
    den = T.sub(T.add(T.mul(target, target), T.mul(pred, pred)), gp)
    ratio = T.safe_div(T.reduce_sum(gp, axis=(1, 2)), T.reduce_sum(den, axis=(1, 2)), empty_value=1.0)
    return T.dot_const(1.0 - ratio, omega)


def split_loss(pred, target, w: ClassWeights, tax: ClassTaxonomy = DEFAULT_TAXONOMY,
               check: bool = True) -> tuple[Tensor, Tensor]:
    """(tissue-side loss over background + tissue ids, lesion-side loss)."""
    l_t = jaccard_loss(pred, target, w, tax.tissue_side, check=check)
    l_l = jaccard_loss(pred, target, w, tax.lesion_ids, check=False)
    return l_t, l_l


# ---------------------------------------------------------------------------
# vectorised values for fuzzing


def jaccard_values(pred: np.ndarray, target: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Batched loss values for arrays shaped [..., C, N] with weights [..., C]."""
    gp = pred * target
    num = gp.sum(axis=-1)
    den = (target * target + pred * pred - gp).sum(axis=-1)
    empty = den == 0.0
    ratio = np.where(empty, 1.0, num / np.where(empty, 1.0, den))
    return np.sum(omega * (1.0 - ratio), axis=-1)


def triangle_margin(a, b, c, w: ClassWeights, class_subset: Sequence[int] | None = None) -> float:
    """``L(a, c) - L(a, b) - L(b, c)``; nonpositive when the triple obeys the inequality."""
    with T.no_grad():
        l_ac = jaccard_loss(a, c, w, class_subset).item()
        l_ab = jaccard_loss(a, b, w, class_subset).item()
        l_bc = jaccard_loss(b, c, w, class_subset).item()
    return l_ac - l_ab - l_bc


@dataclass
class TriangleReport:
    mode: str
    trials: int
    violations: int
    worst_margin: float
    margins: np.ndarray = field(repr=False)
    counterexamples: list[Path] = field(default_factory=list)

    @property
    def violation_rate(self) -> float:
        return self.violations / self.trials if self.trials else 0.0


def _random_maps(rng: np.random.Generator, mode: str, n: int, c: int, k: int) -> np.ndarray:
    if mode == "one-hot":
        labels = rng.integers(0, c, size=(n, k))
        return np.moveaxis(np.eye(c)[labels], -1, 1)
    return np.moveaxis(rng.dirichlet(np.ones(c), size=(n, k)), -1, 1)


def fuzz_triangle(n_trials: int, mode: str = "one-hot", seed: int = 0, out_dir=None,
                  max_pixels: int = 8, max_classes: int = 5, chunk: int = 2000,
                  max_saved: int = 50) -> TriangleReport:
    """Random search for triangle-inequality violations of the weighted Jaccard loss.

    Each chunk of trials shares a random (pixels, classes) size; weights are
    drawn from a flat Dirichlet per trial. When ``out_dir`` is given a
    ``trial,margin,violated`` CSV is written there together with HMT1 files
    for the first ``max_saved`` counterexamples.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if mode not in ("one-hot", "soft"):
        raise ValueError(f"mode must be 'one-hot' or 'soft', got {mode!r}")
    rng = np.random.default_rng(seed)
    margins = np.empty(n_trials)
    saved: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start = 0
    while start < n_trials:
        n = min(chunk, n_trials - start)
        k = int(rng.integers(1, max_pixels + 1))
        c = int(rng.integers(2, max_classes + 1))
        a, b, cc = (_random_maps(rng, mode, n, c, k) for _ in range(3))
        omega = rng.dirichlet(np.ones(c), size=n)
        m = jaccard_values(a, cc, omega) - jaccard_values(a, b, omega) - jaccard_values(b, cc, omega)
        margins[start:start + n] = m
        if out is not None:
            for i in np.flatnonzero(m > VIOLATION_TOL):
                if len(saved) >= max_saved:
                    break
                trial = start + int(i)
                for tag, arr in (("a", a[i]), ("b", b[i]), ("c", cc[i]), ("w", omega[i])):
                    p = out / f"counterexample_{trial:07d}_{tag}.hmt"
                    save_tensor(p, arr)
                    saved.append(p)
        start += n
    violated = margins > VIOLATION_TOL
    if out is not None:
        with open(out / "triangle_report.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["trial", "margin", "violated"])
            for i, (mv, v) in enumerate(zip(margins, violated)):
                wr.writerow([i, repr(float(mv)), int(v)])
    return TriangleReport(mode, n_trials, int(violated.sum()), float(margins.max()), margins, saved)


def exhaustive_triangle(n_pixels: int = 2, n_classes: int = 3, omega=None) -> tuple[int, float]:
    """Check every one-hot triple on a tiny grid. Returns (violations, worst margin)."""
    if omega is None:
        omega = np.full(n_classes, 1.0 / n_classes)
    maps = np.array([np.eye(n_classes)[list(lab)].T
                     for lab in itertools.product(range(n_classes), repeat=n_pixels)])
    ia, ib, ic = (np.array(x) for x in zip(*itertools.product(range(len(maps)), repeat=3)))
    a, b, c = maps[ia], maps[ib], maps[ic]
    w = np.asarray(omega, dtype=np.float64)
    m = jaccard_values(a, c, w) - jaccard_values(a, b, w) - jaccard_values(b, c, w)
    return int((m > VIOLATION_TOL).sum()), float(m.max())
