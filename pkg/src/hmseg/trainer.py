"""Adam, the two-stream training loop and checkpoint files."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .io import FormatError, atomic_write, read_tensor, write_tensor
from .labels import DEFAULT_TAXONOMY
from .losses import ClassWeights, default_weights
from .network import ModelParams, NetworkConfig, init_params, param_shapes
from .phantom import Sample
from .risk import (ObjectiveWeights, RiskBreakdown, joint_objective, risk_consistency, risk_control,
                   risk_lesion)
from .sampling import PatchSpec, sample_patch_uniform, sample_patch_weighted

log = logging.getLogger(__name__)

MODES = ("joint", "tissue-only", "lesion-only")
CKPT_MAGIC = b"HMCK1\n"
LOG_FIELDS = ["iteration", "objective", "r_lesion", "r_consistency", "r_control", "val_objective"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iterations: int = 2000
    warmup: int = 500
    patch_height: int = 48
    patch_width: int = 48
    seed: int = 0
    mode: str = "joint"
    eval_every: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    dilation_radius: int = 3
    detach_consistency_target: bool = False
    weight_lesion: float = 1.0
    weight_consistency: float = 1.0
    weight_control: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.warmup > self.max_iterations:
            raise ValueError("warmup cannot exceed max_iterations")
        if self.max_iterations < 1 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("max_iterations, eval_every and patience must be positive")

    @property
    def patch(self) -> PatchSpec:
        return PatchSpec(self.patch_height, self.patch_width)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict[str, np.ndarray | None], state: OptimizerState,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam update of ``params`` in place.

    Missing gradients count as zero. A non-finite gradient aborts the step
    before anything is modified.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# checkpoints


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def encode_checkpoint(params: ModelParams, echo: dict | None = None) -> bytes:
    header = {"network": params.config.to_dict(), **(echo or {})}
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(b"config " + json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(f"params {len(params)}\n".encode())
    for name, t in params:
        buf.write(f"{name} {_shape_text(t.shape)}\n".encode())
    for _, t in params:
        write_tensor(buf, t.data)
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, echo: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(params, echo))


def load_checkpoint(path, expected: NetworkConfig | None = None) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns the parameters and the config echo."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        line = fh.readline()
        if not line.startswith(b"config ") or not line.endswith(b"\n"):
            raise FormatError(f"{path}: missing config header")
        echo = json.loads(line[len(b"config "):])
        config = NetworkConfig.from_dict(echo["network"])
        if expected is not None and expected != config:
            raise ValueError(f"{path}: checkpoint network config {config} does not match {expected}")
        line = fh.readline().split()
        if len(line) != 2 or line[0] != b"params":
            raise FormatError(f"{path}: missing parameter count")
        n = int(line[1])
        manifest = []
        for _ in range(n):
            parts = fh.readline().decode().split()
            if len(parts) != 2:
                raise FormatError(f"{path}: malformed manifest entry {parts!r}")
            manifest.append((parts[0], _parse_shape(parts[1])))
        want = param_shapes(config)
        names = [m[0] for m in manifest]
        if names != list(want):
            extra = sorted(set(names) ^ set(want))
            raise FormatError(f"{path}: manifest does not match network layout (offending entries: {extra})")
        tensors: OrderedDict[str, T.Tensor] = OrderedDict()
        for name, shape in manifest:
            if shape != want[name]:
                raise FormatError(f"{path}: parameter {name!r} has shape {shape}, expected {want[name]}")
            try:
                arr = read_tensor(fh)
            except FormatError as exc:
                raise FormatError(f"{path}: missing or truncated payload for parameter {name!r}: {exc}") from exc
            if arr.shape != shape or arr.dtype != np.float64:
                raise FormatError(f"{path}: payload of parameter {name!r} has shape {arr.shape}, expected {shape}")
            tensors[name] = T.Tensor(arr, requires_grad=True)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last parameter")
    return ModelParams(config, tensors), echo


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    log: list[dict]
    best_val: float | None
    iterations_run: int
    stopped_early: bool


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_log(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(LOG_FIELDS)
    for r in rows:
        wr.writerow([r["iteration"]] + [_fmt(r.get(k)) for k in LOG_FIELDS[1:]])
    atomic_write(path, buf.getvalue().encode())


def validation_objective(params: ModelParams, mode: str, controls: Sequence[Sample], lesions: Sequence[Sample],
                         w: ClassWeights, cfg: TrainConfig) -> float:
    """Risk terms of ``mode`` on whole validation images, without gradients.

    In joint mode the consistency term is always included so values before
    and after warmup are comparable.
    """
    total = 0.0
    with T.no_grad():
        if mode in ("joint", "tissue-only"):
            total += cfg.weight_control * np.mean([risk_control(params, [s], w).item() for s in controls])
        if mode in ("joint", "lesion-only"):
            total += cfg.weight_lesion * np.mean([risk_lesion(params, [s], w).item() for s in lesions])
        if mode == "joint":
            total += cfg.weight_consistency * np.mean(
                [risk_consistency(params, [s], w).item() for s in lesions])
    return float(total)


def _materialise(ds) -> list[Sample]:
    return [] if ds is None else list(ds)


def train(cfg: TrainConfig, control_train=None, lesion_train=None, control_val=None, lesion_val=None,
          net_cfg: NetworkConfig | None = None, weights: ClassWeights | None = None,
          out_dir=None, echo: dict | None = None) -> TrainResult:
    """Run the training procedure for ``cfg.mode``.

    Every iteration draws one uniform control patch and one lesion-centred
    lesion patch (single-task modes draw only their own). Datasets belonging
    to the other task are never touched in single-task modes.
    """
    net_cfg = net_cfg or NetworkConfig()
    w = weights or default_weights(DEFAULT_TAXONOMY)
    use_ctrl = cfg.mode in ("joint", "tissue-only")
    use_les = cfg.mode in ("joint", "lesion-only")
    controls = _materialise(control_train) if use_ctrl else []
    lesions = _materialise(lesion_train) if use_les else []
    if use_ctrl and not controls:
        raise ValueError(f"mode {cfg.mode} needs control training samples")
    if use_les and not lesions:
        raise ValueError(f"mode {cfg.mode} needs lesion training samples")
    val_c = _materialise(control_val) if use_ctrl else []
    val_l = _materialise(lesion_val) if use_les else []
    have_val = (not use_ctrl or bool(val_c)) and (not use_les or bool(val_l))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    echo = {"train": asdict(cfg), **(echo or {})}

    rng = np.random.default_rng(cfg.seed)
    params = init_params(net_cfg, cfg.seed)
    best_params = params.copy()
    state = OptimizerState()
    obj_weights = ObjectiveWeights(cfg.weight_lesion, cfg.weight_consistency, cfg.weight_control)
    spec = cfg.patch
    rows: list[dict] = []
    best_val: float | None = None
    stale = 0
    stopped = False
    it = 0
    for it in range(cfg.max_iterations):
        batch_c, batch_l = [], []
        if use_ctrl:
            s = controls[int(rng.integers(len(controls)))]
            batch_c.append(sample_patch_uniform(s, spec, rng)[0])
        if use_les:
            s = lesions[int(rng.integers(len(lesions)))]
            batch_l.append(sample_patch_weighted(s, spec, rng, cfg.dilation_radius)[0])

        params.zero_grad()
        if cfg.mode == "joint":
            objective, bd = joint_objective(params, batch_c, batch_l, it, cfg.warmup, w,
                                            weights=obj_weights,
                                            detach_target=cfg.detach_consistency_target)
        elif cfg.mode == "tissue-only":
            objective = T.mul(risk_control(params, batch_c, w), cfg.weight_control)
            bd = RiskBreakdown(r_control=objective.item() / cfg.weight_control, n_control=1)
        else:
            objective = T.mul(risk_lesion(params, batch_l, w), cfg.weight_lesion)
            bd = RiskBreakdown(r_lesion=objective.item() / cfg.weight_lesion, n_lesion=1)
        T.backward(objective)
        adam_step(params, {n: p.grad for n, p in params}, state, cfg)

        row = {"iteration": it, "objective": objective.item(), "r_lesion": bd.r_lesion,
               "r_consistency": bd.r_consistency, "r_control": bd.r_control, "val_objective": None}
        done = it + 1
        if have_val and (done % cfg.eval_every == 0 or done == cfg.max_iterations):
            val = validation_objective(params, cfg.mode, val_c, val_l, w, cfg)
            row["val_objective"] = val
            if best_val is None or val < best_val - cfg.min_delta:
                best_val = val
                best_params = params.copy()
                stale = 0
            else:
                stale += 1
            log.info("iteration %d objective %.5f val %.5f", done, row["objective"], val)
            if stale >= cfg.patience:
                stopped = True
        rows.append(row)
        if stopped:
            break
    if not have_val:
        best_params = params.copy()
    result = TrainResult(params, best_params, rows, best_val, it + 1, stopped)
    if out is not None:
        save_checkpoint(out / "final", params, echo)
        save_checkpoint(out / "best", best_params, echo)
        write_log(out / "train_log.csv", rows)
    return result
