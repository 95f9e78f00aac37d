"""Empirical risks of the joint objective and the tissue-risk bound audit.

The tissue risk on lesion data cannot be measured directly because lesion
scans carry no tissue labels. It is bounded by

    L_t(h(x), y_t) <= L_t(h(x), h(p(x))) + L_t(h(p(x)), y_t)

where ``p`` keeps only the T1 channel. The first right-hand term is a
consistency loss between the two-modality and T1-only outputs on lesion
data; the second is estimated on T1-only control data.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .labels import DEFAULT_TAXONOMY, ClassTaxonomy, decompose_labels, one_hot
from .losses import ClassWeights, jaccard_loss, triangle_margin
from .network import ModelParams, forward, project_t1
from .phantom import Sample
from .tensor import Tensor

TRIANGLE_TOL = 1e-9


def worker_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("HMSEG_THREADS", default)))
    except ValueError:
        return default


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Ordered map; results do not depend on the worker count."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class RiskBreakdown:
    r_lesion: float | None = None
    r_consistency: float | None = None
    r_control: float | None = None
    r_tissue_true: float | None = None
    n_lesion: int = 0
    n_control: int = 0


def _require(samples: Sequence[Sample], kind: str) -> None:
    if not samples:
        raise ValueError(f"empty {kind} batch")
    for s in samples:
        if s.kind != kind:
            raise ValueError(f"sample {s.sample_id!r} has kind {s.kind!r}, expected {kind!r}")


def _lesion_target(s: Sample, tax: ClassTaxonomy) -> Tensor:
    if s.visible not in ("lesion", "full"):
        raise ValueError(f"sample {s.sample_id!r} exposes no lesion labels")
    return one_hot(decompose_labels(s.visible_labels(tax), tax)[1], tax)


def _tissue_target(s: Sample, tax: ClassTaxonomy) -> Tensor:
    if s.visible not in ("tissue", "full"):
        raise ValueError(f"sample {s.sample_id!r} exposes no tissue labels")
    return one_hot(decompose_labels(s.visible_labels(tax), tax)[0], tax)


def _batch_mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


def _lesion_pair(params: ModelParams, s: Sample, both: bool = True):
    pred_full = forward(params, s.image, s.mask)
    img, m = project_t1(s.image, s.mask)
    pred_t1 = forward(params, img, m) if both else None
    return pred_full, pred_t1


def _consistency(pred_full: Tensor, pred_t1: Tensor, w: ClassWeights, tax: ClassTaxonomy,
                 detach_target: bool) -> Tensor:
    target = pred_t1.detach() if detach_target else pred_t1
    return jaccard_loss(pred_full, target, w, tax.tissue_side, check=False)


def risk_lesion(params: ModelParams, lesion_batch: Sequence[Sample], w: ClassWeights,
                tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> Tensor:
    """Mean lesion-side loss of two-modality predictions on lesion data."""
    _require(lesion_batch, "lesion")
    terms = [jaccard_loss(forward(params, s.image, s.mask), _lesion_target(s, tax), w, tax.lesion_ids)
             for s in lesion_batch]
    return _batch_mean(terms)


def risk_consistency(params: ModelParams, lesion_batch: Sequence[Sample], w: ClassWeights,
                     tax: ClassTaxonomy = DEFAULT_TAXONOMY, detach_target: bool = False) -> Tensor:
    """Mean tissue-side loss between two-modality and T1-only outputs on lesion data."""
    _require(lesion_batch, "lesion")
    terms = []
    for s in lesion_batch:
        pred_full, pred_t1 = _lesion_pair(params, s)
        terms.append(_consistency(pred_full, pred_t1, w, tax, detach_target))
    return _batch_mean(terms)


def risk_control(params: ModelParams, control_batch: Sequence[Sample], w: ClassWeights,
                 tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> Tensor:
    """Mean tissue-side loss of T1-only predictions on control data."""
    _require(control_batch, "control")
    terms = []
    for s in control_batch:
        img, m = project_t1(s.image, s.mask)
        terms.append(jaccard_loss(forward(params, img, m), _tissue_target(s, tax), w, tax.tissue_side))
    return _batch_mean(terms)


@dataclass
class ObjectiveWeights:
    lesion: float = 1.0
    consistency: float = 1.0
    control: float = 1.0


def joint_objective(params: ModelParams, control_batch: Sequence[Sample], lesion_batch: Sequence[Sample],
                    iteration: int, warmup: int, w: ClassWeights, tax: ClassTaxonomy = DEFAULT_TAXONOMY,
                    weights: ObjectiveWeights | None = None,
                    detach_target: bool = False) -> tuple[Tensor, RiskBreakdown]:
    """``R_l + R_t2 (+ R_t1 once iteration >= warmup)`` and all three values.

    Before warmup the consistency term is evaluated outside the graph, so it
    cannot influence gradients.
    """
    weights = weights or ObjectiveWeights()
    _require(lesion_batch, "lesion")
    r_c2 = risk_control(params, control_batch, w, tax)
    gated_on = iteration >= warmup
    lesion_terms, cons_terms = [], []
    for s in lesion_batch:
        pred_full = forward(params, s.image, s.mask)
        lesion_terms.append(jaccard_loss(pred_full, _lesion_target(s, tax), w, tax.lesion_ids))
        img, m = project_t1(s.image, s.mask)
        if gated_on:
            pred_t1 = forward(params, img, m)
            cons_terms.append(_consistency(pred_full, pred_t1, w, tax, detach_target))
        else:
            with T.no_grad():
                pred_t1 = forward(params, img, m)
                cons_terms.append(_consistency(pred_full.detach(), pred_t1, w, tax, detach_target))
    r_l = _batch_mean(lesion_terms)
    r_c1 = _batch_mean(cons_terms)
    objective = T.add(T.mul(r_l, weights.lesion), T.mul(r_c2, weights.control))
    if gated_on:
        objective = T.add(objective, T.mul(r_c1, weights.consistency))
    bd = RiskBreakdown(r_l.item(), r_c1.item(), r_c2.item(), None, len(lesion_batch), len(control_batch))
    return objective, bd


# ---------------------------------------------------------------------------
# bound audit


@dataclass
class AuditRow:
    sample_id: str
    lhs: float
    term1: float
    term2: float
    margin: float

    @property
    def slack(self) -> float:
        return self.term1 + self.term2 - self.lhs

    @property
    def triangle_ok(self) -> bool:
        return self.margin <= TRIANGLE_TOL


@dataclass
class AuditResult:
    rows: list[AuditRow]
    r_control: float | None = None  # control-data estimate of the second term, when given

    def passing(self) -> list[AuditRow]:
        return [r for r in self.rows if r.triangle_ok]

    @property
    def r_tissue_true(self) -> float:
        return float(np.mean([r.lhs for r in self.rows]))

    @property
    def r_consistency(self) -> float:
        return float(np.mean([r.term1 for r in self.rows]))

    @property
    def r_t1_lesion(self) -> float:
        return float(np.mean([r.term2 for r in self.rows]))

    def aggregate(self, only_passing: bool = True) -> tuple[float, float]:
        """(mean lhs, mean rhs) over the selected samples."""
        rows = self.passing() if only_passing else self.rows
        if not rows:
            return float("nan"), float("nan")
        return (float(np.mean([r.lhs for r in rows])),
                float(np.mean([r.term1 + r.term2 for r in rows])))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sample_id", "lhs", "term1", "term2", "slack", "triangle_ok"])
            for r in self.rows:
                wr.writerow([r.sample_id, repr(r.lhs), repr(r.term1), repr(r.term2), repr(r.slack),
                             int(r.triangle_ok)])


def audit_sample(params: ModelParams, s: Sample, w: ClassWeights,
                 tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> AuditRow:
    if s.labels_full is None:
        raise ValueError(f"sample {s.sample_id!r} has no full labels")
    if s.kind != "lesion":
        raise ValueError(f"audit needs lesion samples, got {s.kind!r}")
    with T.no_grad():
        a, b = _lesion_pair(params, s)
        c = one_hot(decompose_labels(s.labels_full, tax)[0], tax)
        sub = tax.tissue_side
        lhs = jaccard_loss(a, c, w, sub).item()
        term1 = jaccard_loss(a, b, w, sub).item()
        term2 = jaccard_loss(b, c, w, sub).item()
        margin = triangle_margin(a, b, c, w, sub)
    return AuditRow(s.sample_id, lhs, term1, term2, margin)


def bound_audit(params: ModelParams, lesion_samples: Sequence[Sample], w: ClassWeights,
                tax: ClassTaxonomy = DEFAULT_TAXONOMY, control_samples: Sequence[Sample] = (),
                workers: int | None = None) -> AuditResult:
    """Per-sample check of the triangle bound on fully annotated lesion samples."""
    rows = parallel_map(lambda s: audit_sample(params, s, w, tax), list(lesion_samples), workers)
    r_ctrl = None
    if control_samples:
        def one(s):
            with T.no_grad():
                return risk_control(params, [s], w, tax).item()

        vals = parallel_map(one, list(control_samples), workers)
        r_ctrl = float(np.mean(vals))
    return AuditResult(rows, r_ctrl)
