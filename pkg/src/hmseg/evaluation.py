"""Dice scores and per-class evaluation tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .labels import DEFAULT_TAXONOMY, ClassTaxonomy, argmax_labels
from .network import ModalityMask, ModelParams, forward, project_t1
from .phantom import Sample
from .risk import parallel_map

MASK_POLICIES = ("native", "t1")


def dsc(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Dice coefficient of one class; 1.0 when the class is absent from both maps."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    a = pred == class_id
    b = truth == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class DscRow:
    model_tag: str
    dataset_tag: str
    class_name: str
    dsc: float
    n_samples: int


@dataclass
class DscTable:
    rows: list[DscRow] = field(default_factory=list)

    def extend(self, other: "DscTable") -> "DscTable":
        self.rows.extend(other.rows)
        return self

    def get(self, model_tag: str, dataset_tag: str, class_name: str) -> float:
        for r in self.rows:
            if (r.model_tag, r.dataset_tag, r.class_name) == (model_tag, dataset_tag, class_name):
                return r.dsc
        raise KeyError((model_tag, dataset_tag, class_name))

    def mean(self, model_tag: str, dataset_tag: str, class_names: Sequence[str]) -> float:
        return float(np.mean([self.get(model_tag, dataset_tag, c) for c in class_names]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["model", "dataset", "class", "dsc", "n_samples"])
            for r in self.rows:
                wr.writerow([r.model_tag, r.dataset_tag, r.class_name, repr(r.dsc), r.n_samples])


def _mask_for(s: Sample, policy: str) -> ModalityMask:
    if policy == "native":
        return s.mask
    if policy == "t1":
        return project_t1(s.image, s.mask)[1]
    raise ValueError(f"mask policy must be one of {MASK_POLICIES}, got {policy!r}")


def predict(params: ModelParams, s: Sample, policy: str = "native") -> np.ndarray:
    with T.no_grad():
        return argmax_labels(forward(params, s.image, _mask_for(s, policy)))


def score_predictions(preds: Sequence[np.ndarray], samples: Sequence[Sample], class_ids: Sequence[int],
                      model_tag: str, dataset_tag: str, tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> DscTable:
    """Per-class DSC against full labels, averaged over samples."""
    table = DscTable()
    for c in class_ids:
        vals = [dsc(p, s.labels_full, c) for p, s in zip(preds, samples)]
        table.rows.append(DscRow(model_tag, dataset_tag, tax.name(c), float(np.mean(vals)), len(vals)))
    return table


def evaluate(params: ModelParams, samples: Sequence[Sample], policy: str = "native",
             class_ids: Sequence[int] | None = None, model_tag: str = "model", dataset_tag: str = "data",
             tax: ClassTaxonomy = DEFAULT_TAXONOMY, workers: int | None = None) -> DscTable:
    """Argmax segmentation of every sample and its per-class DSC table.

    ``native`` feeds control samples as T1-only and lesion samples with both
    modalities; ``t1`` feeds every sample T1-only.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to evaluate")
    if class_ids is None:
        class_ids = (*tax.tissue_ids, *tax.lesion_ids)
    preds = parallel_map(lambda s: predict(params, s, policy), samples, workers)
    return score_predictions(preds, samples, class_ids, model_tag, dataset_tag, tax)
