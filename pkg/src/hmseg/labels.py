"""Class taxonomy and the tissue/lesion split of label maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

DEFAULT_TISSUE_NAMES = (
    "white matter",
    "gray matter",
    "basal ganglia",
    "ventricles",
    "cerebellum",
    "brainstem",
)
DEFAULT_LESION_NAMES = ("white matter lesion",)


@dataclass(frozen=True)
class ClassTaxonomy:
    tissue_ids: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    lesion_ids: tuple[int, ...] = (7,)
    names: tuple[str, ...] = ("background", *DEFAULT_TISSUE_NAMES, *DEFAULT_LESION_NAMES)
    background_id: int = 0

    def __post_init__(self):
        ids = [self.background_id, *self.tissue_ids, *self.lesion_ids]
        if len(set(ids)) != len(ids):
            raise ValueError("background, tissue and lesion ids must be pairwise disjoint")
        if self.background_id != 0 or sorted(ids) != list(range(len(ids))):
            raise ValueError(f"class ids must be contiguous 0..C-1 with background 0, got {sorted(ids)}")
        if len(self.names) != len(ids):
            raise ValueError("one name per class is required")

    @property
    def n_classes(self) -> int:
        return 1 + len(self.tissue_ids) + len(self.lesion_ids)

    @property
    def tissue_side(self) -> tuple[int, ...]:
        """Channels entering the tissue loss: background plus tissue classes."""
        return (self.background_id, *self.tissue_ids)

    def name(self, class_id: int) -> str:
        return self.names[class_id]

    def is_default(self) -> bool:
        return self == ClassTaxonomy()


DEFAULT_TAXONOMY = ClassTaxonomy()


def validate(y: np.ndarray, tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"label maps must be integer typed, got {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= tax.n_classes):
        raise ValueError(f"label values must lie in 0..{tax.n_classes - 1}, found {y.min()}..{y.max()}")
    return y


def decompose_labels(y, tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> tuple[np.ndarray, np.ndarray]:
    """Split ``y`` into a tissue map and a lesion map with ``y == y_t + y_l``."""
    y = validate(y, tax)
    is_lesion = np.isin(y, tax.lesion_ids)
    y_t = np.where(is_lesion, 0, y).astype(y.dtype)
    y_l = np.where(is_lesion, y, 0).astype(y.dtype)
    return y_t, y_l


def one_hot(y, tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> Tensor:
    y = validate(y, tax)
    out = np.zeros((tax.n_classes, *y.shape))
    np.put_along_axis(out, y[None].astype(np.intp), 1.0, axis=0)
    return Tensor(out)


def argmax_labels(probs) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the lowest class id."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(data, axis=0).astype(np.uint8)
