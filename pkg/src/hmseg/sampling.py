"""Patch sampling and dataset splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .labels import DEFAULT_TAXONOMY, ClassTaxonomy
from .phantom import Sample


@dataclass(frozen=True)
class PatchSpec:
    height: int = 48
    width: int = 48
    samples_per_image: int = 1

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("patch dimensions must be positive")

    def check_fits(self, shape: tuple[int, int]) -> None:
        if self.height > shape[0] or self.width > shape[1]:
            raise ValueError(f"patch {self.height}x{self.width} larger than image {shape[0]}x{shape[1]}")

    @classmethod
    def parse(cls, text: str) -> "PatchSpec":
        h, w = (int(v) for v in text.lower().split("x"))
        return cls(h, w)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a disc of the given radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disc(radius))


def sample_patch_uniform(sample: Sample, spec: PatchSpec, rng: np.random.Generator):
    """Crop at a top-left corner drawn uniformly over all valid positions.

    Returns ``(patch, (top, left))``.
    """
    h, w = sample.labels_full.shape
    spec.check_fits((h, w))
    top = int(rng.integers(0, h - spec.height + 1))
    left = int(rng.integers(0, w - spec.width + 1))
    return sample.crop(top, left, spec.height, spec.width), (top, left)


def lesion_mask(sample: Sample, tax: ClassTaxonomy = DEFAULT_TAXONOMY) -> np.ndarray:
    return np.isin(sample.visible_labels(tax), tax.lesion_ids)


def sample_patch_weighted(sample: Sample, spec: PatchSpec, rng: np.random.Generator,
                          dilation_radius: int = 3, tax: ClassTaxonomy = DEFAULT_TAXONOMY):
    """Crop centred on a pixel drawn uniformly from the dilated lesion mask.

    The window is clamped into the image, so the chosen centre always lies
    inside the returned patch. Returns ``(patch, (top, left), (ci, cj))``.
    """
    h, w = sample.labels_full.shape
    spec.check_fits((h, w))
    lesion = lesion_mask(sample, tax)
    if not lesion.any():
        raise ValueError(f"sample {sample.sample_id!r} has no visible lesion pixels")
    candidates = np.argwhere(dilate(lesion, dilation_radius))
    ci, cj = (int(v) for v in candidates[rng.integers(len(candidates))])
    top = min(max(ci - spec.height // 2, 0), h - spec.height)
    left = min(max(cj - spec.width // 2, 0), w - spec.width)
    return sample.crop(top, left, spec.height, spec.width), (top, left), (ci, cj)


def split_dataset(rows: Sequence[dict], seed: int = 0,
                  ratios: tuple[float, float, float] = (0.70, 0.10, 0.20)) -> tuple[list[str], list[str], list[str]]:
    """Stratified (by kind) train/validation/test split of manifest rows."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    out: tuple[list[str], list[str], list[str]] = ([], [], [])
    for kind in sorted({r["kind"] for r in rows}):
        ids = sorted(r["id"] for r in rows if r["kind"] == kind)
        n = len(ids)
        n_train = int(round(ratios[0] * n))
        n_val = int(round(ratios[1] * n))
        n_test = n - n_train - n_val
        if any(k == 0 for k, r in zip((n_train, n_val, n_test), ratios) if r > 0) or n_test < 0:
            raise ValueError(f"{n} {kind} samples are too few for ratios {ratios}")
        order = [ids[i] for i in rng.permutation(n)]
        out[0].extend(order[:n_train])
        out[1].extend(order[n_train:n_train + n_val])
        out[2].extend(order[n_train + n_val:])
    return out


def write_split(path, train, val, test) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "split"])
        for name, ids in (("train", train), ("val", val), ("test", test)):
            for i in ids:
                wr.writerow([i, name])


def read_split(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["split"]].append(row["id"])
    return out
