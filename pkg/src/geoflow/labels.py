"""Label maps, soft label fields, label warping, fusion and Dice."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from geoflow.errors import GridMismatchError
from geoflow.grid import DeformationMap, GridSpec, interp_array


@dataclass(frozen=True, eq=False)
class LabelMap:
    grid: GridSpec
    labels: np.ndarray
    label_count: int

    def __post_init__(self):
        labels = np.array(self.labels, copy=True)
        if labels.shape != self.grid.dims:
            raise ValueError(f"labels shape {labels.shape} does not match grid dims {self.grid.dims}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.array_equal(labels, np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        count = int(self.label_count)
        if labels.size and (labels.min() < 0 or labels.max() >= count):
            raise ValueError(f"labels must lie in [0, {count})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_count", count)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.label_count)[self.labels]


@dataclass(frozen=True, eq=False)
class SoftLabelField:
    """Per-point label probabilities (or pre-argmax sums), shape ``(*dims, L)``."""

    grid: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.shape[:-1] != self.grid.dims or probs.ndim != self.grid.ndim + 1:
            raise ValueError(f"probs shape {probs.shape} does not match grid dims {self.grid.dims}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probabilities must be finite and nonnegative")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def label_count(self) -> int:
        return self.probs.shape[-1]

    def argmax(self) -> LabelMap:
        # np.argmax returns the first maximum: ties go to the smaller label
        return LabelMap(self.grid, np.argmax(self.probs, axis=-1), self.label_count)

    def is_normalized(self, tol: float = 1e-6) -> bool:
        return bool(np.all(np.abs(self.probs.sum(axis=-1) - 1.0) <= tol))


def warp_soft(soft: SoftLabelField, phi: DeformationMap) -> SoftLabelField:
    """Channel-wise multilinear resampling ``soft o phi``."""
    if soft.grid.ndim != phi.grid.ndim:
        raise GridMismatchError("dimensionality mismatch")
    return SoftLabelField(phi.grid, interp_array(soft.probs, soft.grid.to_index(phi.coords)))


def warp_labels(labels: LabelMap, phi: DeformationMap) -> LabelMap:
    """Resample labels at ``phi``: one-hot, multilinear per channel, argmax."""
    soft = SoftLabelField(labels.grid, labels.one_hot())
    return warp_soft(soft, phi).argmax()


def label_fusion(softs: Sequence[SoftLabelField]) -> LabelMap:
    """Sum the soft predictions and take the per-point argmax."""
    if not softs:
        raise ValueError("label fusion needs at least one input")
    first = softs[0]
    total = np.zeros(first.probs.shape)
    for s in softs:
        if s.grid != first.grid or s.probs.shape != first.probs.shape:
            raise GridMismatchError("soft label fields must share grid and label count")
        total += s.probs
    return SoftLabelField(first.grid, total).argmax()


def dice(a: LabelMap, b: LabelMap) -> tuple[list[float], float]:
    """Per-label Dice for labels >= 1 and their mean. Empty-vs-empty scores 1."""
    if a.grid != b.grid or a.label_count != b.label_count:
        raise GridMismatchError("label maps must share grid and label count")
    scores = []
    for lab in range(1, a.label_count):
        in_a = a.labels == lab
        in_b = b.labels == lab
        denom = int(in_a.sum() + in_b.sum())
        scores.append(1.0 if denom == 0 else 2.0 * int((in_a & in_b).sum()) / denom)
    mean = float(np.mean(scores)) if scores else 1.0
    return scores, mean
