"""Voxel grids, label volumes and intensity preprocessing.

Arrays are indexed ``[x, y, z]`` with axis 0 = left-right, axis 1 =
anterior-posterior and axis 2 = inferior-superior. ``axes`` records the
three-letter orientation code (``RAS``, ``LAS``, ...) the data was read with;
only the axis identity matters downstream, flips are carried along.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParameterError

DEFAULT_CLIP_PERCENTILES = (0.5, 99.5)

_AXIS_LETTERS = ("LR", "AP", "IS")


def _check_axes(code: str) -> str:
    code = code.upper()
    if len(code) != 3 or any(c not in pair for c, pair in zip(code, _AXIS_LETTERS)):
        raise ParameterError(
            f"axis code {code!r} must name axis 0 L/R, axis 1 A/P and axis 2 I/S (e.g. RAS, LPS)"
        )
    return code


def _check_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    if len(spacing) != 3:
        raise ParameterError(f"spacing must have 3 components, got {len(spacing)}")
    sp = tuple(float(s) for s in spacing)
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise ParameterError(f"spacing must be positive and finite, got {sp}")
    return sp  # type: ignore[return-value]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D scalar field (PET in SUV, CT in HU, probabilities) with spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    axes: str = "RAS"

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ParameterError(f"voxel data must be a non-empty 3D array, got shape {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.isfinite(data).all():
            bad = int(np.count_nonzero(~np.isfinite(data)))
            raise ParameterError(f"voxel data contains {bad} non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "axes", _check_axes(self.axes))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> VoxelGrid:
        return VoxelGrid(data, self.spacing, self.axes)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer segmentation sharing a :class:`VoxelGrid`'s geometry.

    Label 0 is background and label 1 is lesion; other ids name anatomy.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    vocabulary: Mapping[int, str] = field(default_factory=dict)
    axes: str = "RAS"

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ParameterError(f"label data must be a non-empty 3D array, got shape {labels.shape}")
        if labels.dtype == bool:
            labels = labels.astype(np.uint8)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ParameterError(f"labels must be integers, got dtype {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ParameterError("labels must be non-negative")
        vocab = {0: "background", 1: "lesion"}
        vocab.update({int(k): str(v) for k, v in self.vocabulary.items()})
        present = np.unique(labels)
        missing = [int(k) for k in present if int(k) not in vocab]
        if missing:
            raise ParameterError(f"label ids {missing} are not in the vocabulary")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "vocabulary", vocab)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "axes", _check_axes(self.axes))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)  # type: ignore[return-value]


class BinaryMask(LabelVolume):
    """A :class:`LabelVolume` whose labels are restricted to {0, 1}."""

    def __init__(self, labels, spacing, axes: str = "RAS"):
        labels = np.asarray(labels)
        if labels.dtype == bool:
            labels = labels.astype(np.uint8)
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ParameterError("binary mask labels must be 0 or 1")
        super().__init__(labels.astype(np.uint8, copy=False), spacing, {}, axes)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels.astype(bool)

    @classmethod
    def from_labels(cls, volume: LabelVolume, label: int = 1) -> BinaryMask:
        return cls(volume.labels == label, volume.spacing, volume.axes)

    @classmethod
    def like(cls, other: VoxelGrid | LabelVolume, foreground: np.ndarray) -> BinaryMask:
        return cls(foreground, other.spacing, other.axes)


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float
    clip_lo: float
    clip_hi: float
    percentile_lo: float = 0.0
    percentile_hi: float = 100.0

    def __post_init__(self) -> None:
        if self.std < 0:
            raise ParameterError("std must be non-negative")
        if self.clip_lo > self.clip_hi:
            raise ParameterError(f"clip_lo {self.clip_lo} exceeds clip_hi {self.clip_hi}")
        if not 0 <= self.percentile_lo < self.percentile_hi <= 100:
            raise ParameterError(
                f"percentiles must satisfy 0 <= lo < hi <= 100, got {self.percentile_lo}, {self.percentile_hi}"
            )


def check_same_geometry(a, b, what: str = "volumes") -> None:
    """Raise :class:`ParameterError` unless ``a`` and ``b`` share dims and spacing."""
    if a.dims != b.dims:
        raise ParameterError(f"{what} have different shapes: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=1e-6, atol=0):
        raise ParameterError(f"{what} have different spacing: {a.spacing} vs {b.spacing}")


def voxel_volume_ml(grid: VoxelGrid | LabelVolume) -> float:
    """Volume of a single voxel in millilitres (1 ml = 1000 mm^3)."""
    sx, sy, sz = grid.spacing
    return sx * sy * sz / 1000.0


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Percentile ``q`` of ``values`` as the element at sorted index floor(q/100 * N).

    The index is clamped to N - 1 so q = 100 returns the maximum; no
    interpolation between neighbours is ever performed.
    """
    flat = np.asarray(values).ravel()
    n = flat.size
    idx = min(n - 1, int(math.floor(q / 100.0 * n)))
    return float(np.partition(flat, idx)[idx])


def _check_pcts(lo_pct: float, hi_pct: float) -> None:
    if not (0 <= lo_pct < hi_pct <= 100):
        raise ParameterError(f"percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}")


def _population_stats(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    return mean, float(np.sqrt(np.mean((v - mean) ** 2)))


def clip_percentile(
    grid: VoxelGrid, lo_pct: float = DEFAULT_CLIP_PERCENTILES[0], hi_pct: float = DEFAULT_CLIP_PERCENTILES[1]
) -> tuple[VoxelGrid, NormalizationStats]:
    """Clamp ``grid`` to its own [lo_pct, hi_pct] nearest-rank percentiles."""
    _check_pcts(lo_pct, hi_pct)
    lo = nearest_rank(grid.data, lo_pct)
    hi = nearest_rank(grid.data, hi_pct)
    out = np.clip(grid.data, lo, hi)
    mean, std = _population_stats(out)
    return grid.with_data(out), NormalizationStats(mean, std, lo, hi, lo_pct, hi_pct)


def _zscore(data: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std == 0:
        return np.zeros(data.shape, dtype=np.float64)
    return (np.asarray(data, dtype=np.float64) - mean) / std


def zscore_normalize(grid: VoxelGrid) -> tuple[VoxelGrid, NormalizationStats]:
    """Standardize to zero mean and unit population std (all zeros if std = 0)."""
    if grid.data.size < 2:
        raise ParameterError("z-score normalization needs at least 2 voxels")
    mean, std = _population_stats(grid.data)
    lo, hi = float(grid.data.min()), float(grid.data.max())
    out = _zscore(grid.data, mean, std)
    return grid.with_data(out), NormalizationStats(mean, std, lo, hi)


def fit_dataset_stats(
    grids: Iterable[VoxelGrid],
    lo_pct: float = DEFAULT_CLIP_PERCENTILES[0],
    hi_pct: float = DEFAULT_CLIP_PERCENTILES[1],
) -> NormalizationStats:
    """Global clip bounds and mean/std over the voxels of every grid in a dataset."""
    _check_pcts(lo_pct, hi_pct)
    values = np.concatenate([g.data.ravel() for g in grids])
    if values.size == 0:
        raise ParameterError("dataset is empty")
    lo = nearest_rank(values, lo_pct)
    hi = nearest_rank(values, hi_pct)
    mean, std = _population_stats(np.clip(values, lo, hi))
    return NormalizationStats(mean, std, lo, hi, lo_pct, hi_pct)


def apply_dataset_stats(grid: VoxelGrid, stats: NormalizationStats) -> VoxelGrid:
    """Clip to the shared bounds, then z-score with the shared mean and std."""
    clipped = np.clip(grid.data, stats.clip_lo, stats.clip_hi)
    return grid.with_data(_zscore(clipped, stats.mean, stats.std))


def clamp_nonnegative(grid: VoxelGrid) -> VoxelGrid:
    return grid.with_data(np.maximum(grid.data, 0))
