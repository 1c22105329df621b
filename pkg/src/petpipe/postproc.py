"""Postprocessing operators and threshold sweeps.

Both operators only ever remove foreground voxels. A sweep applies one
operator at a series of thresholds and reports metric changes relative to
the untouched predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cc import DEFAULT_CONNECTIVITY, Connectivity, label_array
from .classifier import TracerClass
from .errors import ParameterError
from .metrics import SegMetrics, aggregate, evaluate_case
from .volume import BinaryMask, VoxelGrid, check_same_geometry, voxel_volume_ml

SUV_THRESHOLDS = {"fdg": 1.5, "psma": 1.0}


@dataclass(frozen=True)
class TracerDefaults:
    suv_threshold: float
    min_cc_voxels: int = 0

    def __post_init__(self) -> None:
        if self.suv_threshold < 0 or self.min_cc_voxels < 0:
            raise ParameterError("postprocessing thresholds must be non-negative")


def tracer_defaults(tracer) -> TracerDefaults:
    """Final-submission settings: SUV 1.5 for FDG, 1.0 for PSMA, no CC removal."""
    return TracerDefaults(SUV_THRESHOLDS[TracerClass.parse(tracer).label])


def suv_threshold_mask(pred: BinaryMask, pet: VoxelGrid, t: float) -> BinaryMask:
    """Keep predicted voxels whose PET value is at least ``t``."""
    check_same_geometry(pred, pet, "prediction and PET")
    return BinaryMask.like(pred, pred.foreground & (pet.data >= t))


def remove_small_components(
    pred: BinaryMask,
    min_size: float,
    conn: Connectivity = DEFAULT_CONNECTIVITY,
    unit: str = "voxels",
) -> BinaryMask:
    """Zero out components smaller than ``min_size`` (voxel count, or ml when ``unit='ml'``)."""
    if min_size < 0:
        raise ParameterError(f"minimum component size must be non-negative, got {min_size}")
    if unit not in ("voxels", "ml"):
        raise ParameterError(f"unknown component size unit {unit!r}")
    labels, k = label_array(pred.foreground, conn)
    if k == 0:
        return pred
    sizes = np.bincount(labels.ravel(), minlength=k + 1).astype(np.float64)
    if unit == "ml":
        sizes *= voxel_volume_ml(pred)
    keep = sizes >= min_size
    keep[0] = False
    return BinaryMask.like(pred, keep[labels])


@dataclass(frozen=True)
class SweepCase:
    case_id: str
    pred: BinaryMask
    gt: BinaryMask
    pet: VoxelGrid | None = None


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    delta_dice: float
    delta_fpv_ml: float
    delta_fnv_ml: float
    mean_case_delta_dice: float
    mean_case_delta_fpv_ml: float
    mean_case_delta_fnv_ml: float
    case_delta_dice: tuple[float, ...] = ()
    case_delta_fpv_ml: tuple[float, ...] = ()
    case_delta_fnv_ml: tuple[float, ...] = ()


@dataclass(frozen=True)
class SweepReport:
    """``delta_*`` columns are differences of cohort means (postprocessed - baseline);
    ``mean_case_delta_*`` are the means of the per-case differences."""

    kind: str
    baseline: dict[str, float]
    rows: list[SweepRow] = field(default_factory=list)
    case_ids: tuple[str, ...] = ()


def _apply(kind: str, case: SweepCase, t: float, conn, unit: str) -> BinaryMask:
    if kind == "suv":
        if case.pet is None:
            raise ParameterError(f"case {case.case_id}: SUV sweep needs a PET volume")
        return suv_threshold_mask(case.pred, case.pet, t)
    return remove_small_components(case.pred, t, conn, unit)


def sweep(
    cases: Sequence[SweepCase],
    kind: str,
    thresholds: Sequence[float],
    conn: Connectivity = DEFAULT_CONNECTIVITY,
    unit: str = "voxels",
) -> SweepReport:
    """Evaluate an operator (``suv`` or ``cc``) at every threshold against the baseline."""
    if kind not in ("suv", "cc"):
        raise ParameterError(f"sweep kind must be 'suv' or 'cc', got {kind!r}")
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ParameterError("at least one threshold is required")
    if any(not math.isfinite(t) and t != math.inf for t in thresholds):
        raise ParameterError("thresholds must be numbers")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ParameterError(f"thresholds must be strictly increasing, got {thresholds}")
    cases = sorted(cases, key=lambda c: c.case_id)

    base = [evaluate_case(c.pred, c.gt, conn, c.case_id) for c in cases]
    base_agg = aggregate(base)
    rows = []
    for t in thresholds:
        post: list[SegMetrics] = [
            evaluate_case(_apply(kind, c, t, conn, unit), c.gt, conn, c.case_id) for c in cases
        ]
        agg = aggregate(post)
        dd = tuple(p.dice - b.dice for p, b in zip(post, base))
        dp = tuple(p.fpv_ml - b.fpv_ml for p, b in zip(post, base))
        dn = tuple(p.fnv_ml - b.fnv_ml for p, b in zip(post, base))
        rows.append(
            SweepRow(
                threshold=t,
                delta_dice=agg["mean_dice"] - base_agg["mean_dice"],
                delta_fpv_ml=agg["mean_fpv_ml"] - base_agg["mean_fpv_ml"],
                delta_fnv_ml=agg["mean_fnv_ml"] - base_agg["mean_fnv_ml"],
                mean_case_delta_dice=float(np.mean(dd)) if dd else 0.0,
                mean_case_delta_fpv_ml=float(np.mean(dp)) if dp else 0.0,
                mean_case_delta_fnv_ml=float(np.mean(dn)) if dn else 0.0,
                case_delta_dice=dd,
                case_delta_fpv_ml=dp,
                case_delta_fnv_ml=dn,
            )
        )
    return SweepReport(kind, base_agg, rows, tuple(c.case_id for c in cases))
