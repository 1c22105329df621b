"""autoPET-style evaluation: Dice, false positive volume, false negative volume.

FPV sums predicted components that touch no ground-truth foreground voxel;
FNV sums ground-truth components that touch no predicted voxel. Volumes are
reported in ml.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cc import DEFAULT_CONNECTIVITY, Connectivity, label_array
from .volume import BinaryMask, check_same_geometry, voxel_volume_ml


@dataclass(frozen=True)
class SegMetrics:
    case_id: str
    dice: float
    fpv_ml: float
    fnv_ml: float
    empty_gt: bool = False


def dice_score(pred: BinaryMask, gt: BinaryMask) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    check_same_geometry(pred, gt, "prediction and ground truth")
    p, g = pred.foreground, gt.foreground
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / denom


def _unmatched_volume(source: np.ndarray, other: np.ndarray, voxel_ml: float, conn) -> float:
    labels, k = label_array(source, conn)
    if k == 0:
        return 0.0
    sizes = np.bincount(labels.ravel(), minlength=k + 1)
    hit = np.zeros(k + 1, dtype=bool)
    hit[np.unique(labels[other])] = True
    hit[0] = True
    return float(sizes[~hit].sum()) * voxel_ml


def false_positive_volume(
    pred: BinaryMask, gt: BinaryMask, conn: Connectivity = DEFAULT_CONNECTIVITY
) -> float:
    check_same_geometry(pred, gt, "prediction and ground truth")
    return _unmatched_volume(pred.foreground, gt.foreground, voxel_volume_ml(pred), conn)


def false_negative_volume(
    pred: BinaryMask, gt: BinaryMask, conn: Connectivity = DEFAULT_CONNECTIVITY
) -> float:
    check_same_geometry(pred, gt, "prediction and ground truth")
    return _unmatched_volume(gt.foreground, pred.foreground, voxel_volume_ml(gt), conn)


def evaluate_case(
    pred: BinaryMask, gt: BinaryMask, conn: Connectivity = DEFAULT_CONNECTIVITY, case_id: str = "case"
) -> SegMetrics:
    return SegMetrics(
        case_id=case_id,
        dice=dice_score(pred, gt),
        fpv_ml=false_positive_volume(pred, gt, conn),
        fnv_ml=false_negative_volume(pred, gt, conn),
        empty_gt=not gt.foreground.any(),
    )


def aggregate(cases: Sequence[SegMetrics]) -> dict[str, float]:
    """Unweighted means over cases (NaN-free: an empty list gives zeros)."""
    if not cases:
        return {"mean_dice": 0.0, "mean_fpv_ml": 0.0, "mean_fnv_ml": 0.0}
    return {
        "mean_dice": float(np.mean([c.dice for c in cases])),
        "mean_fpv_ml": float(np.mean([c.fpv_ml for c in cases])),
        "mean_fnv_ml": float(np.mean([c.fnv_ml for c in cases])),
    }
