"""Dice overlap and 95th-percentile Hausdorff distance for binary 3D masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from coldstart.errors import InputError, UndefinedMetricError
from coldstart.volumes import VolumeGrid


@dataclass(frozen=True)
class SegScore:
    dice: float
    hd95: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise InputError(f"dice must lie in [0, 1], got {self.dice}")
        if self.hd95 is not None and not self.hd95 >= 0:
            raise InputError(f"hd95 must be non-negative, got {self.hd95}")


def _mask_array(m) -> np.ndarray:
    arr = m.voxels if isinstance(m, VolumeGrid) else m
    return np.asarray(arr) > 0


def _check_pair(a, b):
    a, b = _mask_array(a), _mask_array(b)
    if a.shape != b.shape:
        raise InputError(f"mask dims differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1.0."""
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the foreground.

    Voxels past the volume edge count as background.
    """
    m = _mask_array(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = p[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def _directed_p95(src: np.ndarray, dst: np.ndarray) -> float:
    dist, _ = cKDTree(dst).query(src, k=1)
    return float(np.percentile(dist, 95.0))


def hd95(a, b, spacing=None) -> float:
    """Symmetric HD95 in physical units.

    Boundary points of each mask are matched to their nearest boundary
    point on the other mask; each direction contributes its 95th
    percentile (linear interpolation at rank ``0.95*(n-1)``) and the
    larger of the two is returned.

    Raises:
        UndefinedMetricError: if either mask is empty.
    """
    if spacing is None:
        spacing = a.spacing if isinstance(a, VolumeGrid) else (1.0, 1.0, 1.0)
    if isinstance(a, VolumeGrid) and isinstance(b, VolumeGrid) and a.spacing != b.spacing:
        raise InputError(f"mask spacings differ: {a.spacing} vs {b.spacing}")
    ma, mb = _check_pair(a, b)
    if not ma.any() or not mb.any():
        raise UndefinedMetricError("hd95 is undefined when either mask is empty")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(ma)) * sp
    pb = np.argwhere(boundary(mb)) * sp
    return max(_directed_p95(pa, pb), _directed_p95(pb, pa))


def score(pred, gt, spacing=None) -> SegScore:
    try:
        h = hd95(pred, gt, spacing)
    except UndefinedMetricError:
        h = None
    return SegScore(dice(pred, gt), h)


def fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def write_scores_csv(rows, path) -> None:
    """Write ``id,dice,hd95`` rows from ``(id, SegScore)`` pairs; absent hd95 is an empty cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "dice", "hd95"])
        for id_, s in rows:
            writer.writerow([id_, fmt(s.dice), fmt(s.hd95)])
