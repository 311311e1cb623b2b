"""Uncertainty scores from stacks of stochastic foreground-probability maps.

Entropy is the binary predictive entropy of the run-averaged probability
(natural log, so at most ``ln 2``); variance is the population variance
across runs (at most 0.25). Both are reduced to one score per sample by
averaging over all voxels or over an ROI.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from coldstart.errors import FormatError, InputError, InsufficientDataError
from coldstart.volumes import RoiBox, VolumeGrid, read_volume, write_volume

DEFAULT_RUNS = 20
LN2 = math.log(2.0)
MEASURES = ("entropy", "variance")


@dataclass(frozen=True)
class PredictionStack:
    id: str
    runs: tuple[VolumeGrid, ...]
    roi: RoiBox | None = None

    def __post_init__(self):
        runs = tuple(self.runs)
        if len(runs) < 2:
            raise InsufficientDataError(f"{self.id}: need at least 2 runs, got {len(runs)}")
        first = runs[0]
        for r in runs:
            if r.kind != "probability":
                raise InputError(f"{self.id}: stack runs must be probability volumes")
            if r.dims != first.dims or r.spacing != first.spacing:
                raise InputError(f"{self.id}: runs differ in dims or spacing")
        if self.roi is not None:
            self.roi.check_within(first.dims)
        object.__setattr__(self, "runs", runs)

    @property
    def array(self) -> np.ndarray:
        """Runs stacked along axis 0 as float64, shape ``(T, X, Y, Z)``."""
        return np.stack([np.asarray(r.voxels, dtype=np.float64) for r in self.runs])

    @classmethod
    def from_array(cls, id: str, arr, spacing=(1.0, 1.0, 1.0), roi=None) -> "PredictionStack":
        arr = np.asarray(arr)
        if arr.ndim != 4:
            raise InputError(f"{id}: stack array must be 4D (T, X, Y, Z), got shape {arr.shape}")
        return cls(id, tuple(VolumeGrid(a, spacing, "probability") for a in arr), roi)


@dataclass(frozen=True)
class UncertaintyScore:
    id: str
    measure: str
    score: float
    roi_mode: str = "global"

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise InputError(f"unknown uncertainty measure {self.measure!r}")
        if not self.score >= 0:
            raise InputError(f"{self.id}: uncertainty score must be non-negative, got {self.score}")


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    for q in (p, 1.0 - p):
        pos = q > 0
        out[pos] -= q[pos] * np.log(q[pos])
    # rounding near p = 0.5 can land one ulp above the ceiling
    return np.minimum(out, LN2)


def entropy_map(stack: PredictionStack) -> VolumeGrid:
    mean = stack.array.mean(axis=0)
    return stack.runs[0].with_voxels(_binary_entropy(mean), "intensity")


def variance_map(stack: PredictionStack) -> VolumeGrid:
    arr = stack.array
    var = ((arr - arr.mean(axis=0)) ** 2).mean(axis=0)
    return stack.runs[0].with_voxels(var, "intensity")


def aggregate(umap: VolumeGrid, roi: RoiBox | None = None) -> float:
    arr = np.asarray(umap.voxels, dtype=np.float64)
    if roi is not None:
        roi.check_within(umap.dims)
        arr = arr[roi.slices()]
    if not np.isfinite(arr).all():
        raise InputError("uncertainty map contains non-finite values")
    return float(arr.mean())


def score_stack(stack: PredictionStack, measure: str, roi_mode: str = "global") -> UncertaintyScore:
    if measure not in MEASURES:
        raise InputError(f"unknown uncertainty measure {measure!r}")
    if roi_mode == "local" and stack.roi is None:
        raise InputError(f"{stack.id}: local roi mode requires an ROI on the stack")
    umap = entropy_map(stack) if measure == "entropy" else variance_map(stack)
    roi = stack.roi if roi_mode == "local" else None
    return UncertaintyScore(stack.id, measure, aggregate(umap, roi), roi_mode)


_RUN_NAME = re.compile(r"run_(\d{3,})\.vol")


def read_stack(directory, id: str | None = None, roi: RoiBox | None = None) -> PredictionStack:
    """Load ``run_000.vol ... run_{T-1}.vol`` from one sample's stack directory."""
    directory = Path(directory)
    found = {}
    for p in directory.iterdir():
        m = _RUN_NAME.fullmatch(p.name)
        if m:
            found[int(m.group(1))] = p
    if sorted(found) != list(range(len(found))):
        raise FormatError(f"{directory}: run files are not numbered contiguously from run_000")
    runs = tuple(read_volume(found[i], "probability") for i in range(len(found)))
    try:
        return PredictionStack(id or directory.name, runs, roi)
    except InputError as exc:
        raise FormatError(f"{directory}: {exc}") from None


def read_stacks(root, rois=None) -> list[PredictionStack]:
    """Load every ``<root>/<id>/`` stack, sorted by id."""
    rois = rois or {}
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise FormatError(f"{root}: no stack directories")
    return [read_stack(d, d.name, rois.get(d.name)) for d in dirs]


def write_stack(stack: PredictionStack, root) -> None:
    out = Path(root) / stack.id
    for t, run in enumerate(stack.runs):
        write_volume(run, out / f"run_{t:03d}.vol")
