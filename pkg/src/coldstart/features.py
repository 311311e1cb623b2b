"""Per-sample feature vectors for diversity-based selection.

The descriptor pools a (possibly ROI-cropped) volume into ``g x g x g``
cells and records each cell's mean and standard deviation. Externally
computed embeddings can be dropped in through the CSV reader instead.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from coldstart.errors import ConfigError, FormatError, InputError, InsufficientDataError
from coldstart.volumes import PoolSample, RoiBox, VolumeGrid, crop

DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class FeatureVector:
    id: str
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.size < 1 or not np.isfinite(vals).all():
            raise InputError(f"{self.id}: feature vector must be non-empty and finite")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class FeatureTable:
    """Rows of equal-length feature vectors keyed by sample id.

    ``mean``/``std`` hold the per-dimension statistics used when the
    table was standardized (``std`` is 0 for zeroed constant dimensions).
    """

    ids: tuple[str, ...]
    values: np.ndarray
    standardized: bool = False
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != len(ids) or vals.shape[1] < 1:
            raise InputError(f"feature values shape {vals.shape} does not match {len(ids)} ids")
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise InputError(f"duplicate feature id {dup!r}")
        if not np.isfinite(vals).all():
            raise InputError("feature values must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def rows(self) -> list[FeatureVector]:
        return [FeatureVector(i, v) for i, v in zip(self.ids, self.values)]

    @classmethod
    def from_vectors(cls, vectors) -> "FeatureTable":
        vectors = list(vectors)
        dims = {v.values.size for v in vectors}
        if len(dims) != 1:
            raise InputError(f"feature vectors have differing lengths {sorted(dims)}")
        return cls(tuple(v.id for v in vectors), np.stack([v.values for v in vectors]))


def _bin_edges(n: int, d: int) -> list[tuple[int, int]]:
    # start = floor(i*n/d), end = ceil((i+1)*n/d)
    return [((i * n) // d, -((-(i + 1) * n) // d)) for i in range(d)]


def _check_out_dims(dims, out_dims) -> tuple[int, int, int]:
    out = tuple(int(o) for o in out_dims)
    if len(out) != 3 or any(o < 1 or o > n for o, n in zip(out, dims)):
        raise ConfigError(f"output dims {tuple(out_dims)} must lie between 1 and volume dims {tuple(dims)}")
    return out


def _pooled_cells(arr: np.ndarray, out_dims):
    """Yield ``((i, j, k), block)`` over adaptive-pooling bins, x-fastest."""
    ex, ey, ez = (_bin_edges(n, d) for n, d in zip(arr.shape, out_dims))
    for k, (z0, z1) in enumerate(ez):
        for j, (y0, y1) in enumerate(ey):
            for i, (x0, x1) in enumerate(ex):
                yield (i, j, k), arr[x0:x1, y0:y1, z0:z1]


def adaptive_avg_pool(grid: VolumeGrid, out_dims) -> np.ndarray:
    """Average-pool a volume to ``out_dims`` with PyTorch-style adaptive bins.

    Bins along an axis of length ``n`` split into ``d`` parts span
    ``[floor(i*n/d), ceil((i+1)*n/d))``; neighbouring bins overlap by one
    voxel when ``d`` does not divide ``n``.
    """
    out_dims = _check_out_dims(grid.dims, out_dims)
    arr = np.asarray(grid.voxels, dtype=np.float64)
    out = np.empty(out_dims)
    for idx, block in _pooled_cells(arr, out_dims):
        out[idx] = block.mean()
    return out


def extract_descriptor(sample: PoolSample, grid_g: int = 4, roi: RoiBox | None = None) -> FeatureVector:
    """Per-cell (mean, std) over a ``g^3`` adaptive partition; length ``2*g**3``."""
    image = sample.image if roi is None else crop(sample.image, roi)
    out_dims = _check_out_dims(image.dims, (grid_g,) * 3)
    arr = np.asarray(image.voxels, dtype=np.float64)
    values = []
    for _, block in _pooled_cells(arr, out_dims):
        values.append(block.mean())
        values.append(block.std())
    return FeatureVector(sample.id, np.array(values))


def standardize(table: FeatureTable) -> FeatureTable:
    """Z-score every column with the population std; near-constant columns become 0."""
    if len(table) < 2:
        raise InsufficientDataError("standardization needs at least 2 rows")
    vals = table.values
    mean = vals.mean(axis=0)
    centered = vals - mean
    std = np.sqrt((centered**2).mean(axis=0))
    degenerate = std < DEGENERATE_STD
    std = np.where(degenerate, 0.0, std)
    out = np.where(degenerate, 0.0, centered / np.where(degenerate, 1.0, std))
    return FeatureTable(table.ids, out, True, mean, std)


def extract_table(samples, grid_g: int = 4, rois=None, standardized: bool = True) -> FeatureTable:
    """Descriptor table over a pool; ``rois`` maps sample id to RoiBox for local mode."""
    rois = rois or {}
    table = FeatureTable.from_vectors(
        extract_descriptor(s, grid_g, rois.get(s.id)) for s in samples
    )
    return standardize(table) if standardized else table


def write_feature_table(table: FeatureTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"f{i}" for i in range(table.dim)])
        for id_, row in zip(table.ids, table.values):
            writer.writerow([id_] + [format(float(v), ".17g") for v in row])


def read_feature_table(path) -> FeatureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty feature file")
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header[0] != "id" or header[1:] != [f"f{i}" for i in range(d)]:
        raise FormatError(f"{path}: header must be id,f0,...,f{{d-1}}, got {','.join(header)}")
    ids, values, seen = [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 1:
            raise FormatError(f"{path}: row {lineno} has {len(row) - 1} values, expected {d}")
        if row[0] in seen:
            raise FormatError(f"{path}: row {lineno} repeats id {row[0]!r}")
        seen.add(row[0])
        try:
            vec = [float(c) for c in row[1:]]
        except ValueError:
            raise FormatError(f"{path}: row {lineno} has a non-numeric cell") from None
        if not all(math.isfinite(v) for v in vec):
            raise FormatError(f"{path}: row {lineno} has a non-finite value")
        ids.append(row[0])
        values.append(vec)
    if not ids:
        raise FormatError(f"{path}: no feature rows")
    return FeatureTable(tuple(ids), np.array(values))
