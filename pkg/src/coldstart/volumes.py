"""3D volume data model, COLOSSAL-VOL file I/O, intensity preprocessing and ROIs.

Voxel arrays are held as ``(X, Y, Z)`` numpy arrays indexed ``[x, y, z]``.
On disk the payload is x-fastest (``index = x + X*y + X*Y*z``), which is
Fortran order for that array layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from coldstart.errors import (
    BoundsError,
    ConfigError,
    DegenerateInputError,
    EmptyForegroundError,
    FormatError,
    InputError,
    TruncationError,
)

KINDS = ("intensity", "binary-mask", "probability")
MAGIC = "COLOSSAL-VOL v1"
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}

CT_CLIP = (-1024.0, 1024.0)


@dataclass(frozen=True)
class VolumeGrid:
    """A 3D scalar field with physical voxel spacing.

    The voxel array is made read-only on construction so grids can be
    shared freely between threads.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise InputError(f"voxels must be a non-empty 3D array, got shape {vox.shape}")
        if self.kind not in KINDS:
            raise InputError(f"unknown volume kind {self.kind!r}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InputError(f"spacing must be three positive finite values, got {self.spacing}")
        if self.kind == "binary-mask":
            if not np.isin(vox, (0, 1)).all():
                raise InputError("binary-mask voxels must be 0 or 1")
            vox = vox.astype(np.uint8, copy=False)
        elif self.kind == "probability":
            if not ((vox >= 0) & (vox <= 1)).all():
                raise InputError("probability voxels must lie in [0, 1]")
        if vox is self.voxels:
            vox = vox.copy()
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    @property
    def size(self) -> int:
        return int(self.voxels.size)

    def with_voxels(self, voxels, kind: str | None = None) -> "VolumeGrid":
        return VolumeGrid(voxels, self.spacing, kind or self.kind)


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box of inclusive voxel indices."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise BoundsError("RoiBox needs three lo and three hi indices")
        if any(a < 0 or a > b for a, b in zip(lo, hi)):
            raise BoundsError(f"invalid RoiBox lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    def check_within(self, dims) -> None:
        if any(b >= n for b, n in zip(self.hi, dims)):
            raise BoundsError(f"RoiBox hi={self.hi} outside volume dims {tuple(dims)}")


@dataclass
class PoolSample:
    id: str
    image: VolumeGrid
    gt_mask: VolumeGrid | None = None
    modality: str = "synthetic"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in ("CT", "MR", "synthetic"):
            raise InputError(f"unknown modality {self.modality!r}")
        if self.gt_mask is not None and self.gt_mask.dims != self.image.dims:
            raise InputError(
                f"{self.id}: gt mask dims {self.gt_mask.dims} differ from image dims {self.image.dims}"
            )


def check_unique_ids(samples) -> None:
    seen = set()
    for s in samples:
        if s.id in seen:
            raise InputError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)


# --------------------------------------------------------------------------
# COLOSSAL-VOL I/O
# --------------------------------------------------------------------------

def _parse_header_line(lineno: int, line: str, key: str, count: int, conv):
    prefix = f"{key}: "
    if not line.startswith(prefix):
        raise FormatError(f"line {lineno}: expected '{key}: ...', got {line!r}")
    parts = line[len(prefix):].split(" ")
    if len(parts) != count:
        raise FormatError(f"line {lineno}: expected {count} values after '{key}:', got {line!r}")
    try:
        return tuple(conv(p) for p in parts)
    except ValueError:
        raise FormatError(f"line {lineno}: could not parse {line!r}") from None


def parse_volume(data: bytes, kind: str | None = None) -> VolumeGrid:
    """Decode COLOSSAL-VOL bytes. ``kind`` defaults to binary-mask for u8 payloads."""
    lines = []
    pos = 0
    for _ in range(5):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"line {len(lines) + 1}: header ended before the blank separator line")
        try:
            lines.append(data[pos:nl].decode("ascii"))
        except UnicodeDecodeError:
            raise FormatError(f"line {len(lines) + 1}: header is not ASCII") from None
        pos = nl + 1

    if lines[0] != MAGIC:
        raise FormatError(f"line 1: expected {MAGIC!r}, got {lines[0]!r}")
    dims = _parse_header_line(2, lines[1], "dims", 3, int)
    if any(n < 1 for n in dims):
        raise FormatError(f"line 2: dims must be positive, got {lines[1]!r}")
    spacing = _parse_header_line(3, lines[2], "spacing", 3, float)
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"line 3: spacing must be positive and finite, got {lines[2]!r}")
    dtype_name = _parse_header_line(4, lines[3], "dtype", 1, str)[0]
    if dtype_name not in _DTYPES:
        raise FormatError(f"line 4: unsupported dtype {dtype_name!r}")
    if lines[4] != "":
        raise FormatError(f"line 5: expected empty line, got {lines[4]!r}")

    dtype = _DTYPES[dtype_name]
    n = dims[0] * dims[1] * dims[2]
    payload = data[pos:]
    if len(payload) != n * dtype.itemsize:
        raise TruncationError(
            f"payload holds {len(payload) // dtype.itemsize} values "
            f"({len(payload)} bytes), header dims {dims} require {n}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    voxels = flat.reshape(dims, order="F")
    if kind is None:
        kind = "binary-mask" if dtype_name == "u8" else "intensity"
    try:
        return VolumeGrid(voxels, spacing, kind)
    except InputError as exc:
        raise FormatError(str(exc)) from None


def read_volume(path, kind: str | None = None) -> VolumeGrid:
    return parse_volume(Path(path).read_bytes(), kind)


def format_volume(grid: VolumeGrid, dtype: str | None = None) -> bytes:
    if dtype is None:
        dtype = "u8" if grid.kind == "binary-mask" else "f32le"
    if dtype not in _DTYPES:
        raise ConfigError(f"unsupported dtype {dtype!r}")
    X, Y, Z = grid.dims
    header = (
        f"{MAGIC}\n"
        f"dims: {X} {Y} {Z}\n"
        f"spacing: {' '.join(repr(s) for s in grid.spacing)}\n"
        f"dtype: {dtype}\n"
        "\n"
    )
    payload = np.asarray(grid.voxels, dtype=_DTYPES[dtype]).ravel(order="F").tobytes()
    return header.encode("ascii") + payload


def write_volume(grid: VolumeGrid, path, dtype: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(format_volume(grid, dtype))


def read_pool(directory, modality: str = "synthetic") -> list[PoolSample]:
    """Load ``images/<id>.vol`` (and ``masks/<id>.vol`` when present) from a directory."""
    directory = Path(directory)
    image_dir = directory / "images"
    if not image_dir.is_dir():
        raise FormatError(f"pool directory {directory} has no images/ subdirectory")
    samples = []
    for p in sorted(image_dir.glob("*.vol")):
        mask_path = directory / "masks" / p.name
        gt = read_volume(mask_path, "binary-mask") if mask_path.exists() else None
        samples.append(PoolSample(p.stem, read_volume(p), gt, modality))
    if not samples:
        raise FormatError(f"no .vol files in {image_dir}")
    return samples


def write_pool(samples, directory) -> None:
    directory = Path(directory)
    for s in samples:
        write_volume(s.image, directory / "images" / f"{s.id}.vol")
        if s.gt_mask is not None:
            write_volume(s.gt_mask, directory / "masks" / f"{s.id}.vol")


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def _require_finite(v: VolumeGrid) -> np.ndarray:
    arr = np.asarray(v.voxels, dtype=np.float64)
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InputError(f"non-finite voxel at index {idx}")
    return arr


def preprocess_ct(v: VolumeGrid) -> VolumeGrid:
    """Clip HU to [-1024, 1024] and rescale linearly to [0, 1]."""
    if v.kind != "intensity":
        raise InputError(f"preprocess_ct expects an intensity volume, got {v.kind}")
    arr = _require_finite(v)
    lo, hi = CT_CLIP
    out = (np.clip(arr, lo, hi) - lo) / (hi - lo)
    return v.with_voxels(out)


def preprocess_mr(v: VolumeGrid) -> VolumeGrid:
    """Z-score, clip to the 1st/99th percentiles, then min-max rescale to [0, 1].

    Percentiles interpolate linearly between order statistics at rank
    ``q * (n - 1)``. Not idempotent.
    """
    if v.kind != "intensity":
        raise InputError(f"preprocess_mr expects an intensity volume, got {v.kind}")
    arr = _require_finite(v)
    std = arr.std()
    if std == 0:
        raise DegenerateInputError("degenerate input: constant volume has zero standard deviation")
    z = (arr - arr.mean()) / std
    lo, hi = np.percentile(z, [1.0, 99.0])
    if hi <= lo:
        raise DegenerateInputError("degenerate input: 1st and 99th percentiles coincide")
    clipped = np.clip(z, lo, hi)
    out = (clipped - lo) / (hi - lo)
    return v.with_voxels(np.clip(out, 0.0, 1.0))


def otsu_threshold(v: VolumeGrid, bins: int = 256) -> float:
    """Otsu's threshold on a histogram spanning the voxel value range.

    Returns the center of the lowest-index bin ``k`` maximizing the
    between-class variance of the split {bins <= k} / {bins > k}. Pair it
    with :func:`apply_threshold`, which labels voxels strictly above the
    threshold as foreground.
    """
    if bins < 2:
        raise ConfigError(f"otsu_threshold needs at least 2 bins, got {bins}")
    arr = _require_finite(v)
    if arr.min() < 0 or arr.max() > 1:
        raise InputError("otsu_threshold expects voxels in [0, 1]")
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmin == vmax:
        raise DegenerateInputError("degenerate input: all voxels fall in one histogram bin")

    counts, edges = np.histogram(arr, bins=bins, range=(vmin, vmax))
    centers = (edges[:-1] + edges[1:]) / 2
    counts = counts.astype(np.float64)
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * centers)[:-1]
    total, total_sum = counts.sum(), (counts * centers).sum()
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.full(bins - 1, -1.0)
    mu0 = s0[valid] / w0[valid]
    mu1 = (total_sum - s0[valid]) / w1[valid]
    between[valid] = w0[valid] * w1[valid] * (mu0 - mu1) ** 2
    return float(centers[int(np.argmax(between))])


def apply_threshold(v: VolumeGrid, threshold: float) -> VolumeGrid:
    return v.with_voxels((np.asarray(v.voxels) > threshold).astype(np.uint8), "binary-mask")


def proxy_label_ct(v: VolumeGrid, window) -> VolumeGrid:
    """Pseudo-label: 1 where the raw HU value lies inside ``window`` (inclusive)."""
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise ConfigError(f"HU window needs lo < hi, got ({lo}, {hi})")
    arr = _require_finite(v)
    return v.with_voxels(((arr >= lo) & (arr <= hi)).astype(np.uint8), "binary-mask")


def proxy_label_mr(v: VolumeGrid) -> VolumeGrid:
    pre = preprocess_mr(v)
    return apply_threshold(pre, otsu_threshold(pre))


# --------------------------------------------------------------------------
# ROI
# --------------------------------------------------------------------------

def roi_from_mask(mask: VolumeGrid, margin: int = 5) -> RoiBox:
    """Foreground bounding box grown by ``margin`` voxels, clipped to the volume."""
    if margin < 0:
        raise ConfigError(f"margin must be non-negative, got {margin}")
    fg = np.asarray(mask.voxels) > 0
    if not fg.any():
        raise EmptyForegroundError("cannot build an ROI from an empty mask")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(fg.any(axis=other))
        lo.append(max(int(idx[0]) - margin, 0))
        hi.append(min(int(idx[-1]) + margin, mask.dims[axis] - 1))
    return RoiBox(tuple(lo), tuple(hi))


def crop(v: VolumeGrid, roi: RoiBox) -> VolumeGrid:
    roi.check_within(v.dims)
    return v.with_voxels(np.array(v.voxels[roi.slices()]))

