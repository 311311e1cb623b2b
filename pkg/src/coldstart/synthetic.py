"""Synthetic volumetric pools with ellipsoidal "organs".

A pool is a mixture of ``modes`` sample families. Each mode fixes an
organ intensity, background intensity, ellipsoid center and radii; each
sample perturbs its mode's parameters by ``jitter`` and adds Gaussian
noise (per sample, plus an optional per-mode texture shared by all of
the mode's samples). Samples may carry an inner "tumor" ellipsoid with lower intensity.
Everything is a function of ``(task_seed, seed, sample index)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coldstart.errors import ConfigError
from coldstart.rng import philox
from coldstart.volumes import PoolSample, VolumeGrid

_MODE_STREAM = 0x6D6F6465
_SAMPLE_STREAM = 0x73616D70


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    task_seed: int = 0
    organ_range: tuple[float, float] = (0.55, 0.9)
    background_range: tuple[float, float] = (0.05, 0.3)
    noise_std: float = 0.05
    shared_noise: float = 0.0
    tumor_prob: float = 0.0
    modes: int = 1
    jitter: float = 0.15
    radius_range: tuple[float, float] = (0.15, 0.28)
    id_prefix: str = "s"

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"synthetic pool needs n >= 2, got {self.n}")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ConfigError(f"synthetic dims must be three values >= 4, got {self.dims}")
        for name in ("organ_range", "background_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        if not 0.0 <= self.tumor_prob <= 1.0:
            raise ConfigError(f"tumor_prob must lie in [0, 1], got {self.tumor_prob}")
        if self.modes < 1 or min(self.noise_std, self.shared_noise, self.jitter) < 0:
            raise ConfigError("modes must be >= 1; noise_std, shared_noise and jitter non-negative")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ConfigError(f"radius_range must satisfy 0 < lo <= hi, got {self.radius_range}")
        # radii may grow by 50% through jitter; the ellipsoid must still fit
        if 2 * 1.5 * rhi * min(self.dims) + 3 > min(self.dims):
            raise ConfigError(
                f"ellipsoid with radius fraction {rhi} cannot fit in dims {self.dims}"
            )


@dataclass(frozen=True)
class _Mode:
    organ: float
    background: float
    center: np.ndarray
    radii: np.ndarray
    texture: np.ndarray | None


def _modes(spec: SyntheticSpec) -> list[_Mode]:
    rng = philox((spec.task_seed, _MODE_STREAM))
    lo, hi = spec.organ_range
    dims = np.asarray(spec.dims, dtype=np.float64)
    out = []
    for k in range(spec.modes):
        organ = lo + (hi - lo) * (k + 0.5) / spec.modes
        background = rng.uniform(*spec.background_range)
        radii = rng.uniform(*spec.radius_range, size=3) * dims.min()
        center = np.array([rng.uniform(r + 1, d - 2 - r) for r, d in zip(radii, dims)])
        texture = None
        if spec.shared_noise > 0:
            texture = spec.shared_noise * philox((spec.task_seed, _MODE_STREAM, k)).standard_normal(spec.dims)
        out.append(_Mode(organ, background, center, radii, texture))
    return out


def _ellipsoid(dims, center, radii) -> np.ndarray:
    axes = [(np.arange(d) - c) / r for d, c, r in zip(dims, center, radii)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return gx**2 + gy**2 + gz**2 <= 1.0


def _sample(spec: SyntheticSpec, mode: _Mode, mode_index: int, index: int) -> PoolSample:
    rng = philox((spec.seed, _SAMPLE_STREAM, index))
    dims = np.asarray(spec.dims, dtype=np.float64)
    j = spec.jitter
    radii = mode.radii * np.clip(1 + 0.5 * j * rng.standard_normal(3), 0.5, 1.5)
    radii = np.maximum(radii, 1.0)
    center = mode.center + j * radii.mean() * rng.standard_normal(3)
    center = np.clip(center, radii + 1, dims - 2 - radii)
    organ_val = mode.organ + 0.1 * j * rng.standard_normal()
    bg_val = mode.background + 0.1 * j * rng.standard_normal()

    organ = _ellipsoid(spec.dims, center, radii)
    image = np.full(spec.dims, bg_val)
    image[organ] = organ_val
    has_tumor = bool(rng.random() < spec.tumor_prob)
    tumor_voxels = 0
    if has_tumor:
        t_radii = np.maximum(0.4 * radii, 1.0)
        t_center = center + 0.3 * radii * rng.uniform(-1, 1, size=3)
        tumor = _ellipsoid(spec.dims, t_center, t_radii) & organ
        image[tumor] = organ_val - 0.3
        tumor_voxels = int(tumor.sum())
    if mode.texture is not None:
        image = image + mode.texture
    image = image + spec.noise_std * rng.standard_normal(spec.dims)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    sid = f"{spec.id_prefix}{index:03d}"
    return PoolSample(
        sid,
        VolumeGrid(image, spec.spacing, "intensity"),
        VolumeGrid(organ.astype(np.uint8), spec.spacing, "binary-mask"),
        "synthetic",
        {"mode": mode_index, "has_tumor": has_tumor, "tumor_voxels": tumor_voxels},
    )


def generate_pool(spec: SyntheticSpec) -> list[PoolSample]:
    """Samples ``0..n-1``; sample ``i`` belongs to mode ``i % modes``."""
    modes = _modes(spec)
    return [_sample(spec, modes[i % spec.modes], i % spec.modes, i) for i in range(spec.n)]


def duplicated_modes_spec(modes: int, n: int, seed: int = 0, **overrides) -> SyntheticSpec:
    """A pool of ``modes`` groups of near-duplicates.

    Samples of one mode share the mode's noise texture and differ only by
    tiny geometric/intensity jitter and faint per-sample noise, so any
    reasonable embedding separates the modes cleanly.
    """
    params = dict(n=n, modes=modes, seed=seed, task_seed=seed, jitter=0.002,
                  noise_std=0.0005, shared_noise=0.05)
    params.update(overrides)
    return SyntheticSpec(**params)
