"""Nearest-prototype voxel classifier used in place of a trained 3D U-Net.

Each voxel is described by six numbers: intensity, the mean and standard
deviation of its 3x3x3 neighbourhood (edges replicated), and its
normalized x/y/z position. Training stores one prototype per class (the
class-mean descriptor in standardized units); prediction assigns each
voxel to the nearest prototype. Stochastic prediction jitters the
prototypes with Gaussian noise to imitate MC-dropout disagreement.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from coldstart.errors import InputError
from coldstart.rng import philox
from coldstart.uncertainty import DEFAULT_RUNS, PredictionStack
from coldstart.volumes import VolumeGrid

N_DESCRIPTORS = 6
CLASSES = (0, 1)
DEFAULT_SIGMA = 0.1


def voxel_descriptors(image: VolumeGrid) -> np.ndarray:
    """Descriptor matrix of shape ``(X*Y*Z, 6)`` in C order over ``[x, y, z]``."""
    arr = np.asarray(image.voxels, dtype=np.float64)
    local_mean = uniform_filter(arr, size=3, mode="nearest")
    local_sq = uniform_filter(arr * arr, size=3, mode="nearest")
    local_std = np.sqrt(np.maximum(local_sq - local_mean**2, 0.0))
    X, Y, Z = arr.shape
    gx, gy, gz = np.meshgrid(
        np.arange(X) / X, np.arange(Y) / Y, np.arange(Z) / Z, indexing="ij"
    )
    return np.stack([arr, local_mean, local_std, gx, gy, gz], axis=-1).reshape(-1, N_DESCRIPTORS)


@dataclass(frozen=True)
class SurrogateModel:
    classes: tuple[int, ...]
    prototypes: np.ndarray  # (len(classes), 6), standardized units
    mean: np.ndarray
    std: np.ndarray

    def standardize(self, desc: np.ndarray) -> np.ndarray:
        return (desc - self.mean) / self.std


def surrogate_train(images, masks) -> SurrogateModel:
    """Fit class prototypes from paired intensity images and binary masks."""
    images, masks = list(images), list(masks)
    if not images or len(images) != len(masks):
        raise InputError("surrogate_train needs at least one (image, mask) pair")
    total = np.zeros(N_DESCRIPTORS)
    total_sq = np.zeros(N_DESCRIPTORS)
    class_sum = np.zeros((len(CLASSES), N_DESCRIPTORS))
    class_n = np.zeros(len(CLASSES), dtype=np.int64)
    count = 0
    for image, mask in zip(images, masks):
        if mask.dims != image.dims:
            raise InputError(f"mask dims {mask.dims} differ from image dims {image.dims}")
        desc = voxel_descriptors(image)
        labels = (np.asarray(mask.voxels) > 0).reshape(-1).astype(np.int64)
        total += desc.sum(axis=0)
        total_sq += (desc * desc).sum(axis=0)
        count += len(desc)
        for c in CLASSES:
            sel = labels == c
            class_sum[c] += desc[sel].sum(axis=0)
            class_n[c] += int(sel.sum())

    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    std = np.where(std < 1e-12, 1.0, std)
    present = tuple(c for c in CLASSES if class_n[c] > 0)
    missing = [c for c in CLASSES if class_n[c] == 0]
    if missing:
        warnings.warn(f"training masks contain no voxels of class {missing}; it will never be predicted")
    protos = np.stack([(class_sum[c] / class_n[c] - mean) / std for c in present])
    return SurrogateModel(present, protos, mean, std)


def _nearest_class(std_desc: np.ndarray, prototypes: np.ndarray, classes) -> np.ndarray:
    d = ((std_desc[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=-1)
    return np.asarray(classes)[np.argmin(d, axis=1)]


def surrogate_predict(model: SurrogateModel, image: VolumeGrid, descriptors=None) -> VolumeGrid:
    """Deterministic foreground indicator as a probability grid.

    ``descriptors`` may carry a cached :func:`voxel_descriptors` result.
    """
    if descriptors is None:
        descriptors = voxel_descriptors(image)
    desc = model.standardize(descriptors)
    fg = (_nearest_class(desc, model.prototypes, model.classes) == 1).astype(np.float64)
    return image.with_voxels(fg.reshape(image.dims), "probability")


def surrogate_predict_stack(
    model: SurrogateModel,
    image: VolumeGrid,
    id: str,
    runs: int = DEFAULT_RUNS,
    sigma: float = DEFAULT_SIGMA,
    seed: int | tuple = 0,
    roi=None,
) -> PredictionStack:
    """``runs`` predictions, each with prototypes perturbed by ``N(0, sigma^2)``."""
    if sigma < 0:
        raise InputError(f"perturbation sigma must be non-negative, got {sigma}")
    rng = philox(seed)
    desc = model.standardize(voxel_descriptors(image))
    out = np.empty((runs,) + image.dims)
    for t in range(runs):
        noise = rng.normal(0.0, 1.0, size=model.prototypes.shape) * sigma
        cls = _nearest_class(desc, model.prototypes + noise, model.classes)
        out[t] = (cls == 1).reshape(image.dims)
    return PredictionStack.from_array(id, out, image.spacing, roi)
