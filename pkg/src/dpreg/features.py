"""Dense feature extraction: normalised intensity, MIND, and a small learned CNN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .volume import Volume

FEATURE_KINDS = ("intensity", "mind", "learned")
LEARNED_WIDTH = 8
LEARNED_DIM = 8
_FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass
class FeatureMap:
    """Per-voxel descriptors ``(d, nx, ny, nz)``; ``values`` may be tape-tracked."""

    values: ad.Tensor
    kind: str

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self):
        return tuple(self.values.shape[1:])

    def to_volume(self) -> Volume:
        return Volume(self.values.data)


@dataclass(frozen=True)
class MindConfig:
    patch_radius: int = 1
    sigma: float = 0.8
    variance_floor: float = 1e-3

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if not 0.0 < self.variance_floor < 1.0:
            raise ValueError("variance_floor must lie in (0, 1)")


def _single_channel(img: Volume, who: str) -> np.ndarray:
    if img.channels != 1:
        raise ValueError(f"{who} expects a single-channel image, got {img.channels} channels")
    return img.data[0]


def normalize_intensity(arr: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant input maps to zeros."""
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return np.zeros_like(arr, dtype=np.float64)
    return (arr - lo) / (hi - lo)


def intensity_features(img: Volume) -> FeatureMap:
    arr = _single_channel(img, "intensity_features")
    return FeatureMap(ad.Tensor(normalize_intensity(arr)[None]), "intensity")


def _gaussian_patch_kernel(radius: int, sigma: float) -> np.ndarray:
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return k / k.sum()


def _shift(arr: np.ndarray, offset) -> np.ndarray:
    """``out[p] = arr[clamp(p + offset)]`` with border replication."""
    pad = max(abs(o) for o in offset)
    padded = np.pad(arr, pad, mode="edge")
    sl = tuple(slice(pad + o, pad + o + n) for o, n in zip(offset, arr.shape))
    return padded[sl]


def patch_distances(arr: np.ndarray, cfg: MindConfig) -> np.ndarray:
    """Gaussian-weighted patch SSD between each voxel and its 6 face neighbours."""
    kernel = _gaussian_patch_kernel(cfg.patch_radius, cfg.sigma)
    out = np.empty((len(_FACE_OFFSETS),) + arr.shape)
    for k, off in enumerate(_FACE_OFFSETS):
        sq = (arr - _shift(arr, off)) ** 2
        out[k] = ndimage.correlate(sq, kernel, mode="nearest")
    return out


def mind_features(img: Volume, cfg: MindConfig | None = None) -> FeatureMap:
    """Six-channel MIND descriptor with per-voxel max normalisation."""
    cfg = cfg or MindConfig()
    arr = _single_channel(img, "mind_features")
    need = 2 * cfg.patch_radius + 3
    if min(arr.shape) < need:
        raise ValueError(f"mind_features needs at least {need} voxels per axis, got {arr.shape}")
    arr = normalize_intensity(arr)
    dist = patch_distances(arr, cfg)
    var = dist.mean(axis=0)
    floor = max(cfg.variance_floor * var.mean(), np.finfo(np.float64).tiny)
    var = np.maximum(var, floor)
    desc = np.exp(-dist / var)
    desc /= desc.max(axis=0, keepdims=True)
    return FeatureMap(ad.Tensor(desc), "mind")


def init_learned_params(rng: np.random.Generator, prefix: str = "feat") -> ad.ParameterSet:
    params = ad.ParameterSet()
    widths = [1, LEARNED_WIDTH, LEARNED_WIDTH, LEARNED_DIM]
    for layer in range(3):
        w, b = ad.init_conv(rng, widths[layer + 1], widths[layer])
        params[f"{prefix}.conv{layer}.w"] = w
        params[f"{prefix}.conv{layer}.b"] = b
    return params


def learned_features(img: Volume, params, prefix: str = "feat") -> FeatureMap:
    """Three-layer CNN descriptor (d = 8); ``params`` may hold tracked tensors."""
    arr = _single_channel(img, "learned_features")
    widths = [1, LEARNED_WIDTH, LEARNED_WIDTH, LEARNED_DIM]
    for layer in range(3):
        w = params.get(f"{prefix}.conv{layer}.w")
        expected = (widths[layer + 1], widths[layer], 3, 3, 3)
        if w is None or tuple(np.shape(getattr(w, "data", w))) != expected:
            raise ValueError(
                f"learned_features: {prefix}.conv{layer}.w must have shape {expected}, "
                f"got {None if w is None else np.shape(getattr(w, 'data', w))}"
            )
    h = ad.Tensor(normalize_intensity(arr)[None])
    for layer in range(3):
        h = ad.conv3d(h, params[f"{prefix}.conv{layer}.w"], params[f"{prefix}.conv{layer}.b"], padding=1)
        if layer < 2:
            h = ad.leaky_relu(h, 0.1)
    return FeatureMap(h, "learned")
