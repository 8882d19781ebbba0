"""Driving points predictor: a strided CNN encoder that deforms a coarse grid.

The encoder halves the resolution ``log2(spacing)`` times so that its output
lattice coincides with the rest grid.  The head predicts ``heads * 3`` raw
channels per vertex, squashed by ``cap * n * tanh(raw / (cap * n))`` so each
point moves at most ``cap`` of the image extent along every axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import FeatureMap, normalize_intensity
from .points import DrivingPointSet, grid_points
from .volume import Volume


class PredictorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    spacing: int = 8
    margin: int = 4
    cap: float = 0.2
    heads: int = 1
    widths: tuple = (16, 16, 16)

    def __post_init__(self):
        if not 0.0 < self.cap < 0.5:
            raise PredictorConfigError("cap must lie in (0, 0.5)")
        if self.heads < 1:
            raise PredictorConfigError("heads must be >= 1")
        if self.spacing < 1 or self.spacing & (self.spacing - 1):
            raise PredictorConfigError(f"spacing must be a power of two, got {self.spacing}")

    @property
    def stages(self) -> int:
        return int(np.log2(self.spacing))

    def stage_width(self, i: int) -> int:
        return self.widths[min(i, len(self.widths) - 1)]


def init_predictor_params(in_channels: int, cfg: PredictorConfig, rng: np.random.Generator,
                          prefix: str = "pred") -> ad.ParameterSet:
    """Seeded encoder weights; the head starts at zero so points start on the rest grid."""
    params = ad.ParameterSet()
    cin = in_channels
    for i in range(cfg.stages):
        w, b = ad.init_conv(rng, cfg.stage_width(i), cin)
        params[f"{prefix}.enc{i}.w"] = w
        params[f"{prefix}.enc{i}.b"] = b
        cin = cfg.stage_width(i)
    params[f"{prefix}.head.w"] = np.zeros((3 * cfg.heads, cin, 3, 3, 3))
    params[f"{prefix}.head.b"] = np.zeros(3 * cfg.heads)
    return params


def encoded_dims(dims, stages: int):
    out = tuple(dims)
    for _ in range(stages):
        out = tuple((n + 1) // 2 for n in out)
    return out


def squash(raw, extent, cap: float):
    """``cap * n * tanh(raw / (cap * n))`` per axis; ``extent`` broadcasts over the last axis."""
    scale = cap * np.asarray(extent, dtype=np.float64)
    return ad.mul(ad.tanh(ad.div(raw, scale)), scale)


def predictor_input(fixed: Volume, moving: Volume, feat_fixed: FeatureMap, feat_moving: FeatureMap) -> ad.Tensor:
    dims = fixed.dims
    for name, d in (("moving", moving.dims), ("feat_fixed", feat_fixed.dims), ("feat_moving", feat_moving.dims)):
        if d != dims:
            raise PredictorConfigError(f"{name} dims {d} differ from fixed dims {dims}")
    return ad.concat([
        ad.Tensor(normalize_intensity(fixed.data[0])[None]),
        ad.Tensor(normalize_intensity(moving.data[0])[None]),
        feat_fixed.values,
        feat_moving.values,
    ], axis=0)


def predict_points(fixed: Volume, moving: Volume, feat_fixed: FeatureMap, feat_moving: FeatureMap,
                   params, cfg: PredictorConfig | None = None, prefix: str = "pred") -> DrivingPointSet:
    """Predict ``heads * G`` driving points.

    ``params`` maps names to arrays or tracked tensors; with tracked tensors
    the returned ``points`` is a tracked (N, 3) tensor.  Ordering is
    head-major, then lexicographic over the rest grid.
    """
    cfg = cfg or PredictorConfig()
    dims = fixed.dims
    rest = grid_points(dims, cfg.spacing, cfg.margin)
    grid_dims = rest.rest_grid.dims
    if encoded_dims(dims, cfg.stages) != grid_dims:
        raise PredictorConfigError(
            f"{cfg.stages} stride-2 stages reduce {dims} to {encoded_dims(dims, cfg.stages)}, "
            f"but the rest grid is {grid_dims}"
        )
    h = predictor_input(fixed, moving, feat_fixed, feat_moving)
    for i in range(cfg.stages):
        h = ad.conv3d(h, params[f"{prefix}.enc{i}.w"], params[f"{prefix}.enc{i}.b"], stride=2, padding=1)
        h = ad.leaky_relu(h, 0.1)
    raw = ad.conv3d(h, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"], padding=1)
    G = rest.rest_grid.count
    # (3D, gx, gy, gz) -> (D, 3, G) -> (D, G, 3) -> (D*G, 3)
    raw = ad.reshape(ad.transpose(ad.reshape(raw, (cfg.heads, 3, G)), (0, 2, 1)), (cfg.heads * G, 3))
    disp = squash(raw, dims, cfg.cap)
    base = np.tile(rest.coords, (cfg.heads, 1))
    pts = ad.clip(ad.add(disp, base), 0.0, np.asarray(dims, dtype=np.float64) - 1.0)
    return DrivingPointSet(pts, "predicted", dims, rest.rest_grid)


def sample_driving_features(feat_fixed: FeatureMap, pts: DrivingPointSet) -> ad.Tensor:
    """Trilinear descriptors (N, d) at the driving points, differentiable in both."""
    points = pts.points if isinstance(pts.points, ad.Tensor) else ad.Tensor(pts.coords)
    return ad.grid_sample(feat_fixed.values, points)
