"""Sparse-to-dense displacement interpolation with normalised Gaussian kernels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .volume import identity_grid


@dataclass(frozen=True)
class InterpConfig:
    bandwidth: float = 4.0     # sigma_i, voxels
    truncation: float = 3.0    # kernel support radius in units of sigma_i
    weight_floor: float = 1e-12

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


def kernel_matrix(voxels: np.ndarray, points, sigma: float, radius: float) -> ad.Tensor:
    """K[x, p] = exp(-|x - p|^2 / (2 sigma^2)), zero beyond ``radius``.

    Differentiable with respect to ``points`` (N, 3); ``voxels`` is constant.
    """
    points = ad.as_tensor(points)
    P = points.data
    d2 = (voxels**2).sum(1)[:, None] - 2.0 * voxels @ P.T + (P**2).sum(1)[None, :]
    d2 = np.maximum(d2, 0.0)
    K = np.exp(-d2 / (2.0 * sigma**2))
    K[d2 > radius**2] = 0.0

    def backward(g):
        gk = g * K
        # dK/dp = K (x - p) / sigma^2
        return ((gk.T @ voxels - gk.sum(axis=0)[:, None] * P) / sigma**2,)

    return ad.custom_op(K, (points,), backward)


def densify(points, sparse, dims, cfg: InterpConfig | None = None) -> ad.Tensor:
    """Dense field (3, nx, ny, nz) from displacements ``sparse`` (N, 3) at ``points``.

    ``points`` may be a DrivingPointSet, an array or a tracked tensor.  Voxels
    outside every truncated kernel copy the nearest driving point.
    """
    cfg = cfg or InterpConfig()
    if hasattr(points, "provenance"):
        points = points.points
    points = ad.as_tensor(points)
    sparse = ad.as_tensor(sparse)
    if points.shape[0] < 1:
        raise ValueError("densify needs at least one driving point")
    if sparse.shape != points.shape:
        raise ValueError(f"sparse displacements {sparse.shape} do not match points {points.shape}")
    voxels = identity_grid(dims)
    K = kernel_matrix(voxels, points, cfg.bandwidth, cfg.truncation * cfg.bandwidth)
    denom = ad.add(ad.sum_(K, axis=1, keepdims=True), cfg.weight_floor)
    dense = ad.div(ad.matmul(K, sparse), denom)
    uncovered = ~(K.data > 0).any(axis=1)
    if uncovered.any():
        _, nearest = cKDTree(points.data).query(voxels[uncovered])
        covered = (~uncovered).astype(np.float64)[:, None]
        fill = np.zeros((len(voxels), points.shape[0]))
        fill[np.flatnonzero(uncovered), nearest] = 1.0
        dense = ad.add(ad.mul(dense, covered), ad.matmul(fill, sparse))
    return ad.reshape(ad.transpose(dense, (1, 0)), (3,) + tuple(dims))
