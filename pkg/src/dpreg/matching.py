"""Cosine matching potentials over a discrete displacement search region."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import FeatureMap
from .points import DrivingPointSet

NORM_EPS = 1e-12


@dataclass(frozen=True)
class SearchRegion:
    """Displacements ``{-r, -r+t, ..., r}^3`` enumerated lexicographically in (dx, dy, dz)."""

    radius: int = 6
    stride: int = 2

    def __post_init__(self):
        if self.radius < 0 or self.stride < 1:
            raise ValueError("need radius >= 0 and stride >= 1")
        if self.radius % self.stride:
            raise ValueError(f"stride {self.stride} must divide radius {self.radius}")

    @property
    def steps(self) -> np.ndarray:
        return np.arange(-self.radius, self.radius + 1, self.stride, dtype=np.float64)

    @property
    def size(self) -> int:
        return len(self.steps) ** 3

    def displacements(self) -> np.ndarray:
        s = self.steps
        return np.stack(np.meshgrid(s, s, s, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class DisplacementDistribution:
    """Potentials (|O|, |D|) plus the points and region they were computed for."""

    potentials: ad.Tensor
    points: np.ndarray
    region: SearchRegion


def cosine_potentials(desc, candidates, eps: float = NORM_EPS) -> ad.Tensor:
    """Row-wise cosine between ``desc`` (P, d) and ``candidates`` (P, K, d) -> (P, K).

    The squared-norm product is floored at ``eps`` rather than offset by it,
    so rescaling either side leaves the result unchanged unless a vector is
    (nearly) zero; a zero vector scores 0 against everything.
    """
    P, d = desc.shape
    desc3 = ad.reshape(desc, (P, 1, d))
    num = ad.sum_(ad.mul(candidates, desc3), axis=2)
    n_desc = ad.sum_(ad.mul(desc, desc), axis=1, keepdims=True)
    n_cand = ad.sum_(ad.mul(candidates, candidates), axis=2)
    return ad.div(num, ad.sqrt(ad.maximum(ad.mul(n_desc, n_cand), eps)))


def compute_potentials(desc, feat_moving: FeatureMap, pts: DrivingPointSet,
                       region: SearchRegion) -> DisplacementDistribution:
    """mu[p, k] = cos(desc[p], feat_moving(p + delta_k)), clamped trilinear sampling."""
    desc = ad.as_tensor(desc)
    if desc.ndim != 2 or desc.shape[1] != feat_moving.dim:
        raise ValueError(
            f"descriptor shape {desc.shape} does not match feature dimension {feat_moving.dim}"
        )
    P = desc.shape[0]
    if P != len(pts):
        raise ValueError(f"{P} descriptors for {len(pts)} driving points")
    deltas = region.displacements()
    K = len(deltas)
    points = pts.points if isinstance(pts.points, ad.Tensor) else ad.Tensor(pts.coords)
    cand_pts = ad.add(ad.reshape(points, (P, 1, 3)), deltas[None])
    sampled = ad.grid_sample(feat_moving.values, ad.reshape(cand_pts, (P * K, 3)))
    mu = cosine_potentials(desc, ad.reshape(sampled, (P, K, feat_moving.dim)))
    return DisplacementDistribution(mu, pts.coords, region)
