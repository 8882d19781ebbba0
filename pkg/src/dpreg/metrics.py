"""Similarity/regularity losses and evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .volume import LabelVolume, Volume


@dataclass(frozen=True)
class LnccConfig:
    radius: int = 1
    eps: float = 1e-8

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("LNCC radius must be >= 1")


def _values(x):
    if isinstance(x, Volume):
        return ad.Tensor(x.data)
    return ad.as_tensor(x)


def interior_count(dims, radius: int) -> int:
    return int(np.prod([max(n - 2 * radius, 0) for n in dims]))


def lncc(i1, i2, cfg: LnccConfig | None = None) -> ad.Tensor:
    """Sum over interior voxels of the local normalised cross-correlation.

    Inputs are single-channel volumes or (1, X, Y, Z) tensors.  Patch means
    are box averages over the (2r+1)^3 cube; the variance product is floored
    at ``eps`` so flat patches contribute ~0.
    """
    cfg = cfg or LnccConfig()
    a, b = _values(i1), _values(i2)
    if a.shape != b.shape:
        raise ValueError(f"lncc: shapes {a.shape} and {b.shape} differ")
    if a.shape[0] != 1:
        raise ValueError(f"lncc expects single-channel images, got {a.shape[0]} channels")
    if interior_count(a.shape[1:], cfg.radius) == 0:
        raise ValueError(f"lncc: image {a.shape[1:]} has no interior voxel for radius {cfg.radius}")
    k = 2 * cfg.radius + 1
    n = float(k**3)
    box = np.ones((1, 1, k, k, k))

    def boxsum(x):
        return ad.conv3d(x, box)

    s1, s2 = boxsum(a), boxsum(b)
    s11, s22, s12 = boxsum(ad.mul(a, a)), boxsum(ad.mul(b, b)), boxsum(ad.mul(a, b))
    cross = ad.sub(s12, ad.scalar_mul(ad.mul(s1, s2), 1.0 / n))
    var1 = ad.sub(s11, ad.scalar_mul(ad.mul(s1, s1), 1.0 / n))
    var2 = ad.sub(s22, ad.scalar_mul(ad.mul(s2, s2), 1.0 / n))
    denom = ad.sqrt(ad.maximum(ad.mul(var1, var2), cfg.eps))
    return ad.sum_(ad.div(cross, denom))


def bending_energy(field) -> ad.Tensor:
    """Sum of squared second forward differences over all 9 axis pairs.

    Sites are voxels p with p + 2 e_i inside the grid for every axis.
    """
    f = _values(field)
    if f.shape[0] != 3:
        raise ValueError(f"bending_energy expects a 3-channel field, got {f.shape[0]}")
    nx, ny, nz = f.shape[1:]
    if min(nx, ny, nz) < 3:
        return ad.scalar_mul(ad.sum_(f), 0.0)
    site = (nx - 2, ny - 2, nz - 2)

    def block(off):
        return ad.index(f, (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, site)))

    e = np.eye(3, dtype=int)
    total = None
    for i in range(3):
        for j in range(3):
            d = ad.add(ad.sub(block(e[i] + e[j]), block(e[i])), ad.sub(block(np.zeros(3, int)), block(e[j])))
            term = ad.sum_(ad.mul(d, d))
            total = term if total is None else ad.add(total, term)
    return total


def bending_site_count(dims) -> int:
    return int(np.prod([max(n - 2, 0) for n in dims]))


def hessian_norm_mean(field) -> float:
    f = _values(field)
    sites = bending_site_count(f.shape[1:])
    if sites == 0:
        return 0.0
    return float(bending_energy(f).data) / sites


def jacobian_determinants(field) -> np.ndarray:
    """det(I + grad psi) by central differences on interior voxels."""
    f = np.asarray(getattr(field, "data", field), dtype=np.float64)
    J = np.zeros(tuple(n - 2 for n in f.shape[1:]) + (3, 3))
    for j in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[j] = slice(0, -2)
        hi[j] = slice(2, None)
        for i in range(3):
            J[..., i, j] = (f[i][tuple(hi)] - f[i][tuple(lo)]) / 2.0
    J += np.eye(3)
    return np.linalg.det(J)


def std_log_jacobian(field) -> tuple[float, float]:
    """Population std of log det over positive-determinant sites, and the non-positive fraction."""
    det = jacobian_determinants(field).ravel()
    if det.size == 0:
        raise ValueError("field too small for central differences")
    pos = det > 0
    if not pos.any():
        raise ValueError("every Jacobian determinant is non-positive")
    return float(np.log(det[pos]).std()), float(1.0 - pos.mean())


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    if a.dims != b.dims:
        raise ValueError(f"dice: dims {a.dims} and {b.dims} differ")
    A = a.data == label
    B = b.data == label
    total = A.sum() + B.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(A, B).sum() / total)


def w2_pointsets(a, b) -> float:
    """Exact W2 between equal-size point sets via optimal assignment."""
    A = np.asarray(getattr(a, "coords", a), dtype=np.float64).reshape(-1, 3)
    B = np.asarray(getattr(b, "coords", b), dtype=np.float64).reshape(-1, 3)
    if len(A) != len(B):
        raise ValueError(f"w2_pointsets: sizes {len(A)} and {len(B)} differ")
    if len(A) == 0:
        return 0.0
    cost = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / len(A)))


@dataclass
class MetricsReport:
    dice_per_label: dict = field(default_factory=dict)
    dice_mean: float = float("nan")
    hessian_mean: float = 0.0
    std_log_jacobian: float = 0.0
    nonpositive_jacobian_fraction: float = 0.0
    w2: list | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["dice_per_label"] = {str(k): v for k, v in self.dice_per_label.items()}
        return json.dumps(d, indent=2, sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        d = json.loads(text)
        d["dice_per_label"] = {int(k): v for k, v in d["dice_per_label"].items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> MetricsReport:
        return cls.from_json(Path(path).read_text())


def evaluate(fixed_labels: LabelVolume, warped_labels: LabelVolume, field) -> MetricsReport:
    """Dice per fixed-image structure plus regularity of ``field``."""
    labels = sorted(set(fixed_labels.labels) | set(warped_labels.labels))
    per = {lab: dice(fixed_labels, warped_labels, lab) for lab in labels}
    std, frac = std_log_jacobian(field)
    return MetricsReport(
        dice_per_label=per,
        dice_mean=float(np.mean(list(per.values()))) if per else 1.0,
        hessian_mean=hessian_norm_mean(field),
        std_log_jacobian=std,
        nonpositive_jacobian_fraction=frac,
    )
