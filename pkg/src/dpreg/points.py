"""Driving point sets: regular-grid and Foerstner keypoint selectors, CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import Volume

PROVENANCES = ("grid", "foerstner", "predicted")


@dataclass(frozen=True)
class RestGrid:
    origin: tuple
    spacing: int
    dims: tuple

    @property
    def count(self) -> int:
        return int(np.prod(self.dims))

    def vertices(self) -> np.ndarray:
        axes = [self.origin[a] + self.spacing * np.arange(self.dims[a], dtype=np.float64) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class DrivingPointSet:
    """Ordered (N, 3) voxel coordinates in the fixed image.

    ``points`` is a plain array, or a tape-tracked tensor when the set comes
    out of a training forward pass.
    """

    points: object
    provenance: str
    image_dims: tuple
    rest_grid: RestGrid | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        arr = self.coords
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {arr.shape}")
        hi = np.asarray(self.image_dims) - 1
        if np.any(arr < -1e-9) or np.any(arr > hi + 1e-9):
            raise ValueError("driving points must lie inside the image")

    @property
    def coords(self) -> np.ndarray:
        """Coordinates as a plain array, detached from any tape."""
        return np.asarray(getattr(self.points, "data", self.points), dtype=np.float64)

    def __len__(self):
        return len(self.coords)


def _axis_vertices(n: int, spacing: int, margin: int) -> np.ndarray:
    # the last vertex may sit at n - margin, but never past the last voxel
    limit = min(n - 1, n - margin)
    return np.arange(margin, limit + 1, spacing)


def grid_points(dims, spacing: int, margin: int = 0) -> DrivingPointSet:
    """Regular lattice ``margin + k * spacing`` along each axis."""
    if spacing < 1 or margin < 0:
        raise ValueError("need spacing >= 1 and margin >= 0")
    per_axis = [_axis_vertices(n, spacing, margin) for n in dims]
    if any(len(v) == 0 for v in per_axis):
        raise ValueError(f"no grid vertex fits dims {tuple(dims)} with spacing {spacing}, margin {margin}")
    rest = RestGrid((margin,) * 3, spacing, tuple(len(v) for v in per_axis))
    return DrivingPointSet(rest.vertices(), "grid", tuple(dims), rest)


def foerstner_score(img: Volume, sigma: float = 1.5) -> np.ndarray:
    """det(S) / trace(S) of the Gaussian-smoothed structure tensor."""
    if img.channels != 1:
        raise ValueError(f"foerstner_score expects a single-channel image, got {img.channels}")
    arr = img.data[0]
    grads = np.gradient(arr)
    S = np.empty(arr.shape + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            S[..., i, j] = ndimage.gaussian_filter(grads[i] * grads[j], sigma, mode="nearest")
            S[..., j, i] = S[..., i, j]
    det = np.linalg.det(S)
    tr = np.trace(S, axis1=-2, axis2=-1)
    score = np.zeros_like(arr)
    ok = tr >= 1e-12
    score[ok] = det[ok] / tr[ok]
    return score


def foerstner_points(img: Volume, sigma: float = 1.5, nms_radius: float = 8.0, count: int = 64,
                     spacing: int = 8, margin: int = 4) -> DrivingPointSet:
    """The ``count`` strongest Foerstner maxima, greedily spaced by ``nms_radius``.

    Only maxima inside the grid's margin box are eligible.  Missing points are
    filled with vertices of ``grid_points(dims, spacing, margin)``.
    """
    dims = img.dims
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > int(np.prod(dims)):
        raise ValueError(f"count {count} exceeds voxel count {int(np.prod(dims))}")
    score = foerstner_score(img, sigma)
    r = max(int(np.ceil(nms_radius)) - 1, 0)
    local_max = score == ndimage.maximum_filter(score, size=2 * r + 1, mode="nearest")
    # keypoints share the grid's margin so both selectors cover the same box
    box = np.zeros(dims, dtype=bool)
    box[tuple(slice(margin, min(n, n - margin + 1)) for n in dims)] = True
    cand = np.argwhere(local_max & (score > 0) & box)
    vals = score[tuple(cand.T)]
    # stable order: score descending, then lexicographic position
    order = np.lexsort((cand[:, 2], cand[:, 1], cand[:, 0], -vals))
    chosen: list[np.ndarray] = []
    for idx in order:
        p = cand[idx].astype(np.float64)
        if all(np.sum((p - q) ** 2) >= nms_radius**2 for q in chosen):
            chosen.append(p)
            if len(chosen) == count:
                break
    pts = np.array(chosen).reshape(-1, 3)
    if len(pts) < count:
        pad = grid_points(dims, spacing, margin).coords
        reps = int(np.ceil((count - len(pts)) / len(pad)))
        pts = np.vstack([pts, np.tile(pad, (reps, 1))[: count - len(pts)]])
    return DrivingPointSet(pts, "foerstner", tuple(dims))


def write_points_csv(pts: DrivingPointSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "z"])
        for x, y, z in pts.coords:
            writer.writerow([f"{x:.6f}", f"{y:.6f}", f"{z:.6f}"])


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "z"]:
            raise ValueError(f"{path}: expected header x,y,z, got {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def points_from_csv(path, provenance: str, image_dims) -> DrivingPointSet:
    return DrivingPointSet(read_points_csv(Path(path)), provenance, tuple(image_dims))
