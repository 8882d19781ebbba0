"""Synthetic ellipsoid phantoms with smooth ground-truth deformations."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import jacobian_determinants
from .volume import (
    LabelVolume,
    Volume,
    read_lab3,
    read_vol3,
    warp,
    warp_labels,
    write_lab3,
    write_vol3,
)

MAX_RESAMPLES = 100


class RejectionLimitError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    dims: tuple = (32, 32, 32)
    organs: int = 4
    radius_range: tuple = (5.0, 9.0)
    smoothness: float = 8.0      # sigma_d of the Gaussian-smoothed noise field
    magnitude: float = 6.0       # a_d, max |displacement component| in voxels
    texture: float = 0.15        # amplitude of smooth in-body intensity texture
    noise: float = 0.02
    moving_per_fixed: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        for key in ("dims", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticPair:
    fixed: Volume
    moving: Volume
    fixed_labels: LabelVolume
    moving_labels: LabelVolume
    field: Volume
    fixed_id: int = 0


def make_phantom(spec: SyntheticSpec, rng: np.random.Generator):
    """Body ellipsoid with ``spec.organs`` labelled ellipsoids inside it."""
    dims = np.asarray(spec.dims)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    center = (dims - 1) / 2.0
    body_r = 0.45 * dims
    body = (((grid - center[:, None, None, None]) / body_r[:, None, None, None]) ** 2).sum(0) <= 1.0
    img = np.where(body, 0.25, 0.0)
    labels = np.zeros(tuple(dims), dtype=np.int64)
    levels = np.linspace(0.45, 1.0, spec.organs)
    rng.shuffle(levels)
    lo, hi = spec.radius_range
    for k in range(spec.organs):
        radii = rng.uniform(lo, hi, size=3)
        c = center + rng.uniform(-1, 1, size=3) * np.maximum(body_r - radii, 0) * 0.6
        inside = (((grid - c[:, None, None, None]) / radii[:, None, None, None]) ** 2).sum(0) <= 1.0
        inside &= body
        img[inside] = levels[k]
        labels[inside] = k + 1
    texture = ndimage.gaussian_filter(rng.standard_normal(img.shape), 1.5)
    img = img + spec.texture * body * texture / np.abs(texture).max()
    img = ndimage.gaussian_filter(img, 0.7)
    img += spec.noise * rng.standard_normal(img.shape)
    return Volume(img), LabelVolume(labels)


def random_field(spec: SyntheticSpec, rng: np.random.Generator) -> Volume:
    """Smooth random displacement with a positive Jacobian everywhere."""
    dims = tuple(spec.dims)
    if spec.magnitude == 0:
        return Volume(np.zeros((3,) + dims))
    for _ in range(MAX_RESAMPLES):
        noise = rng.standard_normal((3,) + dims)
        f = np.stack([ndimage.gaussian_filter(noise[i], spec.smoothness, mode="wrap") for i in range(3)])
        f *= spec.magnitude / np.abs(f).max()
        if np.all(jacobian_determinants(f) > 0):
            return Volume(f)
    raise RejectionLimitError(
        f"no Jacobian-positive field after {MAX_RESAMPLES} draws; try a smaller magnitude than {spec.magnitude}"
    )


def synth_generate(spec: SyntheticSpec, count: int) -> list[SyntheticPair]:
    """``count`` pairs where ``moving = warp(fixed, field)``; deterministic per seed.

    Consecutive groups of ``spec.moving_per_fixed`` pairs share one fixed image.
    """
    rng = np.random.default_rng(spec.seed)
    pairs: list[SyntheticPair] = []
    fixed_id = -1
    for i in range(count):
        if i % spec.moving_per_fixed == 0:
            fixed_id += 1
            fixed, labels = make_phantom(spec, rng)
        f = random_field(spec, rng)
        pairs.append(SyntheticPair(fixed, warp(fixed, f), labels, warp_labels(labels, f), f, fixed_id))
    return pairs


PAIR_FILES = ("fixed.vol3", "moving.vol3", "fixed.lab3", "moving.lab3", "gt_field.vol3")


def write_dataset(pairs, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        d = out / f"pair{i:03d}"
        d.mkdir(exist_ok=True)
        write_vol3(p.fixed, d / "fixed.vol3")
        write_vol3(p.moving, d / "moving.vol3")
        write_lab3(p.fixed_labels, d / "fixed.lab3")
        write_lab3(p.moving_labels, d / "moving.lab3")
        write_vol3(p.field, d / "gt_field.vol3")


def read_dataset(root) -> list[SyntheticPair]:
    """Load every ``pairNNN`` directory; pairs with identical fixed images share a ``fixed_id``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a dataset directory")
    pairs, seen = [], {}
    for d in sorted(root.glob("pair[0-9][0-9][0-9]")):
        fixed = read_vol3(d / "fixed.vol3")
        key = fixed.data.tobytes()
        fid = seen.setdefault(key, len(seen))
        pairs.append(SyntheticPair(
            fixed,
            read_vol3(d / "moving.vol3"),
            read_lab3(d / "fixed.lab3"),
            read_lab3(d / "moving.lab3"),
            read_vol3(d / "gt_field.vol3"),
            fid,
        ))
    return pairs
