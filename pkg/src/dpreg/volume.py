"""Volumes, displacement fields, trilinear sampling, warping and VOL3/LAB3 I/O.

Arrays are stored channel-first and indexed ``data[c, x, y, z]``; all
coordinates are voxel units in ``(x, y, z)`` order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOL3_MAGIC = b"VOL3"
LAB3_MAGIC = b"LAB3"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s5I")


class VolumeFormatError(ValueError):
    """Raised when a VOL3/LAB3 file cannot be decoded."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class SizeMismatchError(VolumeFormatError):
    pass


@dataclass(frozen=True)
class Volume:
    """A 3D grid with ``c`` channels, ``data`` shaped ``(c, nx, ny, nz)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be (c, nx, ny, nz), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def displacement_field(data) -> Volume:
    """Wrap a ``(3, nx, ny, nz)`` array as a dense displacement field."""
    vol = Volume(data)
    if vol.channels != 3:
        raise ValueError(f"displacement field needs 3 channels, got {vol.channels}")
    return vol


@dataclass(frozen=True)
class LabelVolume:
    """Integer label map shaped ``(nx, ny, nz)``; 0 is background."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise ValueError("labels must lie in [0, 65535]")
        arr = np.array(arr, dtype=np.int64, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]


# ---------------------------------------------------------------------------
# trilinear sampling


def _corner_setup(dims, points):
    """Clamp points and return lower corner indices, fractions and clamp masks."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    clamped = np.clip(pts, 0.0, hi)
    inside = (pts >= 0.0) & (pts <= hi)
    base = np.floor(clamped)
    # keep base + 1 in range so a point on the last plane gets weight 1 on it
    base = np.minimum(base, np.maximum(hi - 1.0, 0.0))
    frac = clamped - base
    return base.astype(np.int64), frac, inside


def _flat_indices(dims, base):
    nx, ny, nz = dims
    ix0, iy0, iz0 = base.T
    ix1 = np.minimum(ix0 + 1, nx - 1)
    iy1 = np.minimum(iy0 + 1, ny - 1)
    iz1 = np.minimum(iz0 + 1, nz - 1)
    xs, ys, zs = (ix0, ix1), (iy0, iy1), (iz0, iz1)
    idx = []
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                idx.append((xs[a] * ny + ys[b]) * nz + zs[c])
    return idx


def _corner_weights(frac):
    fx, fy, fz = frac.T
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    return [wx[a] * wy[b] * wz[c] for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def trilinear_forward(data: np.ndarray, points) -> np.ndarray:
    """Sample ``data`` (c, nx, ny, nz) at ``points`` (N, 3); returns (N, c)."""
    c = data.shape[0]
    dims = data.shape[1:]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, c))
    base, frac, _ = _corner_setup(dims, pts)
    flat = data.reshape(c, -1)
    out = np.zeros((len(pts), c))
    for idx, w in zip(_flat_indices(dims, base), _corner_weights(frac)):
        out += flat[:, idx].T * w[:, None]
    return out


def trilinear_backward(data: np.ndarray, points, grad_out: np.ndarray):
    """Adjoints of :func:`trilinear_forward` w.r.t. the volume and the points.

    Coordinates outside the volume are clamped, so their gradient is zero
    along the clamped axis.
    """
    c = data.shape[0]
    dims = data.shape[1:]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_vox = int(np.prod(dims))
    grad_data = np.zeros((c, n_vox))
    grad_pts = np.zeros((len(pts), 3))
    if len(pts) == 0:
        return grad_data.reshape(data.shape), grad_pts
    base, frac, inside = _corner_setup(dims, pts)
    flat = data.reshape(c, -1)
    idxs = _flat_indices(dims, base)
    weights = _corner_weights(frac)
    for idx, w in zip(idxs, weights):
        for ch in range(c):
            grad_data[ch] += np.bincount(idx, weights=grad_out[:, ch] * w, minlength=n_vox)

    fx, fy, fz = frac.T
    one = ((1.0 - fx, fx), (1.0 - fy, fy), (1.0 - fz, fz))
    dsign = (-1.0, 1.0)
    k = 0
    for a in (0, 1):
        for b in (0, 1):
            for cc in (0, 1):
                # d(value)/d(coord) contribution of this corner, per axis
                v = (flat[:, idxs[k]].T * grad_out).sum(axis=1)
                grad_pts[:, 0] += v * dsign[a] * one[1][b] * one[2][cc]
                grad_pts[:, 1] += v * one[0][a] * dsign[b] * one[2][cc]
                grad_pts[:, 2] += v * one[0][a] * one[1][b] * dsign[cc]
                k += 1
    # singleton axes have no extent to move along
    flat_axes = np.asarray(dims) == 1
    grad_pts[:, flat_axes] = 0.0
    grad_pts *= inside
    return grad_data.reshape(data.shape), grad_pts


def sample_trilinear(vol: Volume, points) -> np.ndarray:
    """Sample ``vol`` at voxel-space ``points`` with border clamping.

    Returns an array of shape ``(N, channels)``; an empty point list gives an
    empty ``(0, channels)`` result.
    """
    return trilinear_forward(vol.data, points)


def identity_grid(dims) -> np.ndarray:
    """Voxel coordinates of every voxel as (N, 3), C-order over (x, y, z)."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def warp(moving: Volume, field: Volume) -> Volume:
    """Resample ``moving`` at ``p + field(p)`` for every voxel ``p``."""
    if field.dims != moving.dims:
        raise ValueError(
            f"field dims {field.dims} do not match moving dims {moving.dims}"
        )
    if field.channels != 3:
        raise ValueError(f"displacement field needs 3 channels, got {field.channels}")
    pts = identity_grid(moving.dims) + field.data.reshape(3, -1).T
    out = trilinear_forward(moving.data, pts)
    return Volume(out.T.reshape((moving.channels,) + moving.dims))


def warp_labels(labels: LabelVolume, field: Volume) -> LabelVolume:
    """Nearest-neighbour warp of a label map (labels are categorical)."""
    if field.dims != labels.dims:
        raise ValueError(
            f"field dims {field.dims} do not match label dims {labels.dims}"
        )
    dims = labels.dims
    pts = identity_grid(dims) + field.data.reshape(3, -1).T
    idx = np.rint(np.clip(pts, 0, np.asarray(dims) - 1)).astype(np.int64)
    return LabelVolume(labels.data[idx[:, 0], idx[:, 1], idx[:, 2]].reshape(dims))


# ---------------------------------------------------------------------------
# file I/O


def _write(path, magic, dims, channels, payload: bytes):
    header = _HEADER.pack(magic, FORMAT_VERSION, *dims, channels)
    Path(path).write_bytes(header + payload)


def _read(path, magic, itemsize):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    got, version, nx, ny, nz, channels = _HEADER.unpack_from(raw)
    if got != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {got!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if min(nx, ny, nz, channels) < 1:
        raise VolumeFormatError(f"{path}: non-positive dimension in header")
    payload = raw[_HEADER.size:]
    expected = nx * ny * nz * channels * itemsize
    if len(payload) % itemsize:
        raise TruncatedPayloadError(f"{path}: payload ends mid-value")
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{path}: header declares {nx}x{ny}x{nz}x{channels} values "
            f"but payload holds {len(payload) // itemsize}"
        )
    return (nx, ny, nz), channels, payload


def write_vol3(vol: Volume, path) -> None:
    # file order is x-fastest, channel-slowest: C-order of data[c, z, y, x]
    values = np.ascontiguousarray(vol.data.transpose(0, 3, 2, 1), dtype="<f4")
    _write(path, VOL3_MAGIC, vol.dims, vol.channels, values.tobytes())


def read_vol3(path) -> Volume:
    (nx, ny, nz), channels, payload = _read(path, VOL3_MAGIC, 4)
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Volume(values.reshape(channels, nz, ny, nx).transpose(0, 3, 2, 1))


def write_lab3(labels: LabelVolume, path) -> None:
    values = np.ascontiguousarray(labels.data.transpose(2, 1, 0), dtype="<u2")
    _write(path, LAB3_MAGIC, labels.dims, 1, values.tobytes())


def read_lab3(path) -> LabelVolume:
    (nx, ny, nz), channels, payload = _read(path, LAB3_MAGIC, 2)
    if channels != 1:
        raise VolumeFormatError(f"{path}: label volumes have one channel, header says {channels}")
    values = np.frombuffer(payload, dtype="<u2").astype(np.int64)
    return LabelVolume(values.reshape(nz, ny, nx).transpose(2, 1, 0))
