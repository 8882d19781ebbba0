"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor.  ``tape.backward(loss)`` walks the record in reverse and returns the
adjoint of every tracked tensor.  Untracked tensors (and plain arrays) are
constants and may be mixed freely with tracked ones.

Example
-------
>>> tape = Tape()
>>> x = tape.variable(np.array([1.0, 2.0]))
>>> loss = sum_(x * x)
>>> tape.backward(loss)[x]
array([2., 4.])
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import trilinear_backward, trilinear_forward


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class Tensor:
    """Dense float64 array, optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "tape", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class _Record:
    out: int
    inputs: tuple
    backward: object


class Tape:
    """Ordered record of tracked operations.

    Node ids increase monotonically, so inputs always precede outputs and a
    single reverse sweep visits every node once.
    """

    def __init__(self):
        self._tensors: list[Tensor] = []
        self._records: list[_Record] = []

    def __len__(self):
        return len(self._records)

    def _new_node(self, data, name=None) -> Tensor:
        t = Tensor(data, tape=self, node=len(self._tensors), name=name)
        self._tensors.append(t)
        return t

    def variable(self, data, name=None) -> Tensor:
        """Create a tracked leaf tensor."""
        arr = np.array(data, dtype=np.float64, copy=True)
        return self._new_node(arr, name)

    def record(self, out: np.ndarray, inputs, backward) -> Tensor:
        t = self._new_node(out)
        ids = tuple(x.node if isinstance(x, Tensor) and x.tape is self else None for x in inputs)
        self._records.append(_Record(t.node, ids, backward))
        return t

    def backward(self, loss: Tensor) -> dict:
        """Return ``{tensor: gradient}`` for every tensor tracked on this tape."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not tracked by this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * len(self._tensors)
        grads[loss.node] = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g = grads[rec.out]
            if g is None:
                continue
            in_grads = rec.backward(g)
            for node, gi in zip(rec.inputs, in_grads):
                if node is None or gi is None:
                    continue
                grads[node] = gi if grads[node] is None else grads[node] + gi
        return {
            t: (grads[t.node] if grads[t.node] is not None else np.zeros_like(t.data))
            for t in self._tensors
        }


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands are tracked on different tapes")
            tape = x.tape
    return tape


def _result(out, inputs, backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, backward)


def custom_op(out, inputs, backward) -> Tensor:
    """Record a user-defined op; ``backward(g)`` returns one gradient per input."""
    return _result(np.asarray(out, dtype=np.float64), tuple(inputs), backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _result(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant floor."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _result(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def clip(a, lo, hi) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, key) -> Tensor:
    """``a[key]`` for basic or integer-array indexing."""
    a = as_tensor(a)

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in keys)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _result(a.data[key], (a,), backward)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        s = list(x.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(s)) if i != axis % len(s)):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Softmax of ``a / temperature`` along ``axis``."""
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# volumetric ops; volumes are (channels, nx, ny, nz)


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv3d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation of ``x`` (cin, X, Y, Z) with ``w`` (cout, cin, k, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d: bias {b.shape} does not match kernel {w.shape}")
    cout, cin, kx, ky, kz = w.shape
    out_dims = [_conv_out(n, k, stride, padding) for n, k in zip(x.shape[1:], (kx, ky, kz))]
    if min(out_dims) < 1:
        raise ShapeError(f"conv3d: kernel {w.shape} larger than padded input {x.shape}")
    ox, oy, oz = out_dims
    xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3)

    def window(i, j, k):
        return (
            slice(None),
            slice(i, i + stride * (ox - 1) + 1, stride),
            slice(j, j + stride * (oy - 1) + 1, stride),
            slice(k, k + stride * (oz - 1) + 1, stride),
        )

    offsets = [(i, j, k) for i in range(kx) for j in range(ky) for k in range(kz)]
    out = np.zeros((cout, ox, oy, oz))
    for i, j, k in offsets:
        out += np.tensordot(w.data[:, :, i, j, k], xp[window(i, j, k)], axes=1)
    if b is not None:
        out += b.data[:, None, None, None]

    def backward(g):
        gx = np.zeros_like(xp) if x.tracked else None
        gw = np.zeros_like(w.data) if w.tracked else None
        for i, j, k in offsets:
            if gx is not None:
                gx[window(i, j, k)] += np.tensordot(w.data[:, :, i, j, k].T, g, axes=1)
            if gw is not None:
                gw[:, :, i, j, k] = np.tensordot(g, xp[window(i, j, k)], axes=([1, 2, 3], [1, 2, 3]))
        if gx is not None and padding:
            gx = gx[:, padding:-padding, padding:-padding, padding:-padding]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(1, 2, 3)),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, backward)


def avg_pool3d(x, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing voxels that do not fill a cell are dropped."""
    x = as_tensor(x)
    c = x.shape[0]
    dims = [n // size for n in x.shape[1:]]
    if min(dims) < 1:
        raise ShapeError(f"avg_pool3d: input {x.shape} smaller than pool size {size}")
    crop = x.data[:, : dims[0] * size, : dims[1] * size, : dims[2] * size]
    blocks = crop.reshape(c, dims[0], size, dims[1], size, dims[2], size)
    out = blocks.mean(axis=(2, 4, 6))

    def backward(g):
        up = np.repeat(np.repeat(np.repeat(g, size, 1), size, 2), size, 3) / size**3
        full = np.zeros_like(x.data)
        full[:, : up.shape[1], : up.shape[2], : up.shape[3]] = up
        return (full,)

    return _result(out, (x,), backward)


def grid_sample(vol, points) -> Tensor:
    """Trilinear samples of ``vol`` (c, X, Y, Z) at ``points`` (N, 3) -> (N, c).

    Differentiable with respect to both the volume values and the points.
    """
    vol, points = as_tensor(vol), as_tensor(points)
    if vol.ndim != 4 or points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"grid_sample: volume {vol.shape}, points {points.shape}")
    out = trilinear_forward(vol.data, points.data)

    def backward(g):
        gv, gp = trilinear_backward(vol.data, points.data, g)
        return (gv if vol.tracked else None, gp if points.tracked else None)

    return _result(out, (vol, points), backward)


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParameterSet(dict):
    """Named parameter arrays with fixed shapes.

    Plain ``dict`` of ``name -> ndarray``; :meth:`track` puts every entry on
    a tape for one forward/backward pass.
    """

    def track(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.variable(value, name=name) for name, value in self.items()}

    def copy(self) -> ParameterSet:
        return ParameterSet({k: np.array(v, copy=True) for k, v in self.items()})


def init_conv(rng: np.random.Generator, cout: int, cin: int, k: int = 3):
    """Uniform init in +-1/sqrt(fan_in) for a conv kernel and its bias."""
    bound = 1.0 / np.sqrt(cin * k**3)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k, k))
    b = rng.uniform(-bound, bound, size=cout)
    return w, b


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterSet, grads: dict, state: AdamState | None = None,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are left untouched. Parameters absent from ``grads`` are treated
    as having zero gradient.
    """
    state = state or AdamState()
    t = state.step + 1
    new_params, m_new, v_new = ParameterSet(), {}, {}
    for name, value in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(value)), dtype=np.float64)
        if g.shape != value.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {value.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


# ---------------------------------------------------------------------------
# PRM1 checkpoints

PRM_MAGIC = b"PRM1"


class CheckpointError(ValueError):
    pass


def save_params(params: ParameterSet, path) -> None:
    chunks = [PRM_MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ParameterSet:
    raw = Path(path).read_bytes()
    if raw[:4] != PRM_MAGIC:
        raise CheckpointError(f"{path}: expected magic {PRM_MAGIC!r}, found {raw[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        pos = 8
        params = ParameterSet()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2: pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape)) * 8
            if pos + size > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return params
