"""Dense-tensor math with reverse-mode automatic differentiation.

A small tape: every op builds a `Tensor` holding its parents and a closure
that maps the incoming gradient to parent gradients. `backward()` walks the
graph in reverse topological order. Tensors are float64 in tests and float32
in training; reductions accumulate in float64 either way so loss curves stay
reproducible.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.float32, np.float64)


def derive_seed(*parts) -> int:
    """Stable 64-bit stream seed from arbitrary labelled parts."""
    h = hashlib.blake2s()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd
        self.needs_grad = requires_grad or any(p.needs_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.needs_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._bwd is None:
                continue
            for p, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not p.needs_grad:
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # Convenience arithmetic so model code stays readable.
    def __add__(self, other):
        return add(self, as_tensor(other, dtype=self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other, dtype=self.dtype))

    def __mul__(self, other):
        return mul(self, as_tensor(other, dtype=self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None, requires_grad=False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape_error(op, a, b):
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a, b) from None
    return Tensor(
        out,
        _parents=(a, b),
        _bwd=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a, b) from None
    return Tensor(
        out,
        _parents=(a, b),
        _bwd=lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a, b) from None
    return Tensor(
        out,
        _parents=(a, b),
        _bwd=lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor(a.data * s, _parents=(a,), _bwd=lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise _shape_error("matmul", a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a, b) from None

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return Tensor(out, _parents=(a, b), _bwd=bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        perm = list(range(a.data.ndim))
        perm[-2], perm[-1] = perm[-1], perm[-2]
    else:
        perm = list(axes)
    inv = np.argsort(perm)
    return Tensor(
        a.data.transpose(perm), _parents=(a,), _bwd=lambda g: (g.transpose(inv),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(
        a.data.reshape(shape), _parents=(a,), _bwd=lambda g: (g.reshape(a.data.shape),)
    )


def concat(tensors, axis=0) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(
        out,
        _parents=tuple(ts),
        _bwd=lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bwd(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return Tensor(out, _parents=(a,), _bwd=bwd)


def take(a: Tensor, indices, axis=0) -> Tensor:
    """Row/entry gather along one axis; also serves as embedding lookup."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(np.moveaxis(z, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (z,)

    return Tensor(out, _parents=(a,), _bwd=bwd)


embedding_lookup = take


def where_mask(mask, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant boolean mask (not differentiated)."""
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)
    return Tensor(
        out,
        _parents=(a, b),
        _bwd=lambda g: (
            _unbroadcast(np.where(m, g, 0.0), a.data.shape),
            _unbroadcast(np.where(m, 0.0, g), b.data.shape),
        ),
    )


def abs_(a: Tensor) -> Tensor:
    return Tensor(np.abs(a.data), _parents=(a,), _bwd=lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# Reductions (float64 accumulation even in float32 mode)


def _restore_axes(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    return Tensor(
        out,
        _parents=(a,),
        _bwd=lambda g: (_restore_axes(g, a.data.shape, axis, keepdims).astype(a.data.dtype),),
    )


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )

    def bwd(g):
        return (
            (_restore_axes(g, a.data.shape, axis, keepdims) / count).astype(a.data.dtype),
        )

    return Tensor(out, _parents=(a,), _bwd=bwd)


mean_pool = mean_


def max_(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max pooling along one axis; ties route gradient to the first index."""
    am = np.argmax(a.data, axis=axis)
    out_keep = np.take_along_axis(a.data, np.expand_dims(am, axis), axis=axis)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(am, axis), gk, axis=axis)
        return (z,)

    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    return Tensor(out, _parents=(a,), _bwd=bwd)


max_pool = max_


# ---------------------------------------------------------------------------
# Neural-net ops


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(a.data.dtype)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True, dtype=np.float64).astype(a.data.dtype)
        return (s * (g - inner),)

    return Tensor(s, _parents=(a,), _bwd=bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply elementwise gain and bias."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.data.dtype)
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        inner1 = dxhat.sum(axis=-1, keepdims=True, dtype=np.float64)
        inner2 = (dxhat * xhat).sum(axis=-1, keepdims=True, dtype=np.float64)
        dx = (inv * (dxhat - inner1 / d - xhat * inner2 / d)).astype(x.data.dtype)
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red, dtype=np.float64).astype(gain.data.dtype)
        dbias = g.sum(axis=red, dtype=np.float64).astype(bias.data.dtype)
        return dx, _unbroadcast(dgain, gain.data.shape), _unbroadcast(dbias, bias.data.shape)

    return Tensor(out, _parents=(x, gain, bias), _bwd=bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.data.dtype)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.data.dtype),)

    return Tensor(out, _parents=(x,), _bwd=bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# Parameters and initialization


class Parameter:
    """Named trainable tensor with a recorded initializer spec."""

    __slots__ = ("name", "tensor", "init")

    def __init__(self, name: str, value: np.ndarray, init: str, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(value, requires_grad=trainable)
        self.init = init

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) with redraws beyond two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(f, inputs, eps: float = 1e-4) -> float:
    """Max elementwise relative error between autodiff and central differences.

    `f` must return a scalar Tensor; `inputs` are the Tensors to perturb
    (their data is modified in place and restored).
    """
    tensors = list(inputs)
    for t in tensors:
        t.requires_grad = True
        t.needs_grad = True
        t.grad = None
    out = f(*tensors)
    out.backward()
    worst = 0.0
    for t in tensors:
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*tensors).data)
            flat[i] = orig - eps
            f_minus = float(f(*tensors).data)
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * eps)
        fd = fd.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-6)
        worst = max(worst, float((np.abs(ad - fd) / denom).max()))
    return worst


# ---------------------------------------------------------------------------
# Checkpoint archive: versioned header, then (name, shape, raw floats) records

_CKPT_MAGIC = b"ABMCKPT1"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_CODE_DTYPES = {0: "<f8", 1: "<f4"}


def save_checkpoint(named_arrays: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint archive")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = np.dtype(_CODE_DTYPES[code])
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
            out[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
    return out
