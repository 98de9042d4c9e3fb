"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and records the operations applied to it; calling
`backward()` on a scalar walks the tape in reverse topological order and
accumulates gradients.  Only the operations the networks in this package need
are implemented.  All heavy arithmetic is delegated to BLAS through numpy, so
results are identical whether or not gradients are being recorded.

Convolutions use channels-last (NHWC / NDHWC) layout: the im2col buffer is
then built from contiguous slice copies, which is what makes single-core CPU
training viable at desk scale.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- plumbing ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def texp(a: Tensor) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / data))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the smooth activation used throughout the networks."""
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def backward(g):
        a._accumulate(g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(data, (a,), backward)


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    data = a.data * a.data

    def backward(g):
        a._accumulate(g * (2.0 * a.data))

    return _make(data, (a,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice-based) indexing with gradient scatter."""
    a = _wrap(a)
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a._accumulate(full)

    return _make(data, (a,), backward)


def pad(a: Tensor, pad_width) -> Tensor:
    a = _wrap(a)
    data = np.pad(a.data, pad_width)

    def backward(g):
        idx = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(pad_width))
        a._accumulate(g[idx])

    return _make(data, (a,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        gg = g / count
        if axis is None:
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), backward)


# -- softmax family -------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate((g - dot) * data)

    return _make(data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(np.log(s) + m, axis=axis)
    soft = e / s

    def backward(g):
        a._accumulate(np.expand_dims(g, axis) * soft)

    return _make(data, (a,), backward)


# -- gathers -------------------------------------------------------------------


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup `table[idx]` (embedding); idx is a constant int array."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return _make(data, (table,), backward)


def select_columns(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick `a[i, idx[i]]` per row of a 2D tensor."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        a._accumulate(full)

    return _make(data, (a,), backward)


# -- convolutions (channels-last) -----------------------------------------------


def _conv_geometry(sizes, ksizes, stride, padding):
    return tuple((s + 2 * padding - k) // stride + 1 for s, k in zip(sizes, ksizes))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """2D convolution, x: (N,H,W,C), w: (kh,kw,C,O) -> (N,Ho,Wo,O)."""
    x, w = _wrap(x), _wrap(w)
    N, H, W, C = x.data.shape
    kh, kw, Cw, O = w.data.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Ho, Wo = _conv_geometry((H, W), (kh, kw), stride, padding)
    cols = np.empty((N, Ho, Wo, kh * kw, C), dtype=x.data.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, k, :] = xp[:, i : i + Ho * stride : stride, j : j + Wo * stride : stride, :]
            k += 1
    cm = cols.reshape(N * Ho * Wo, kh * kw * C)
    out = cm @ w.data.reshape(kh * kw * C, O)
    out = out.reshape(N, Ho, Wo, O)
    if b is not None:
        b = _wrap(b)
        out = out + b.data

    keep_cols = _GRAD_ENABLED and (x.requires_grad or w.requires_grad)
    cm_saved = cm if keep_cols else None

    def backward(g):
        gm = g.reshape(-1, O)
        if w.requires_grad:
            w._accumulate((cm_saved.T @ gm).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dcols = (gm @ w.data.reshape(-1, O).T).reshape(N, Ho, Wo, kh * kw, C)
            dxp = np.zeros((N, H + 2 * padding, W + 2 * padding, C), dtype=g.dtype)
            kk = 0
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + Ho * stride : stride, j : j + Wo * stride : stride, :] += dcols[:, :, :, kk, :]
                    kk += 1
            x._accumulate(dxp[:, padding : padding + H, padding : padding + W, :] if padding else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """3D convolution, x: (N,D,H,W,C), w: (kd,kh,kw,C,O) -> (N,Do,Ho,Wo,O)."""
    x, w = _wrap(x), _wrap(w)
    N, D, H, W, C = x.data.shape
    kd, kh, kw, Cw, O = w.data.shape
    if Cw != C:
        raise ValueError(f"conv3d channel mismatch: input {C}, weight {Cw}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x.data
    Do, Ho, Wo = _conv_geometry((D, H, W), (kd, kh, kw), stride, p)
    cols = np.empty((N, Do, Ho, Wo, kd * kh * kw, C), dtype=x.data.dtype)
    k = 0
    for d in range(kd):
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, :, k, :] = xp[
                    :, d : d + Do * stride : stride, i : i + Ho * stride : stride, j : j + Wo * stride : stride, :
                ]
                k += 1
    cm = cols.reshape(N * Do * Ho * Wo, kd * kh * kw * C)
    out = (cm @ w.data.reshape(-1, O)).reshape(N, Do, Ho, Wo, O)
    if b is not None:
        b = _wrap(b)
        out = out + b.data

    keep_cols = _GRAD_ENABLED and (x.requires_grad or w.requires_grad)
    cm_saved = cm if keep_cols else None

    def backward(g):
        gm = g.reshape(-1, O)
        if w.requires_grad:
            w._accumulate((cm_saved.T @ gm).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2, 3)))
        if x.requires_grad:
            dcols = (gm @ w.data.reshape(-1, O).T).reshape(N, Do, Ho, Wo, kd * kh * kw, C)
            dxp = np.zeros((N, D + 2 * p, H + 2 * p, W + 2 * p, C), dtype=g.dtype)
            kk = 0
            for d in range(kd):
                for i in range(kh):
                    for j in range(kw):
                        dxp[
                            :, d : d + Do * stride : stride, i : i + Ho * stride : stride, j : j + Wo * stride : stride, :
                        ] += dcols[:, :, :, :, kk, :]
                        kk += 1
            x._accumulate(dxp[:, p : p + D, p : p + H, p : p + W, :] if p else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of every spatial axis (channels-last)."""
    x = _wrap(x)
    spatial = tuple(range(1, x.data.ndim - 1))
    data = x.data
    for ax in spatial:
        data = np.repeat(data, factor, axis=ax)

    def backward(g):
        gg = g
        for ax in spatial:
            n = x.data.shape[ax]
            shape = gg.shape[:ax] + (n, factor) + gg.shape[ax + 1 :]
            gg = gg.reshape(shape).sum(axis=ax + 1)
        x._accumulate(gg)

    return _make(data, (x,), backward)
