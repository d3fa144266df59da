"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the closure that maps its output gradient onto its
parents. :meth:`Tensor.backward` walks the graph in reverse topological order.
Only the operations the encoder, decoder and losses need are provided; several
are fused (softmax, layer norm, conv, contrastive) for speed and stability.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """Raised when a non-finite value shows up in a forward or backward pass."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # ---- bookkeeping -------------------------------------------------
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
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                node.grad = None

    # ---- operator sugar ----------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _make(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    """Lift plain operands to Tensors, matching the dtype of the Tensor side."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# ---- elementwise ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: x._accum(g * out))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: x._accum(g / x.data))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: x._accum(g / (2.0 * out)))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: x._accum(2.0 * g * x.data))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: x._accum(g * (1.0 - out * out)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: x._accum(g * mask))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        x._accum(g * d)
    return _make(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: x._accum(g * out * (1.0 - out)))


# ---- reductions and shape ---------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))
    return _make(np.asarray(out, dtype=x.dtype), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: x._accum(g.transpose(inv)))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        x._accum(full)
    return _make(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            if x.requires_grad:
                x._accum(part)
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))
    return _make(a.data @ b.data, (a, b), bw)


# ---- fused layers -------------------------------------------------------

def _rowmean(a: np.ndarray) -> np.ndarray:
    """Mean over the last axis (keepdims) as a GEMV; much faster than ufunc.reduce for short rows."""
    n = a.shape[-1]
    return a @ np.full((n, 1), 1.0 / n, dtype=a.dtype)


def _colsum(a2: np.ndarray) -> np.ndarray:
    """Sum over the rows of a 2-D array."""
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis, with leading axes flattened for one GEMM."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accum(_colsum(g2))
    return _make(out.reshape(lead + (w.shape[1],)), parents, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = _rowmean(x.data)
    xc = x.data - mu
    var = _rowmean(xc * xc)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accum(_colsum((g * xhat).reshape(-1, n)))
        if beta.requires_grad:
            beta._accum(_colsum(g.reshape(-1, n)))
        if x.requires_grad:
            gx = g * gamma.data
            x._accum(inv * (gx - _rowmean(gx) - xhat * _rowmean(gx * xhat)))
    return _make(out, (x, gamma, beta), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor, kernel: int, stride: int) -> Tensor:
    """Channels-last strided convolution.

    x: (B, T, Cin); w: (kernel * Cin, Cout); output (B, ceil(T / stride), Cout).
    The input is zero-padded on the left so the frame count is ceil(T / stride).
    """
    bsz, t, cin = x.shape
    frames = -(-t // stride)
    need = (frames - 1) * stride + kernel
    pad = need - t
    if pad >= 0:
        xp = np.concatenate([np.zeros((bsz, pad, cin), dtype=x.dtype), x.data], axis=1) if pad else x.data
        crop = 0
    else:
        xp = x.data[:, -pad:]
        crop = -pad
    span = stride * (frames - 1) + 1
    cols = np.stack([xp[:, j:j + span:stride, :] for j in range(kernel)], axis=2)
    cols2 = cols.reshape(bsz * frames, kernel * cin)
    out = (cols2 @ w.data + b.data).reshape(bsz, frames, -1)

    def bw(g):
        g2 = g.reshape(bsz * frames, -1)
        if w.requires_grad:
            w._accum(cols2.T @ g2)
        if b.requires_grad:
            b._accum(_colsum(g2))
        if x.requires_grad:
            gcol = (g2 @ w.data.T).reshape(bsz, frames, kernel, cin)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for j in range(kernel):
                gxp[:, j:j + span:stride, :] += gcol[:, :, j, :]
            if pad >= 0:
                x._accum(gxp[:, pad:])
            else:
                full = np.zeros(x.shape, dtype=x.dtype)
                full[:, crop:] = gxp
                x._accum(full)
    return _make(out, (x, w, b), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows divided by max(norm, eps) along the last axis."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    den = np.maximum(norm, eps)
    out = x.data / den
    live = norm > eps

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        x._accum(np.where(live, (g - out * proj) / den, g / den))
    return _make(out, (x,), bw)


def moving_average(x: Tensor, w: int) -> Tensor:
    """Centred moving mean with shrinking edges along the last axis (odd ``w``)."""
    n = x.shape[-1]
    h = w // 2
    idx = np.arange(n)
    lo = np.maximum(idx - h, 0)
    hi = np.minimum(idx + h + 1, n)
    ln = (hi - lo).astype(x.dtype)
    c = np.zeros(x.shape[:-1] + (n + 1,), dtype=x.dtype)
    np.cumsum(x.data, axis=-1, out=c[..., 1:])
    out = (c[..., hi] - c[..., lo]) / ln
    # adjoint: input j receives g_i / len_i from every i whose window covers j
    a = np.searchsorted(lo, idx, side="right")
    bb = np.searchsorted(hi, idx, side="right")

    def bw(g):
        gc = np.zeros(g.shape[:-1] + (n + 1,), dtype=x.dtype)
        np.cumsum(g / ln, axis=-1, out=gc[..., 1:])
        x._accum(gc[..., a] - gc[..., bb])
    return _make(out, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return _make(out, (x,), lambda g: x._accum(g * 0.5 * (1.0 + np.tanh(0.5 * v))))


def _logsumexp_masked(s, mask):
    """Row-wise log(sum exp(s) over mask); -inf for empty rows."""
    neg_inf = np.full_like(s, -np.inf)
    sm = np.where(mask, s, neg_inf)
    m = sm.max(axis=1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    tot = np.where(mask, np.exp(s - safe), 0.0).sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        return np.where(tot > 0, np.log(tot) + safe, -np.inf)


def multi_positive_nce(scores: Tensor, pos: np.ndarray, neg: np.ndarray) -> tuple[Tensor, int]:
    """Mean over rows with positives of
    -1/|P| * sum_p log( e^{s_p} / (e^{s_p} + sum_n e^{s_n}) ).

    ``scores`` are already divided by the temperature. Returns the loss and the
    number of rows skipped for having no positives.
    """
    s = scores.data
    pos = np.asarray(pos, dtype=bool)
    neg = np.asarray(neg, dtype=bool)
    live = pos.any(axis=1)
    n_live = int(live.sum())
    skipped = int(pos.shape[0] - n_live)
    if n_live == 0:
        return _make(np.zeros((), dtype=s.dtype), (scores,), lambda g: None), skipped
    a = _logsumexp_masked(s, neg)  # (R, 1)
    d = np.logaddexp(s, a)  # log(e^{s_p} + sum_n e^{s_n}) for every column
    npos = np.maximum(pos.sum(axis=1, keepdims=True), 1)
    per_pair = np.where(pos, d - s, 0.0)
    rows = per_pair.sum(axis=1) / npos[:, 0]
    loss = rows[live].sum() / n_live

    def bw(g):
        coef = g / n_live
        w = np.where(live[:, None], coef / npos, 0.0)
        # d/ds_p: -(1 - e^{s_p - D_p}) ; d/ds_n: sum_p e^{s_n - D_p}
        sig = np.where(pos, np.exp(s - d), 0.0)
        gpos = np.where(pos, -(1.0 - sig), 0.0)
        fin = np.isfinite(a)
        a_safe = np.where(fin, a, 0.0)
        acc = np.where(pos, np.exp(np.where(pos, a_safe - d, -np.inf)), 0.0).sum(axis=1, keepdims=True)
        gneg = np.where(neg & fin, np.exp(np.minimum(s - a_safe, 0.0)) * acc, 0.0)
        scores._accum(w * (gpos + gneg))
    return _make(np.asarray(loss, dtype=s.dtype), (scores,), bw), skipped


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t
