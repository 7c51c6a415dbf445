"""Differentiable primitives.

Every op takes :class:`Tensor` inputs, returns a new Tensor and, when a tape
is active, records a closure computing the input gradients. Shapes are
checked strictly: there is no general broadcasting, only the explicit
row-bias form used by ``affine`` and ``conv2d``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import kernels
from .tensor import ShapeError, Tensor, record

# rows per im2col chunk; bounds peak memory of the unfolded patches
_CONV_CHUNK = 8192


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a non-differentiable array of equal shape."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return record(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def add_const(a: Tensor, c) -> Tensor:
    return record(a.data + np.asarray(c, dtype=a.dtype), (a,), lambda g: (g,), "add_const")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0)
    return record(out, (a,), lambda g: (g * (ad > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = out.astype(a.dtype, copy=False)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (a,), bw, "softmax")


# -- reductions and reshapes -----------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return record(
        np.asarray([a.data.sum()], dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g[0], dtype=a.dtype),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, dropping it."""
    shape = a.shape
    return record(
        a.data.sum(axis=-1),
        (a,),
        lambda g: (np.broadcast_to(g[..., None], shape).copy(),),
        "sum_last",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    nd = xs[0].data.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.data.ndim != nd or any(
            x.shape[d] != xs[0].shape[d] for d in range(nd) if d != ax
        ):
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=ax)

    def bw(g):
        idx = [slice(None)] * nd
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return res

    return record(out, xs, bw, "concat")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape
    out = a.data[..., start:stop]

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return record(out, (a,), bw, "slice_last")


# -- linear maps -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, in) and ``w`` of shape (in, out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out += b.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw, "affine")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    Images are channels-last, ``(N, H, W, C_in)`` or a single ``(H, W, C_in)``;
    ``weight`` is ``(C_out, C_in, K, K)`` with odd ``K``.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} / kernel {weight.shape} must be 4-D")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {weight.shape}")
    if xd.shape[3] != c_in:
        raise ShapeError(
            f"conv2d: input {x.shape} has {xd.shape[3]} channels, kernel {weight.shape} expects {c_in}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {weight.shape}")
    n, h, w, _ = xd.shape
    xd = np.ascontiguousarray(xd)
    # (ky, kx, c_in) x c_out, matching the patch row order
    wm = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c_in, c_out)
    out = np.empty((n, h, w, c_out), dtype=np.result_type(xd, wm))
    step = max(1, _CONV_CHUNK // (h * w))
    for s in range(0, n, step):
        out[s:s + step] = (kernels.im2col(xd[s:s + step], k) @ wm).reshape(-1, h, w, c_out)
    if bias is not None:
        out += bias.data

    def bw(g):
        g = g[None] if squeeze else g
        gw = np.zeros((k * k * c_in, c_out), dtype=out.dtype)
        gx = np.empty(xd.shape, dtype=out.dtype) if x.requires_grad else None
        for s in range(0, n, step):
            gs = np.ascontiguousarray(g[s:s + step]).reshape(-1, c_out)
            if weight.requires_grad:
                gw += kernels.im2col(xd[s:s + step], k).T @ gs
            if gx is not None:
                gx[s:s + step] = kernels.col2im(gs @ wm.T, len(gs) // (h * w), h, w, c_in, k)
        if gx is not None and squeeze:
            gx = gx[0]
        gweight = gw.reshape(k, k, c_in, c_out).transpose(3, 2, 0, 1)
        if bias is None:
            return gx, gweight
        return gx, gweight, g.reshape(-1, c_out).sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out[0] if squeeze else out, inputs, bw, "conv2d")


# -- indexing --------------------------------------------------------------

def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return record(a.data[idx], (a,), bw, "gather_rows")


def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """``out[r] = a[r, cols[r]]`` for a 2-D ``a``."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, cols] = g
        return (full,)

    return record(a.data[rows, cols], (a,), bw, "take_per_row")


def where_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise select: rows of ``a`` where ``mask`` is true, else of ``b``."""
    _same_shape(a, b, "where_rows")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:1]:
        raise ShapeError(f"where_rows: mask {mask.shape} does not match rows of {a.shape}")
    m = mask.reshape((-1,) + (1,) * (a.data.ndim - 1))
    return record(
        np.where(m, a.data, b.data), (a, b), lambda g: (g * m, g * ~m), "where_rows"
    )


def edge_attention(
    q: Tensor, k: Tensor, v: Tensor, receivers: np.ndarray, senders: np.ndarray, heads: int
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention restricted to an edge list.

    ``q`` is (R, heads*d) with one row per receiver, ``k``/``v`` are
    (M, heads*d) with one row per potential sender. Edge ``e`` lets receiver
    ``receivers[e]`` attend to ``senders[e]``; weights are normalised per
    receiver and head. Receivers without edges get a zero output row.
    Returns the output and the (E, heads) weight array.
    """
    receivers = np.asarray(receivers, dtype=np.intp)
    senders = np.asarray(senders, dtype=np.intp)
    R, M = q.shape[0], k.shape[0]
    if k.shape != v.shape or q.shape[1] != k.shape[1] or q.shape[1] % heads:
        raise ShapeError(f"edge_attention: bad shapes q={q.shape} k={k.shape} v={v.shape}")
    d = q.shape[1] // heads
    qd = q.data.reshape(R, heads, d)
    kd = k.data.reshape(M, heads, d)
    vd = v.data.reshape(M, heads, d)
    inv = 1.0 / np.sqrt(d)
    qe, ke, ve = qd[receivers], kd[senders], vd[senders]
    scores = (qe * ke).sum(axis=-1) * inv  # (E, heads)
    smax = np.full((R, heads), -np.inf, dtype=scores.dtype)
    np.maximum.at(smax, receivers, scores)
    ex = np.exp(scores - smax[receivers])
    den = np.zeros((R, heads), dtype=scores.dtype)
    np.add.at(den, receivers, ex)
    mu = ex / den[receivers]
    out = np.zeros((R, heads, d), dtype=qd.dtype)
    np.add.at(out, receivers, mu[..., None] * ve)

    def bw(g):
        g = g.reshape(R, heads, d)
        ge = g[receivers]
        dmu = (ge * ve).sum(axis=-1)
        gv = np.zeros_like(vd)
        np.add.at(gv, senders, mu[..., None] * ge)
        tot = np.zeros((R, heads), dtype=dmu.dtype)
        np.add.at(tot, receivers, mu * dmu)
        ds = mu * (dmu - tot[receivers]) * inv
        gq = np.zeros_like(qd)
        np.add.at(gq, receivers, ds[..., None] * ke)
        gk = np.zeros_like(kd)
        np.add.at(gk, senders, ds[..., None] * qe)
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    return record(out.reshape(R, heads * d), (q, k, v), bw, "edge_attention"), mu
