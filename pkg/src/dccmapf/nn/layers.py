"""Composite layers built from the primitives in :mod:`ops`."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Variance-preserving init for weights that feed a ReLU."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_affine(rng, n_in: int, n_out: int, bias: bool = True, relu: bool = False) -> dict[str, np.ndarray]:
    if relu:
        p = {"w": he_uniform(rng, (n_in, n_out), n_in)}
        if bias:
            p["b"] = np.zeros(n_out, dtype=DEFAULT_DTYPE)
        return p
    p = {"w": uniform_fan_in(rng, (n_in, n_out), n_in)}
    if bias:
        p["b"] = uniform_fan_in(rng, (n_out,), n_in)
    return p


def init_conv(rng, c_in: int, c_out: int, k: int = 3) -> dict[str, np.ndarray]:
    """Conv layers are always followed by a ReLU here, so they get the He scale."""
    fan_in = c_in * k * k
    return {
        "w": he_uniform(rng, (c_out, c_in, k, k), fan_in),
        "b": np.zeros(c_out, dtype=DEFAULT_DTYPE),
    }


def init_gru(rng, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    """Gate order along the last axis is (reset, update, candidate)."""
    return {
        "w_ih": uniform_fan_in(rng, (n_in, 3 * hidden), hidden),
        "w_hh": uniform_fan_in(rng, (hidden, 3 * hidden), hidden),
        "b_ih": np.zeros(3 * hidden, dtype=DEFAULT_DTYPE),
        "b_hh": np.zeros(3 * hidden, dtype=DEFAULT_DTYPE),
    }


def gru_cell(x: Tensor, h: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """One gated-recurrent-unit update for a batch of rows.

    r = σ(x W_ir + h W_hr), z = σ(x W_iz + h W_hz),
    n = tanh(x W_in + r ⊙ (h W_hn)), h' = (1 - z) ⊙ n + z ⊙ h
    (biases omitted above, present in ``p``).
    """
    hid = h.shape[-1]
    if x.data.ndim != 2 or h.data.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: input {x.shape} and hidden {h.shape} must be (N, *) row batches")
    if p["w_ih"].shape != (x.shape[1], 3 * hid) or p["w_hh"].shape != (hid, 3 * hid):
        raise ShapeError(
            f"gru_cell: input {x.shape} / hidden {h.shape} do not match "
            f"w_ih {p['w_ih'].shape} / w_hh {p['w_hh'].shape}"
        )
    gi = ops.affine(x, p["w_ih"], p["b_ih"])
    gh = ops.affine(h, p["w_hh"], p["b_hh"])
    r = ops.sigmoid(ops.add(ops.slice_last(gi, 0, hid), ops.slice_last(gh, 0, hid)))
    z = ops.sigmoid(ops.add(ops.slice_last(gi, hid, 2 * hid), ops.slice_last(gh, hid, 2 * hid)))
    n = ops.tanh(ops.add(ops.slice_last(gi, 2 * hid, 3 * hid),
                         ops.mul(r, ops.slice_last(gh, 2 * hid, 3 * hid))))
    return ops.add(n, ops.mul(z, ops.sub(h, n)))


def init_attention(rng, q_dim: int, kv_dim: int, out_dim: int, heads: int, key_dim: int):
    width = heads * key_dim
    return {
        "w_q": uniform_fan_in(rng, (q_dim, width), q_dim),
        "w_k": uniform_fan_in(rng, (kv_dim, width), kv_dim),
        "w_v": uniform_fan_in(rng, (kv_dim, width), kv_dim),
        "w_o": uniform_fan_in(rng, (width, out_dim), width),
        "b_o": uniform_fan_in(rng, (out_dim,), width),
    }


def multi_head_attention(
    queries: Tensor,
    keys_values: Tensor,
    p: Mapping[str, Tensor],
    heads: int,
    receivers: np.ndarray | None = None,
    senders: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head dot-product attention followed by the output map.

    Without an edge list every query row attends to every key/value row.
    With ``receivers``/``senders`` only the listed (query, member) pairs take
    part. Returns the (R, out_dim) output and the (E, heads) weights.
    """
    n_q, n_kv = queries.shape[0], keys_values.shape[0]
    if receivers is None:
        if n_kv == 0:
            raise ValueError("multi_head_attention: empty key set")
        receivers = np.repeat(np.arange(n_q), n_kv)
        senders = np.tile(np.arange(n_kv), n_q)
    elif len(receivers) == 0:
        raise ValueError("multi_head_attention: empty key set")
    if p["w_q"].shape[0] != queries.shape[1] or p["w_k"].shape[0] != keys_values.shape[1]:
        raise ShapeError(
            f"multi_head_attention: queries {queries.shape} / keys {keys_values.shape} "
            f"do not match w_q {p['w_q'].shape} / w_k {p['w_k'].shape}"
        )
    q = ops.matmul(queries, p["w_q"])
    k = ops.matmul(keys_values, p["w_k"])
    v = ops.matmul(keys_values, p["w_v"])
    mixed, weights = ops.edge_attention(q, k, v, receivers, senders, heads)
    return ops.affine(mixed, p["w_o"], p["b_o"]), weights


def forward_layer(kind: str, inputs: Sequence[Tensor], params: Sequence[Tensor] = ()) -> Tensor:
    """Dispatch by layer name; mirrors the public layer set."""
    if kind == "conv2d":
        return ops.conv2d(inputs[0], *params)
    if kind == "affine":
        return ops.affine(inputs[0], *params)
    if kind == "relu":
        return ops.relu(inputs[0])
    if kind == "softmax":
        return ops.softmax(inputs[0])
    if kind == "concat":
        return ops.concat(inputs, axis=-1)
    raise ValueError(f"unknown layer kind {kind!r}")
