"""Transformer building blocks: self-attention and co-attention layers.

Both layer types are post-norm: attention + residual + layer norm, then a
two-layer feed-forward + residual + layer norm.  Attention masks are boolean
key-validity vectors; invalid keys get a -1e9 score bias, which underflows to
exactly zero weight after the stable softmax.  A fully masked key set yields
an all-zero attention output (the caller guarantees such outputs are never
consumed, or routes around them with a learned null slot).
"""

from __future__ import annotations

import math

import numpy as np

from .params import ParamStore, trunc_normal
from .tensor import Tensor, add, concat, constant, gather_rows, gelu, matmul, mul, power
from .tensor import reshape, softmax, sub, tmean, transpose

# No key-projection bias: softmax cancels any uniform key shift, so the
# parameter would be exactly gradient-free.
ATTN_NAMES = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")
LN_EPS = 1e-6


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def normalize(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row standardization over the last axis (the pre-affine part)."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    return mul(centered, power(add(var, eps), -0.5))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    return add(mul(normalize(x, eps), gain), bias)


def _attn_params(store: ParamStore, prefix: str) -> dict:
    return {name: store.get(f"{prefix}.{name}") for name in ATTN_NAMES}


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    key_mask: np.ndarray,
    params: dict,
    n_heads: int,
    trace: list | None = None,
    name: str = "attn",
) -> Tensor:
    """Queries from ``x_q`` attend over keys/values projected from ``x_kv``."""
    lq = x_q.shape[0]
    lk = x_kv.shape[0]
    if key_mask.shape != (lk,):
        raise ValueError(f"key mask shape {key_mask.shape} does not match {lk} keys")
    inner = params["wq"].shape[1]
    dh = inner // n_heads

    q = linear(x_q, params["wq"], params["bq"])
    k = linear(x_kv, params["wk"])
    v = linear(x_kv, params["wv"], params["bv"])
    q3 = transpose(reshape(q, (lq, n_heads, dh)), (1, 0, 2))
    k3 = transpose(reshape(k, (lk, n_heads, dh)), (1, 2, 0))
    v3 = transpose(reshape(v, (lk, n_heads, dh)), (1, 0, 2))

    scores = mul(matmul(q3, k3), 1.0 / math.sqrt(dh))
    bias = np.where(key_mask, 0.0, -1e9).astype(x_q.dtype)[None, None, :]
    attn = softmax(add(scores, constant(bias)), axis=-1)
    if not key_mask.any():
        attn = mul(attn, 0.0)
    if trace is not None:
        trace.append((name, np.array(attn.data)))

    ctx = matmul(attn, v3)
    merged = reshape(transpose(ctx, (1, 0, 2)), (lq, inner))
    return linear(merged, params["wo"], params["bo"])


def feed_forward(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    hidden = gelu(linear(x, store.get(f"{prefix}.w1"), store.get(f"{prefix}.b1")))
    return linear(hidden, store.get(f"{prefix}.w2"), store.get(f"{prefix}.b2"))


def transformer_layer(
    store: ParamStore,
    prefix: str,
    x: Tensor,
    key_mask: np.ndarray,
    n_heads: int,
    trace: list | None = None,
) -> Tensor:
    attn = multi_head_attention(
        x, x, key_mask, _attn_params(store, f"{prefix}.attn"), n_heads,
        trace=trace, name=f"{prefix}.attn",
    )
    x = layer_norm(add(x, attn), store.get(f"{prefix}.ln1.g"), store.get(f"{prefix}.ln1.b"))
    ff = feed_forward(store, f"{prefix}.ffn", x)
    return layer_norm(add(x, ff), store.get(f"{prefix}.ln2.g"), store.get(f"{prefix}.ln2.b"))


def _effective_source(store: ParamStore, null_name: str, src: Tensor, mask: np.ndarray):
    """Swap a fully padded source stream for its learned null slot."""
    if mask.any():
        return src, mask
    return store.get(null_name), np.array([True])


def co_attention_layer(
    store: ParamStore,
    prefix: str,
    x: Tensor,
    y: Tensor,
    x_mask: np.ndarray,
    y_mask: np.ndarray,
    n_heads: int,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """One cross-attention exchange: each stream queries the other's keys/values.

    Both streams update in parallel from the pre-layer values; parameters are
    separate per stream.
    """
    y_src, y_eff = _effective_source(store, f"{prefix}.text.null_src", y, y_mask)
    x_src, x_eff = _effective_source(store, f"{prefix}.image.null_src", x, x_mask)

    new_streams = []
    for stream, q_in, kv_in, kv_mask in (
        ("text", x, y_src, y_eff),
        ("image", y, x_src, x_eff),
    ):
        p = f"{prefix}.{stream}"
        attn = multi_head_attention(
            q_in, kv_in, kv_mask, _attn_params(store, f"{p}.cross"), n_heads,
            trace=trace, name=f"{p}.cross",
        )
        h = layer_norm(add(q_in, attn), store.get(f"{p}.ln1.g"), store.get(f"{p}.ln1.b"))
        ff = feed_forward(store, f"{p}.ffn", h)
        h = layer_norm(add(h, ff), store.get(f"{p}.ln2.g"), store.get(f"{p}.ln2.b"))
        new_streams.append(h)
    return new_streams[0], new_streams[1]


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def init_attention(store, prefix, d_q, d_kv, inner, d_out, rng):
    store.create(f"{prefix}.wq", trunc_normal(rng, (d_q, inner)))
    store.create(f"{prefix}.bq", np.zeros(inner))
    store.create(f"{prefix}.wk", trunc_normal(rng, (d_kv, inner)))
    store.create(f"{prefix}.wv", trunc_normal(rng, (d_kv, inner)))
    store.create(f"{prefix}.bv", np.zeros(inner))
    store.create(f"{prefix}.wo", trunc_normal(rng, (inner, d_out)))
    store.create(f"{prefix}.bo", np.zeros(d_out))


def init_layer_norm(store, prefix, d):
    store.create(f"{prefix}.g", np.ones(d))
    store.create(f"{prefix}.b", np.zeros(d))


def init_feed_forward(store, prefix, d, ffn_mult, rng):
    store.create(f"{prefix}.w1", trunc_normal(rng, (d, ffn_mult * d)))
    store.create(f"{prefix}.b1", np.zeros(ffn_mult * d))
    store.create(f"{prefix}.w2", trunc_normal(rng, (ffn_mult * d, d)))
    store.create(f"{prefix}.b2", np.zeros(d))


def init_transformer_layer(store, prefix, d, n_heads, ffn_mult, rng):
    if d % n_heads:
        raise ValueError(f"hidden size {d} not divisible by {n_heads} heads")
    init_attention(store, f"{prefix}.attn", d, d, d, d, rng)
    init_layer_norm(store, f"{prefix}.ln1", d)
    init_feed_forward(store, f"{prefix}.ffn", d, ffn_mult, rng)
    init_layer_norm(store, f"{prefix}.ln2", d)


def init_co_attention_layer(store, prefix, d_text, d_img, inner, ffn_mult, rng):
    # Shared inner attention space; each stream projects back to its own width.
    init_attention(store, f"{prefix}.text.cross", d_text, d_img, inner, d_text, rng)
    init_layer_norm(store, f"{prefix}.text.ln1", d_text)
    init_feed_forward(store, f"{prefix}.text.ffn", d_text, ffn_mult, rng)
    init_layer_norm(store, f"{prefix}.text.ln2", d_text)
    store.create(f"{prefix}.text.null_src", trunc_normal(rng, (1, d_img)))

    init_attention(store, f"{prefix}.image.cross", d_img, d_text, inner, d_img, rng)
    init_layer_norm(store, f"{prefix}.image.ln1", d_img)
    init_feed_forward(store, f"{prefix}.image.ffn", d_img, ffn_mult, rng)
    init_layer_norm(store, f"{prefix}.image.ln2", d_img)
    store.create(f"{prefix}.image.null_src", trunc_normal(rng, (1, d_text)))
