"""Modal-interaction layer.

Four stages: (1) a stack of co-attention layers exchanging keys/values
between the text and image streams; (2) fusion of each stream's initial and
interactive features (mean, soft-sampling, or hard-sampling, or bypassed
entirely for the ablation); (3) item initialization as the mean over all
valid fused positions, with image features mapped into text width by W0;
(4) multi-head attention over the item's triples producing the
knowledge-guided representation

    c* = W3 c + ELU( (1/M_h) sum_m sum_x a_x^m t_x^m )

with t_x^m = W1^m [c || p_x || v_x],  b_x^m = LeakyReLU(W2^m t_x^m),
a^m = softmax_x(b^m).  With zero triples the aggregate is exactly zero, so
c* = W3 c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import SurfaceFeatures
from .nn.layers import co_attention_layer, init_co_attention_layer
from .nn.params import ParamStore, trunc_normal
from .nn.tensor import (
    Tensor,
    add,
    concat,
    constant,
    elu,
    gather_rows,
    leaky_relu,
    matmul,
    mul,
    sigmoid,
    softmax,
    stack_rows,
    sub,
    tmean,
    tsum,
)

INTERACTOR_PREFIX = "interactor"
IFFM_PREFIX = "iffm"
STRUCT_PREFIX = "structagg"

FUSION_ALGORITHMS = ("mean", "soft_sampling", "hard_sampling")


@dataclass
class FusedFeatures:
    text: Tensor  # [m_text, hidden_text]
    image: Tensor  # [m_obj, hidden_image]


@dataclass
class TripleAttention:
    """Audit view of the per-head triple attention (detached numpy copies)."""

    t: np.ndarray  # [heads, n_triples, hidden]
    b: np.ndarray  # [heads, n_triples]
    a: np.ndarray  # [heads, n_triples]


def init_interactor(store: ParamStore, cfg, rng) -> None:
    for i in range(cfg.n_layers):
        init_co_attention_layer(
            store,
            f"{INTERACTOR_PREFIX}.layer{i}",
            cfg.hidden_text,
            cfg.hidden_image,
            cfg.hidden_text,  # shared inner attention width
            cfg.ffn_mult,
            rng,
        )


def init_iffm(store: ParamStore, cfg, rng) -> None:
    for stream, dim in (("text", cfg.hidden_text), ("image", cfg.hidden_image)):
        store.create(f"{IFFM_PREFIX}.{stream}.w", trunc_normal(rng, (dim,)))
        store.create(f"{IFFM_PREFIX}.{stream}.u", trunc_normal(rng, (dim,)))
        store.create(f"{IFFM_PREFIX}.{stream}.b", np.zeros(dim))


def init_structagg(store: ParamStore, cfg, rng) -> None:
    h = cfg.hidden_text
    store.create(f"{STRUCT_PREFIX}.W0", trunc_normal(rng, (cfg.hidden_image, h)))
    store.create(f"{STRUCT_PREFIX}.W3", trunc_normal(rng, (h, h)))
    for m in range(cfg.agg_heads):
        store.create(f"{STRUCT_PREFIX}.head{m}.W1", trunc_normal(rng, (3 * h, h)))
        store.create(f"{STRUCT_PREFIX}.head{m}.W2", trunc_normal(rng, (h, 1)))


def co_attend(
    store: ParamStore,
    cfg,
    h_text: Tensor,
    h_image: Tensor,
    text_mask: np.ndarray,
    image_mask: np.ndarray,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the co-attention stack; returns (text conditioned on image,
    image conditioned on text)."""
    x, y = h_text, h_image
    for i in range(cfg.n_layers):
        x, y = co_attention_layer(
            store, f"{INTERACTOR_PREFIX}.layer{i}", x, y, text_mask, image_mask,
            cfg.n_heads_text, trace,
        )
    return x, y


def iffm_fuse(
    h0: Tensor,
    hx: Tensor,
    algorithm: str,
    mode: str = "eval",
    seed: int | None = None,
    gate: tuple | None = None,
) -> Tensor:
    """Fuse initial features ``h0`` with interactive features ``hx``.

    mean:          (h0 + hx) / 2
    soft_sampling: g * h0 + (1 - g) * hx with a learned per-channel logistic
                   gate g = sigmoid(w * h0 + u * hx + b)
    hard_sampling: per-element Bernoulli(g) choice between h0 and hx in train
                   mode, with straight-through gradient to the gate; the soft
                   expectation in eval mode (deterministic)
    """
    if h0.shape != hx.shape:
        raise ValueError(f"fusion inputs differ in shape: {h0.shape} vs {hx.shape}")
    if algorithm == "mean":
        return mul(add(h0, hx), 0.5)
    if algorithm not in FUSION_ALGORITHMS:
        raise ValueError(f"unknown fusion algorithm {algorithm!r}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    if gate is None:
        raise ValueError(f"{algorithm} fusion needs gate parameters")

    w, u, b = gate
    g = sigmoid(add(add(mul(w, h0), mul(u, hx)), b))
    soft = add(mul(g, h0), mul(sub(1.0, g), hx))
    if algorithm == "soft_sampling" or mode == "eval":
        return soft

    # Hard sampling: value uses the Bernoulli draw, gradient the soft path.
    rng = np.random.default_rng(seed)
    draw = rng.random(g.shape)
    z = (draw < g.data).astype(g.dtype)
    correction = constant(z - g.data)
    return add(soft, mul(correction, sub(h0, hx)))


def init_item_representation(
    fused_text: Tensor,
    fused_image: Tensor,
    text_mask: np.ndarray,
    image_mask: np.ndarray,
    w0: Tensor,
) -> Tensor:
    """Mean over all valid fused positions, image rows first mapped through W0."""
    parts = []
    if text_mask.any():
        parts.append(gather_rows(fused_text, np.flatnonzero(text_mask)))
    if image_mask.any():
        parts.append(matmul(gather_rows(fused_image, np.flatnonzero(image_mask)), w0))
    if not parts:
        raise ValueError("item has neither title nor image; no representation source")
    rows = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    return tmean(rows, axis=0, keepdims=True)


def aggregate_structure(
    store: ParamStore, cfg, c: Tensor, surface: SurfaceFeatures
) -> tuple[Tensor, TripleAttention | None]:
    """Attend over the item's triples and produce the knowledge-guided c*."""
    w3 = store.get(f"{STRUCT_PREFIX}.W3")
    projected = matmul(c, w3)
    n = len(surface)
    if n == 0:
        zero = constant(np.zeros_like(projected.data))
        return add(projected, elu(zero)), None

    # [n, 3h]: each row is [c || p_x || v_x]
    rows = stack_rows(
        [concat([c, surface.p[x], surface.v[x]], axis=1) for x in range(n)]
    )

    head_sums = []
    t_all, b_all, a_all = [], [], []
    for m in range(cfg.agg_heads):
        t_m = matmul(rows, store.get(f"{STRUCT_PREFIX}.head{m}.W1"))  # [n, h]
        b_m = leaky_relu(matmul(t_m, store.get(f"{STRUCT_PREFIX}.head{m}.W2")), cfg.leaky_slope)
        a_m = softmax(b_m, axis=0)  # [n, 1]
        head_sums.append(tsum(mul(a_m, t_m), axis=0, keepdims=True))
        t_all.append(np.array(t_m.data))
        b_all.append(np.array(b_m.data).reshape(-1))
        a_all.append(np.array(a_m.data).reshape(-1))

    total = head_sums[0]
    for h in head_sums[1:]:
        total = add(total, h)
    aggregate = mul(total, 1.0 / cfg.agg_heads)
    c_star = add(projected, elu(aggregate))
    attention = TripleAttention(t=np.stack(t_all), b=np.stack(b_all), a=np.stack(a_all))
    return c_star, attention
