"""Modal-encoding layer: masking, text/image encoders, knowledge surface features.

The text encoder (token + learned positional embeddings, then a transformer
stack) serves double duty: it encodes titles and, with the same parameters,
the stitched knowledge text whose per-triple spans are mean-pooled into the
relation and tail surface features.  The image encoder projects detector
features plus a linear embedding of the 5-d box geometry.

Masking selects exactly round-half-up(ratio * len) positions, at least one
when ratio > 0 and the sequence is nonempty.  Token masking follows the
80/10/10 mask/random/keep convention; object masking zeroes the feature
vector with probability 0.9 and keeps it otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import Corpus, Item, ObjectSequence, build_knowledge_text
from .nn.layers import transformer_layer
from .nn.params import ParamStore, trunc_normal
from .nn.tensor import Tensor, add, constant, gather_rows, matmul, tmean

TEXT_PREFIX = "text_encoder"
IMAGE_PREFIX = "image_encoder"


@dataclass
class MaskedSequence:
    input_ids: list
    mask_positions: list
    labels: list


@dataclass
class SurfaceFeatures:
    """Per-triple relation (p) and tail (v) features, in item triple order.

    Covers the triples that fit the knowledge-text length budget; triples
    dropped by boundary truncation have no surface features.
    """

    p: list = field(default_factory=list)  # of (1, hidden) Tensors
    v: list = field(default_factory=list)
    triples: list = field(default_factory=list)

    def __len__(self):
        return len(self.triples)


def mask_count(n: int, ratio: float) -> int:
    if n == 0 or ratio <= 0:
        return 0
    return max(1, math.floor(n * ratio + 0.5))


def mask_tokens(seq, corpus: Corpus, ratio: float = 0.15, seed: int = 0) -> MaskedSequence:
    """BERT-style masking: per selected position 80% [MASK], 10% random
    non-special token, 10% kept (still predicted)."""
    seq = list(seq)
    count = mask_count(len(seq), ratio)
    if count == 0:
        return MaskedSequence(input_ids=seq, mask_positions=[], labels=[])

    rng = np.random.default_rng(seed)
    positions = sorted(int(p) for p in rng.choice(len(seq), size=count, replace=False))
    pool = corpus.regular_token_ids()
    input_ids = list(seq)
    labels = []
    for pos in positions:
        labels.append(seq[pos])
        u = rng.random()
        if u < 0.8:
            input_ids[pos] = corpus.mask_id
        elif u < 0.9:
            input_ids[pos] = pool[int(rng.integers(len(pool)))]
        # else: keep the original token
    return MaskedSequence(input_ids=input_ids, mask_positions=positions, labels=labels)


def mask_objects(
    objects: ObjectSequence, ratio: float = 0.15, seed: int = 0
) -> tuple[ObjectSequence, list, list]:
    """Zero selected objects' features (90% of selections) or keep them (10%);
    labels are the object-class ids at the selected positions."""
    count = mask_count(len(objects), ratio)
    masked = ObjectSequence(
        features=[list(f) for f in objects.features],
        boxes=[list(b) for b in objects.boxes],
        labels=list(objects.labels),
    )
    if count == 0:
        return masked, [], []

    rng = np.random.default_rng(seed)
    positions = sorted(int(p) for p in rng.choice(len(objects), size=count, replace=False))
    labels = []
    for pos in positions:
        labels.append(objects.labels[pos])
        if rng.random() < 0.9:
            masked.features[pos] = [0.0] * len(masked.features[pos])
    return masked, positions, labels


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def init_text_encoder(store: ParamStore, cfg, rng) -> None:
    store.create(f"{TEXT_PREFIX}.tok_emb", trunc_normal(rng, (cfg.vocab_size, cfg.hidden_text)))
    max_pos = max(cfg.m_text, cfg.m_know)
    store.create(f"{TEXT_PREFIX}.pos_emb", trunc_normal(rng, (max_pos, cfg.hidden_text)))
    from .nn.layers import init_transformer_layer

    for i in range(cfg.n_layers):
        init_transformer_layer(
            store, f"{TEXT_PREFIX}.layer{i}", cfg.hidden_text, cfg.n_heads_text, cfg.ffn_mult, rng
        )


def init_image_encoder(store: ParamStore, cfg, rng) -> None:
    store.create(f"{IMAGE_PREFIX}.feat_proj.w", trunc_normal(rng, (cfg.d_obj, cfg.hidden_image)))
    store.create(f"{IMAGE_PREFIX}.feat_proj.b", np.zeros(cfg.hidden_image))
    store.create(f"{IMAGE_PREFIX}.box_proj.w", trunc_normal(rng, (5, cfg.hidden_image)))
    from .nn.layers import init_transformer_layer

    for i in range(cfg.n_layers):
        init_transformer_layer(
            store, f"{IMAGE_PREFIX}.layer{i}", cfg.hidden_image, cfg.n_heads_image, cfg.ffn_mult, rng
        )


def encode_text(
    store: ParamStore,
    cfg,
    token_ids,
    pad_id: int = 0,
    max_len: int | None = None,
    trace: list | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Encode a (possibly empty) token sequence into [max_len, hidden_text].

    Padded positions are excluded from attention; their output rows exist
    but must not be consumed.
    """
    max_len = cfg.m_text if max_len is None else max_len
    ids = list(token_ids)
    if len(ids) > max_len:
        raise ValueError(f"sequence of {len(ids)} tokens exceeds the {max_len} limit")
    tok_emb = store.get(f"{TEXT_PREFIX}.tok_emb")
    vocab_size = tok_emb.shape[0]
    for tok in ids:
        if not 0 <= tok < vocab_size:
            raise ValueError(f"unknown token id {tok} (vocabulary size {vocab_size})")

    valid = np.zeros(max_len, dtype=bool)
    valid[: len(ids)] = True
    padded = np.full(max_len, pad_id, dtype=np.intp)
    padded[: len(ids)] = ids

    h = add(
        gather_rows(tok_emb, padded),
        gather_rows(store.get(f"{TEXT_PREFIX}.pos_emb"), np.arange(max_len)),
    )
    for i in range(cfg.n_layers):
        h = transformer_layer(store, f"{TEXT_PREFIX}.layer{i}", h, valid, cfg.n_heads_text, trace)
    return h, valid


def encode_image(
    store: ParamStore, cfg, objects: ObjectSequence, trace: list | None = None
) -> tuple[Tensor, np.ndarray]:
    """Encode an object sequence into [m_obj, hidden_image]."""
    n = len(objects)
    if n > cfg.m_obj:
        raise ValueError(f"object sequence of {n} exceeds the {cfg.m_obj} limit")
    for feat in objects.features:
        if len(feat) != cfg.d_obj:
            raise ValueError(f"object feature dim {len(feat)} does not match d_obj={cfg.d_obj}")

    dtype = store.dtype
    feats = np.zeros((cfg.m_obj, cfg.d_obj), dtype=dtype)
    boxes = np.zeros((cfg.m_obj, 5), dtype=dtype)
    valid = np.zeros(cfg.m_obj, dtype=bool)
    if n:
        feats[:n] = np.asarray(objects.features, dtype=dtype)
        boxes[:n] = np.asarray(objects.boxes, dtype=dtype)
        valid[:n] = True

    h = add(
        add(
            matmul(constant(feats), store.get(f"{IMAGE_PREFIX}.feat_proj.w")),
            store.get(f"{IMAGE_PREFIX}.feat_proj.b"),
        ),
        matmul(constant(boxes), store.get(f"{IMAGE_PREFIX}.box_proj.w")),
    )
    for i in range(cfg.n_layers):
        h = transformer_layer(store, f"{IMAGE_PREFIX}.layer{i}", h, valid, cfg.n_heads_image, trace)
    return h, valid


def knowledge_surface_features(
    store: ParamStore, cfg, item: Item, corpus: Corpus, trace: list | None = None
) -> SurfaceFeatures:
    """Mean-pool the shared text encoder's last hidden states over each
    relation span (p) and tail span (v) of the stitched knowledge text."""
    kt = build_knowledge_text(item, corpus, max_tokens=cfg.m_know)
    if not kt.spans:
        return SurfaceFeatures()
    h, _ = encode_text(store, cfg, kt.tokens, pad_id=corpus.pad_id, max_len=cfg.m_know, trace=trace)
    out = SurfaceFeatures()
    for triple, (rel_span, tail_span) in zip(item.triples, kt.spans):
        out.p.append(tmean(gather_rows(h, np.arange(*rel_span)), axis=0, keepdims=True))
        out.v.append(tmean(gather_rows(h, np.arange(*tail_span)), axis=0, keepdims=True))
        out.triples.append(triple)
    return out


def encode_entity_surface(store: ParamStore, cfg, corpus: Corpus, entity_id: int) -> Tensor:
    """Surface feature of a lone tail entity (used to score corrupted triples):
    encode its surface tokens with the shared text encoder and mean-pool."""
    tokens = corpus.tokenize_surface(corpus.entity_vocab.token(entity_id))
    h, _ = encode_text(store, cfg, tokens, pad_id=corpus.pad_id, max_len=len(tokens))
    return tmean(h, axis=0, keepdims=True)
