"""The composed three-modality model.

A forward pass over one item runs: modal encoding (title, objects, stitched
knowledge text), the co-attention stack, initial/interactive feature fusion
(or its bypass), item initialization, and structure aggregation.  Pretraining
adds the masked-token, masked-object, and link-prediction losses on top;
finetuning heads consume the knowledge-guided representation c*.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import encoders, interaction, tasks
from .config import ConfigError
from .data_model import Corpus, Item, replace_item
from .nn.params import ParamStore
from .nn.tensor import Tensor, add, concat, constant, gather_rows, mul, softmax

# Paper-scale preset; never exercised by the test suite (275 GPU-hours class).
PAPER_SCALE = {
    "n_layers": 6,
    "hidden_text": 768,
    "hidden_image": 1024,
    "n_heads_text": 12,
    "n_heads_image": 8,
    "agg_heads": 8,
    "m_text": 40,
    "m_obj": 36,
    "m_know": 80,
    "d_obj": 2048,
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and task hyperparameters (desk-scale defaults)."""

    vocab_size: int
    n_obj_classes: int
    n_entities: int
    d_obj: int = 16
    n_layers: int = 2
    hidden_text: int = 64
    hidden_image: int = 96
    n_heads_text: int = 4
    n_heads_image: int = 4
    ffn_mult: int = 4
    agg_heads: int = 2
    m_text: int = 16
    m_obj: int = 8
    m_know: int = 24
    iffm: str = "mean"  # mean | soft_sampling | hard_sampling | off
    with_knowledge: bool = True
    margin: float = 1.0
    n_negatives: int = 3
    leaky_slope: float = 0.2
    dtype: str = "float32"

    def validate(self) -> None:
        if self.hidden_text % self.n_heads_text:
            raise ConfigError("hidden_text must be divisible by n_heads_text")
        if self.hidden_image % self.n_heads_image:
            raise ConfigError("hidden_image must be divisible by n_heads_image")
        if self.hidden_text % self.n_heads_image or self.hidden_text % self.n_heads_text:
            raise ConfigError("hidden_text must be divisible by the co-attention head count")
        if self.iffm not in ("mean", "soft_sampling", "hard_sampling", "off"):
            raise ConfigError(f"unknown iffm mode {self.iffm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("vocab_size", "n_obj_classes", "n_entities", "d_obj",
                     "agg_heads", "m_text", "m_obj", "m_know", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0:  # zero layers = raw embeddings, used by oracles
            raise ConfigError("n_layers must be non-negative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        cfg = ModelConfig(**data)
        cfg.validate()
        return cfg

    @staticmethod
    def for_corpus(corpus: Corpus, **overrides) -> "ModelConfig":
        cfg = ModelConfig(
            vocab_size=len(corpus.token_vocab),
            n_obj_classes=len(corpus.object_class_vocab),
            n_entities=len(corpus.entity_vocab),
            d_obj=corpus.d_obj,
        )
        if overrides:
            cfg = replace(cfg, **overrides)
        cfg.validate()
        return cfg

    def variant_label(self) -> str:
        return f"iffm={self.iffm},pkg={'on' if self.with_knowledge else 'off'}"


@dataclass
class ItemState:
    """Everything the tasks need from one item's forward pass."""

    fused_text: Tensor
    fused_image: Tensor
    text_mask: np.ndarray
    image_mask: np.ndarray
    c: Tensor
    c_star: Tensor
    surface: encoders.SurfaceFeatures
    triple_attention: interaction.TripleAttention | None


@dataclass
class ItemPlan:
    """Frozen per-item randomness for one pretraining step."""

    masked_title: encoders.MaskedSequence
    masked_objects: tuple  # (ObjectSequence, positions, labels)
    negatives: list  # one list of tasks.Negative per surface triple
    iffm_seed: int


@dataclass
class PretrainBatchLoss:
    l_mlm: Tensor
    l_mom: Tensor
    l_lpm: Tensor
    l_total: Tensor

    def values(self) -> dict:
        return {
            "l_mlm": self.l_mlm.item(),
            "l_mom": self.l_mom.item(),
            "l_lpm": self.l_lpm.item(),
            "l_total": self.l_total.item(),
        }


class K3M:
    """Parameter owner plus the composed forward passes."""

    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        if store is None:
            store = ParamStore(dtype=np.dtype(cfg.dtype))
            rng = np.random.default_rng(seed)
            encoders.init_text_encoder(store, cfg, rng)
            encoders.init_image_encoder(store, cfg, rng)
            interaction.init_interactor(store, cfg, rng)
            interaction.init_iffm(store, cfg, rng)
            interaction.init_structagg(store, cfg, rng)
            tasks.init_linear_head(store, "mlm", cfg.hidden_text, cfg.vocab_size, rng)
            tasks.init_linear_head(store, "mom", cfg.hidden_image, cfg.n_obj_classes, rng)
        self.store = store

    def attach_head(self, name: str, d_out: int, seed: int = 0) -> None:
        """Create a finetuning head over c* (idempotent per name)."""
        if f"{tasks.HEADS_PREFIX}.{name}.w" in self.store:
            return
        d_in = 2 * self.cfg.hidden_text if name == "alignment" else self.cfg.hidden_text
        tasks.init_linear_head(self.store, name, d_in, d_out, np.random.default_rng(seed))

    # -- forward passes -----------------------------------------------------

    def item_state(
        self,
        item: Item,
        corpus: Corpus,
        title_tokens=None,
        objects=None,
        mode: str = "eval",
        iffm_seed: int | None = None,
        trace: list | None = None,
    ) -> ItemState:
        cfg = self.cfg
        title = list(item.title) if title_tokens is None else list(title_tokens)
        objs = item.objects if objects is None else objects

        h0_text, text_mask = encoders.encode_text(
            self.store, cfg, title, pad_id=corpus.pad_id, trace=trace
        )
        h0_image, image_mask = encoders.encode_image(self.store, cfg, objs, trace=trace)

        if cfg.with_knowledge:
            surface = encoders.knowledge_surface_features(self.store, cfg, item, corpus, trace)
        else:
            surface = encoders.SurfaceFeatures()

        hi_text, ht_image = interaction.co_attend(
            self.store, cfg, h0_text, h0_image, text_mask, image_mask, trace
        )

        if cfg.iffm == "off":
            fused_text, fused_image = hi_text, ht_image
        else:
            gate_text = gate_image = None
            if cfg.iffm != "mean":
                gate_text = tuple(
                    self.store.get(f"{interaction.IFFM_PREFIX}.text.{p}") for p in "wub"
                )
                gate_image = tuple(
                    self.store.get(f"{interaction.IFFM_PREFIX}.image.{p}") for p in "wub"
                )
            seed_t = None if iffm_seed is None else 2 * iffm_seed
            seed_i = None if iffm_seed is None else 2 * iffm_seed + 1
            fused_text = interaction.iffm_fuse(h0_text, hi_text, cfg.iffm, mode, seed_t, gate_text)
            fused_image = interaction.iffm_fuse(
                h0_image, ht_image, cfg.iffm, mode, seed_i, gate_image
            )

        c = interaction.init_item_representation(
            fused_text, fused_image, text_mask, image_mask,
            self.store.get(f"{interaction.STRUCT_PREFIX}.W0"),
        )
        c_star, attn = interaction.aggregate_structure(self.store, cfg, c, surface)
        return ItemState(
            fused_text=fused_text,
            fused_image=fused_image,
            text_mask=text_mask,
            image_mask=image_mask,
            c=c,
            c_star=c_star,
            surface=surface,
            triple_attention=attn,
        )

    def pretrain_batch(self, corpus: Corpus, items, plans) -> PretrainBatchLoss:
        """Losses of one batch; all randomness comes from the plans."""
        cfg = self.cfg
        states: dict = {}
        mlm_rows, mlm_labels = [], []
        mom_rows, mom_labels = [], []

        for item, plan in zip(items, plans):
            masked_objs, obj_positions, obj_labels = plan.masked_objects
            state = self.item_state(
                item,
                corpus,
                title_tokens=plan.masked_title.input_ids,
                objects=masked_objs,
                mode="train",
                iffm_seed=plan.iffm_seed,
            )
            states[item.id] = state
            if plan.masked_title.mask_positions:
                mlm_rows.append(
                    gather_rows(state.fused_text, np.asarray(plan.masked_title.mask_positions))
                )
                mlm_labels.extend(plan.masked_title.labels)
            if obj_positions:
                mom_rows.append(gather_rows(state.fused_image, np.asarray(obj_positions)))
                mom_labels.extend(obj_labels)

        zero = constant(np.zeros((), dtype=self.store.dtype))
        if mlm_rows:
            logits = tasks.head_logits(self.store, "mlm", concat(mlm_rows, axis=0))
            l_mlm = tasks.mlm_loss(logits, mlm_labels)
        else:
            l_mlm = zero
        if mom_rows:
            logits = tasks.head_logits(self.store, "mom", concat(mom_rows, axis=0))
            l_mom = tasks.mom_loss(logits, mom_labels)
        else:
            l_mom = zero

        l_lpm = self._lpm_batch(corpus, items, plans, states) if cfg.with_knowledge else zero
        l_total = add(add(l_mlm, l_mom), l_lpm)
        return PretrainBatchLoss(l_mlm=l_mlm, l_mom=l_mom, l_lpm=l_lpm, l_total=l_total)

    def _lpm_batch(self, corpus, items, plans, states) -> Tensor:
        cfg = self.cfg
        entity_cache: dict = {}

        def entity_feature(entity_id: int) -> Tensor:
            if entity_id not in entity_cache:
                entity_cache[entity_id] = encoders.encode_entity_surface(
                    self.store, cfg, corpus, entity_id
                )
            return entity_cache[entity_id]

        per_item = []
        for item, plan in zip(items, plans):
            state = states[item.id]
            surface = state.surface
            if len(surface) == 0:
                per_item.append(constant(np.zeros((), dtype=self.store.dtype)))
                continue
            pos_scores, neg_scores = [], []
            for x in range(len(surface)):
                p_x, v_x = surface.p[x], surface.v[x]
                pos_scores.append(tasks.transe_score(state.c_star, p_x, v_x))
                negs = []
                for negative in plan.negatives[x]:
                    if negative.kind == "tail":
                        negs.append(
                            tasks.transe_score(state.c_star, p_x, entity_feature(negative.replacement))
                        )
                    else:
                        negs.append(
                            tasks.transe_score(states[negative.replacement].c_star, p_x, v_x)
                        )
                neg_scores.append(negs)
            per_item.append(tasks.lpm_loss(pos_scores, neg_scores, margin=cfg.margin))

        total = per_item[0]
        for term in per_item[1:]:
            total = add(total, term)
        return mul(total, 1.0 / len(per_item))

    # -- finetuning forwards --------------------------------------------------

    def classify(self, item: Item, corpus: Corpus, **kwargs) -> Tensor:
        state = self.item_state(item, corpus, **kwargs)
        w = self.store.get(f"{tasks.HEADS_PREFIX}.item_cls.w")
        b = self.store.get(f"{tasks.HEADS_PREFIX}.item_cls.b")
        return tasks.classify_item(state.c_star, w, b)

    def align(self, item0: Item, item1: Item, corpus: Corpus, **kwargs) -> Tensor:
        kwargs0 = dict(kwargs)
        kwargs1 = dict(kwargs)
        if kwargs.get("iffm_seed") is not None:
            kwargs1["iffm_seed"] = kwargs["iffm_seed"] + 1
        s0 = self.item_state(item0, corpus, **kwargs0)
        s1 = self.item_state(item1, corpus, **kwargs1)
        w = self.store.get(f"{tasks.HEADS_PREFIX}.alignment.w")
        b = self.store.get(f"{tasks.HEADS_PREFIX}.alignment.b")
        return tasks.align_products(s0.c_star, s1.c_star, w, b)

    def qa_input_tokens(self, item: Item, question, sep_id: int) -> list:
        """Title truncated to fit, then [SEP], then the question (never cut)."""
        question = list(question)
        room = self.cfg.m_text - len(question) - 1
        if room < 0:
            raise ValueError(f"question of {len(question)} tokens exceeds m_text={self.cfg.m_text}")
        return list(item.title[:room]) + [sep_id] + question

    def answer_question(self, item: Item, corpus: Corpus, example, **kwargs) -> Tensor:
        """Probabilities over the candidate answer set for one QA example."""
        triples = [t for i, t in enumerate(item.triples) if i != example.removed_triple_index]
        modified = replace_item(item, triples=triples)
        text = self.qa_input_tokens(modified, example.question, corpus.sep_id)
        state = self.item_state(modified, corpus, title_tokens=text, **kwargs)
        return softmax(tasks.head_logits(self.store, "qa", state.c_star), axis=-1)
