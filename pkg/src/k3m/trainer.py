"""Optimization loop: seeded batching, Adam with warmup + linear decay,
gradient clipping, checkpointing, and the pretrain -> finetune pipeline.

Single-worker runs are bit-reproducible: every piece of randomness (batch
order, masking, negatives, fusion draws) derives from the run seed through
explicit seed sequences, and all arithmetic is plain numpy.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tasks
from .corruption import CorruptionManifest, CorruptionSetting, SplitAssignment, apply_corruption
from .corruption import balanced_split
from .data_model import Corpus, build_knowledge_text
from .encoders import mask_objects, mask_tokens
from .model import ItemPlan, K3M, ModelConfig
from .nn.params import ParamStore, load_checkpoint, save_checkpoint
from .nn.tensor import add, backward, mul

FINETUNE_TASKS = ("item_cls", "alignment", "qa")
DEFAULT_EPOCHS = {"item_cls": 4, "alignment": 4, "qa": 6}
PRIMARY_METRIC = {"item_cls": "accuracy", "alignment": "f1", "qa": "rank@10"}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to base_lr at warmup_steps, then linear decay to zero."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")

    def lr(self, step: int) -> float:
        if step >= self.total_steps:
            return 0.0
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        return self.base_lr * (self.total_steps - step) / (self.total_steps - self.warmup_steps)


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(store.get(name).data) for name in store.names()}
        self.v = {name: np.zeros_like(store.get(name).data) for name in store.names()}

    def ensure(self, store: ParamStore) -> None:
        """Register accumulators for parameters created after construction."""
        for name in store.names():
            if name not in self.m:
                self.m[name] = np.zeros_like(store.get(name).data)
                self.v[name] = np.zeros_like(store.get(name).data)


def adam_step(store: ParamStore, state: AdamState, lr: float) -> None:
    """Textbook Adam update with bias correction, applied in place."""
    state.ensure(store)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in store.names():
        g = store.grad(name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        store.get(name).data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    total = 0.0
    for name in store.names():
        g = store.grad(name)
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for name in store.names():
            t = store.get(name)
            if t.grad is not None:
                t.grad *= scale
    return norm


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 2
    batch_size: int = 8
    base_lr: float = 3e-4
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    mask_ratio: float = 0.15


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 0  # 0 means the per-task default
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    neg_pairs_train: int = 3
    neg_pairs_eval: int = 1


def _child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def _make_schedule(cfg, total_steps: int) -> Schedule:
    warmup = min(int(round(cfg.warmup_frac * total_steps)), total_steps - 1)
    return Schedule(base_lr=cfg.base_lr, warmup_steps=max(warmup, 0), total_steps=total_steps)


def _check_finite(values: dict, step: int) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingError(f"{name} is {value} at step {step}; aborting")


def build_step_plans(model: K3M, corpus: Corpus, items, rng: np.random.Generator,
                     mask_ratio: float) -> list:
    """Freeze all per-step randomness (masks, negatives, fusion draws)."""
    cfg = model.cfg
    batch_ids = [item.id for item in items]
    plans = []
    for item in items:
        masked_title = mask_tokens(item.title, corpus, mask_ratio, seed=_child_seed(rng))
        masked_objects = mask_objects(item.objects, mask_ratio, seed=_child_seed(rng))
        negatives = []
        if cfg.with_knowledge:
            kt = build_knowledge_text(item, corpus, max_tokens=cfg.m_know)
            for x in range(len(kt.spans)):
                negatives.append(
                    tasks.sample_negatives(
                        item.triples[x], cfg.n_entities, batch_ids,
                        k=cfg.n_negatives, seed=_child_seed(rng),
                    )
                )
        plans.append(
            ItemPlan(
                masked_title=masked_title,
                masked_objects=masked_objects,
                negatives=negatives,
                iffm_seed=_child_seed(rng),
            )
        )
    return plans


def _batches(order, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def pretrain(
    corpus: Corpus,
    model_cfg: ModelConfig,
    cfg: PretrainConfig,
    seed: int,
    out_dir=None,
) -> tuple[K3M, list]:
    """Train the three pretraining tasks jointly; returns model and history."""
    model = K3M(model_cfg, seed=seed)
    order_rng = np.random.default_rng([seed, 1])
    plan_rng = np.random.default_rng([seed, 2])

    n = len(corpus.items)
    if n == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    schedule = _make_schedule(cfg, cfg.epochs * steps_per_epoch)
    adam = AdamState(model.store)

    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = order_rng.permutation(n)
        for batch_idx in _batches(order, cfg.batch_size):
            items = [corpus.items[i] for i in batch_idx]
            plans = build_step_plans(model, corpus, items, plan_rng, cfg.mask_ratio)
            losses = model.pretrain_batch(corpus, items, plans)
            values = losses.values()
            _check_finite(values, step)

            model.store.zero_grad()
            backward(losses.l_total)
            clip_gradients(model.store, cfg.clip_norm)
            lr = schedule.lr(step)
            adam_step(model.store, adam, lr)
            history.append({"step": step, **values, "lr": lr})
            step += 1

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_jsonl(os.path.join(out_dir, "loss_history.jsonl"), history)
    return model, history


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    """Per-split finetuning examples and head geometry."""

    task: str
    head_out: int
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def examples(self, split: str) -> list:
        return getattr(self, split)


def build_task_data(task: str, corpus: Corpus, split: SplitAssignment, seed: int,
                    cfg: FinetuneConfig) -> TaskData:
    if task not in FINETUNE_TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {FINETUNE_TASKS}")
    classes = corpus.classes()
    class_index = {latent: i for i, latent in enumerate(classes)}

    if task == "item_cls":
        data = TaskData(task=task, head_out=len(classes))
        for split_name in ("train", "dev", "test"):
            data.examples(split_name).extend(
                (item_id, class_index[corpus.item(item_id).latent_class])
                for item_id in split.ids(split_name)
            )
        return data

    if task == "alignment":
        data = TaskData(task=task, head_out=2)
        for split_name, n_neg in (
            ("train", cfg.neg_pairs_train),
            ("dev", cfg.neg_pairs_eval),
            ("test", cfg.neg_pairs_eval),
        ):
            pairs = tasks.build_alignment_pairs(
                corpus, split.ids(split_name), seed=seed, negatives_per_positive=n_neg
            )
            data.examples(split_name).extend(pairs)
        return data

    data = TaskData(task=task, head_out=len(corpus.entity_vocab))
    for split_name in ("train", "dev", "test"):
        data.examples(split_name).extend(
            tasks.build_qa_examples(corpus, split.ids(split_name), seed=seed)
        )
    return data


def _example_loss(model: K3M, task: str, corpus: Corpus, example, train_kwargs):
    if task == "item_cls":
        item_id, label = example
        probs = model.classify(corpus.item(item_id), corpus, **train_kwargs)
        return tasks.item_cls_loss(probs, label)
    if task == "alignment":
        probs = model.align(corpus.item(example.left), corpus.item(example.right),
                            corpus, **train_kwargs)
        return tasks.alignment_loss(probs, example.label)
    probs = model.answer_question(corpus.item(example.item_id), corpus, example, **train_kwargs)
    return tasks.item_cls_loss(probs, example.answer)


def evaluate_task(model: K3M, task: str, corpus: Corpus, examples) -> dict:
    """Deterministic eval-mode metrics for one split."""
    if not examples:
        return {}
    if task == "item_cls":
        hits = 0
        for item_id, label in examples:
            probs = model.classify(corpus.item(item_id), corpus)
            hits += int(np.argmax(probs.data) == label)
        return {"accuracy": 100.0 * hits / len(examples)}
    if task == "alignment":
        predictions, labels = [], []
        for pair in examples:
            probs = model.align(corpus.item(pair.left), corpus.item(pair.right), corpus)
            predictions.append(int(np.argmax(probs.data)))
            labels.append(pair.label)
        return {"f1": tasks.binary_f1(predictions, labels)}
    rows, truths = [], []
    for example in examples:
        probs = model.answer_question(corpus.item(example.item_id), corpus, example)
        rows.append(np.array(probs.data).reshape(-1))
        truths.append(example.answer)
    return {f"rank@{k}": tasks.rank_at_k(rows, truths, k) for k in (1, 3, 10)}


def finetune(
    pretrained: K3M,
    task: str,
    corpus: Corpus,
    split: SplitAssignment,
    cfg: FinetuneConfig,
    seed: int,
    setting: dict | None = None,
    out_path=None,
) -> tuple[K3M, list]:
    """Attach a task head and update the full model; the pretrained model is
    left untouched.  Returns the finetuned model and its metric rows."""
    model = K3M(pretrained.cfg, store=pretrained.store.astype(pretrained.store.dtype))
    data = build_task_data(task, corpus, split, seed, cfg)
    model.attach_head(task, data.head_out, seed=seed)

    epochs = cfg.epochs if cfg.epochs > 0 else DEFAULT_EPOCHS[task]
    order_rng = np.random.default_rng([seed, 11])
    iffm_rng = np.random.default_rng([seed, 12])
    n = len(data.train)
    if n == 0:
        raise ValueError(f"no training examples for task {task!r}")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    schedule = _make_schedule(cfg, epochs * steps_per_epoch)
    adam = AdamState(model.store)

    setting = setting or {"kind": "none", "ratio": 0}
    variant = model.cfg.variant_label()
    metrics = []

    def record(split_name: str, step: int) -> None:
        results = evaluate_task(model, task, corpus, data.examples(split_name))
        for metric_name, value in sorted(results.items()):
            metrics.append(
                {
                    "task": task,
                    "setting": dict(setting),
                    "split": split_name,
                    "metric_name": metric_name,
                    "value": value,
                    "seed": seed,
                    "step": step,
                    "variant": variant,
                }
            )

    step = 0
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for batch_idx in _batches(order, cfg.batch_size):
            train_kwargs = {"mode": "train"}
            losses = []
            for i in batch_idx:
                kwargs = dict(train_kwargs, iffm_seed=_child_seed(iffm_rng))
                losses.append(_example_loss(model, task, corpus, data.train[i], kwargs))
            total = losses[0]
            for term in losses[1:]:
                total = add(total, term)
            loss = mul(total, 1.0 / len(losses))
            _check_finite({"loss": loss.item()}, step)

            model.store.zero_grad()
            backward(loss)
            clip_gradients(model.store, cfg.clip_norm)
            adam_step(model.store, adam, schedule.lr(step))
            step += 1
        record("dev", step)
    record("test", step)

    if out_path is not None:
        write_jsonl(out_path, metrics, append=True)
    return model, metrics


# ---------------------------------------------------------------------------
# Pipeline and persistence helpers
# ---------------------------------------------------------------------------


def save_model(model: K3M, path) -> None:
    save_checkpoint(model.store, path, meta={"model_config": model.cfg.to_dict()})


def load_model(path) -> K3M:
    store, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    if np.dtype(cfg.dtype) != store.dtype:
        store = store.astype(np.dtype(cfg.dtype))
    return K3M(cfg, store=store)


def write_jsonl(path, rows, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def corruption_run(
    base_corpus: Corpus,
    pretrained: K3M,
    task: str,
    setting: CorruptionSetting,
    cfg: FinetuneConfig,
    seed: int,
) -> tuple[K3M, list]:
    """Corrupt, split, finetune, and evaluate under one corruption setting."""
    corrupted, manifest = apply_corruption(base_corpus, setting, seed=seed)
    split = balanced_split(corrupted, manifest, seed=seed)
    return finetune(
        pretrained, task, corrupted, split, cfg, seed,
        setting={"kind": setting.kind, "ratio": setting.ratio},
    )


def test_metric(metrics: list, metric_name: str) -> float:
    for row in metrics:
        if row["split"] == "test" and row["metric_name"] == metric_name:
            return row["value"]
    raise KeyError(f"no test row with metric {metric_name!r}")
