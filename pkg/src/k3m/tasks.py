"""Pretraining losses (masked language / object modeling, link prediction),
finetuning heads, ranked-answer metrics, and finetuning dataset construction.

Loss conventions: cross-entropies are means over predicted positions; the
link-prediction hinge averages over each positive's negatives, then over the
item's positives, then weights items equally across a batch.  The total
pretraining loss is the plain sum of the three task losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_model import Corpus, QUESTION_WORDS
from .nn.params import ParamStore, trunc_normal
from .nn.tensor import (
    Tensor,
    add,
    concat,
    constant,
    matmul,
    mul,
    relu,
    softmax,
    sub,
    tabs,
    texp,
    tlog,
    tmean,
    tsum,
)

HEADS_PREFIX = "heads"


# ---------------------------------------------------------------------------
# Cross-entropy heads
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows, computed via a detached-max log-sum-exp."""
    labels = np.asarray(labels, dtype=np.intp)
    n, width = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"{n} logit rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ValueError(f"label out of range for {width} classes")

    row_max = constant(logits.data.max(axis=-1, keepdims=True))
    shifted = sub(logits, row_max)
    lse = add(tlog(tsum(texp(shifted), axis=-1, keepdims=True)), row_max)
    onehot = np.zeros((n, width), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = tsum(mul(logits, constant(onehot)), axis=-1, keepdims=True)
    return tmean(sub(lse, picked))


def mlm_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of token predictions at the masked positions."""
    return cross_entropy(logits, labels)


def mom_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of object-class predictions at the masked positions."""
    return cross_entropy(logits, labels)


def init_linear_head(store: ParamStore, name: str, d_in: int, d_out: int, rng) -> None:
    store.create(f"{HEADS_PREFIX}.{name}.w", trunc_normal(rng, (d_in, d_out)))
    store.create(f"{HEADS_PREFIX}.{name}.b", np.zeros(d_out))


def head_logits(store: ParamStore, name: str, features: Tensor) -> Tensor:
    return add(
        matmul(features, store.get(f"{HEADS_PREFIX}.{name}.w")),
        store.get(f"{HEADS_PREFIX}.{name}.b"),
    )


# ---------------------------------------------------------------------------
# Link prediction
# ---------------------------------------------------------------------------


def transe_score(c_star: Tensor, p: Tensor, v: Tensor) -> Tensor:
    """L1 translation score ||c* + p - v||_1; zero means a perfect fit."""
    if c_star.shape != p.shape or p.shape != v.shape:
        raise ValueError(f"score operands differ: {c_star.shape}, {p.shape}, {v.shape}")
    return tsum(tabs(sub(add(c_star, p), v)))


def lpm_loss(pos_scores, neg_scores, margin: float = 1.0) -> Tensor:
    """Hinge loss for one item: mean over each positive's negatives of
    max(S - S_neg + margin, 0), averaged over the item's positives."""
    if len(pos_scores) != len(neg_scores):
        raise ValueError("one negative list required per positive score")
    if not pos_scores:
        return constant(0.0)
    per_positive = []
    for pos, negs in zip(pos_scores, neg_scores):
        if not negs:
            raise ValueError("a positive triple has no negatives")
        hinges = [relu(add(sub(pos, neg), margin)) for neg in negs]
        total = hinges[0]
        for h in hinges[1:]:
            total = add(total, h)
        per_positive.append(mul(total, 1.0 / len(hinges)))
    total = per_positive[0]
    for term in per_positive[1:]:
        total = add(total, term)
    return mul(total, 1.0 / len(per_positive))


@dataclass(frozen=True)
class Negative:
    kind: str  # "head" or "tail"
    replacement: int  # entity id for tail flips, batch item id for head flips


@dataclass
class NegativeSample:
    positive_index: int
    negatives: list  # of Negative


def sample_negatives(
    triple,
    n_entities: int,
    batch_item_ids,
    k: int = 3,
    seed: int = 0,
) -> list:
    """Corrupt a triple k times, flipping a fair coin between replacing the
    head (another batch item) and the tail (another entity) when both pools
    are nonempty; otherwise the nonempty pool is used."""
    tail_pool = [e for e in range(n_entities) if e != triple.tail]
    head_pool = [i for i in batch_item_ids if i != triple.head]
    if not tail_pool and not head_pool:
        raise ValueError("no replacement pool: need a second entity or batch item")

    rng = np.random.default_rng(seed)
    negatives = []
    for _ in range(k):
        if head_pool and tail_pool:
            flip_head = rng.random() < 0.5
        else:
            flip_head = bool(head_pool)
        if flip_head:
            negatives.append(Negative("head", head_pool[int(rng.integers(len(head_pool)))]))
        else:
            negatives.append(Negative("tail", tail_pool[int(rng.integers(len(tail_pool)))]))
    return negatives


# ---------------------------------------------------------------------------
# Finetuning heads
# ---------------------------------------------------------------------------


def classify_item(c_star: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Class probabilities softmax(W c* + beta), shape (1, n_classes)."""
    return softmax(add(matmul(c_star, w), b), axis=-1)


def item_cls_loss(probs: Tensor, label: int) -> Tensor:
    n_classes = probs.shape[-1]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    onehot = np.zeros((1, n_classes), dtype=probs.dtype)
    onehot[0, label] = 1.0
    return neg_log(tsum(mul(probs, constant(onehot))))


def align_products(c_star_0: Tensor, c_star_1: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """[not-aligned, aligned] probabilities from the ordered concatenation."""
    return softmax(add(matmul(concat([c_star_0, c_star_1], axis=1), w), b), axis=-1)


def alignment_loss(probs: Tensor, label: int) -> Tensor:
    """Binary cross-entropy: -(y log p1 + (1 - y) log p0)."""
    if label not in (0, 1):
        raise ValueError(f"alignment label must be 0 or 1, got {label}")
    pick = np.zeros((1, 2), dtype=probs.dtype)
    pick[0, label] = 1.0
    return neg_log(tsum(mul(probs, constant(pick))))


def neg_log(p: Tensor) -> Tensor:
    return mul(tlog(p), -1.0)


# ---------------------------------------------------------------------------
# Ranked answers
# ---------------------------------------------------------------------------


@dataclass
class RankResult:
    order: np.ndarray  # candidate ids, best first
    rank: int  # 1-based rank of the ground truth


def rank_result(scores, truth: int) -> RankResult:
    """Rank candidates by descending score, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= truth < n:
        raise ValueError(f"ground truth {truth} not among {n} candidates")
    order = np.lexsort((np.arange(n), -scores))
    rank = 1 + int(np.sum(scores > scores[truth])) + int(
        np.sum((scores == scores[truth]) & (np.arange(n) < truth))
    )
    return RankResult(order=order, rank=rank)


def rank_at_k(score_rows, truths, k: int) -> float:
    """Percentage of queries whose truth ranks in the top k."""
    truths = list(truths)
    if len(score_rows) != len(truths):
        raise ValueError("one truth per query required")
    if not truths:
        raise ValueError("rank_at_k of zero queries")
    hits = sum(1 for scores, truth in zip(score_rows, truths) if rank_result(scores, truth).rank <= k)
    return 100.0 * hits / len(truths)


# ---------------------------------------------------------------------------
# Finetuning dataset construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentPair:
    left: int
    right: int
    label: int  # 1 aligned, 0 not


@dataclass(frozen=True)
class QAExample:
    item_id: int
    removed_triple_index: int
    question: tuple  # token ids
    answer: int  # entity id


def build_alignment_pairs(corpus: Corpus, split_ids, seed: int, negatives_per_positive: int) -> list:
    """Aligned pairs are same-class item pairs within one split; negatives
    replace one side with a random other item of the split."""
    rng = np.random.default_rng(seed)
    split_ids = sorted(split_ids)
    by_class: dict = {}
    for item_id in split_ids:
        by_class.setdefault(corpus.item(item_id).latent_class, []).append(item_id)

    pairs = []
    for latent_class in sorted(by_class):
        ids = by_class[latent_class]
        perm = [ids[j] for j in rng.permutation(len(ids))]
        for left, right in zip(perm[::2], perm[1::2]):
            pairs.append(AlignmentPair(left, right, 1))
            for _ in range(negatives_per_positive):
                replace_left = rng.random() < 0.5
                while True:
                    other = split_ids[int(rng.integers(len(split_ids)))]
                    if replace_left and other != right and other != left:
                        pairs.append(AlignmentPair(other, right, 0))
                        break
                    if not replace_left and other != left and other != right:
                        pairs.append(AlignmentPair(left, other, 0))
                        break
    return pairs


def question_tokens(corpus: Corpus, relation_id: int) -> tuple:
    """Token ids for: what is the <relation surface> of this item ?"""
    what, is_, the, of, this, item, qmark = QUESTION_WORDS
    words_before = [what, is_, the]
    words_after = [of, this, item, qmark]
    ids = [corpus.token_vocab.id(w) for w in words_before]
    ids += corpus.tokenize_surface(corpus.relation_vocab.token(relation_id))
    ids += [corpus.token_vocab.id(w) for w in words_after]
    return tuple(ids)


def build_qa_examples(corpus: Corpus, split_ids, seed: int) -> list:
    """One question per item: remove a random triple, ask for its tail."""
    rng = np.random.default_rng(seed)
    examples = []
    for item_id in sorted(split_ids):
        item = corpus.item(item_id)
        if not item.triples:
            continue
        idx = int(rng.integers(len(item.triples)))
        triple = item.triples[idx]
        examples.append(
            QAExample(
                item_id=item_id,
                removed_triple_index=idx,
                question=question_tokens(corpus, triple.relation),
                answer=triple.tail,
            )
        )
    return examples


def binary_f1(predictions, labels) -> float:
    """F1 of the positive class, in percent; 0 when undefined."""
    tp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(predictions, labels) if p == 0 and y == 1)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def uniform_loss_value(n: int) -> float:
    """Reference loss of a maximally uninformed classifier."""
    return math.log(n)
