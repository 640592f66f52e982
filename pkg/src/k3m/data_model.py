"""Product data model, synthetic corpus generation, and corpus file I/O.

A corpus is a list of items plus four vocabularies (title tokens, relations,
tail entities, object classes).  Each item carries a title token sequence, an
object sequence standing in for its image (detector-style features, boxes,
class labels), and a set of knowledge triples sharing the item as head.

The corpus file is JSON lines: a header line with the vocabularies, then one
item per line.  Floats serialize through ``json`` (shortest round-trip repr),
so write-then-read is an exact structural identity.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

CORPUS_VERSION = 1

PAD, MASK, SEP, CLS = "[PAD]", "[MASK]", "[SEP]", "[CLS]"
SPECIAL_TOKENS = (PAD, MASK, SEP, CLS)

# Words the question templates draw on; always present in generated vocabs.
QUESTION_WORDS = ("what", "is", "the", "of", "this", "item", "?")

CATEGORY_RELATION = "category"


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; the message names the line."""


class Vocab:
    """Immutable string <-> dense-id map."""

    def __init__(self, tokens):
        self._tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token(self, i: int) -> str:
        return self._tokens[i]

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def __iter__(self):
        return iter(self._tokens)

    @property
    def tokens(self):
        return self._tokens

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._tokens == other._tokens


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass
class ObjectSequence:
    """Detected-object surrogate: per object a feature vector, a normalized
    (x1, y1, x2, y2, area) box, and an object-class label."""

    features: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @staticmethod
    def empty() -> "ObjectSequence":
        return ObjectSequence([], [], [])

    def validate(self, d_obj: int, n_classes: int) -> None:
        if not (len(self.features) == len(self.boxes) == len(self.labels)):
            raise ValueError("object sequence lists have unequal lengths")
        for feat in self.features:
            if len(feat) != d_obj:
                raise ValueError(f"object feature has dim {len(feat)}, expected {d_obj}")
        for box in self.boxes:
            if len(box) != 5:
                raise ValueError("object box must have 5 coordinates")
            x1, y1, x2, y2, area = box
            if not (0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1 and 0 <= area <= 1):
                raise ValueError(f"object box out of range: {box}")
        for label in self.labels:
            if not 0 <= label < n_classes:
                raise ValueError(f"object label {label} outside vocabulary")


@dataclass
class Item:
    id: int
    title: list  # token ids; empty list encodes a missing title
    objects: ObjectSequence  # empty sequence encodes a missing image
    triples: list  # of Triple, all with head == id
    latent_class: int


@dataclass
class KnowledgeText:
    """Relations and tail entities stitched into one token sequence.

    ``spans[x]`` holds the half-open (start, end) token ranges of triple x's
    relation and tail, in the item's triple order.
    """

    tokens: list
    spans: list  # of ((rel_start, rel_end), (tail_start, tail_end))


class Corpus:
    """Items plus vocabularies.  Immutable after construction."""

    def __init__(
        self,
        items,
        token_vocab: Vocab,
        relation_vocab: Vocab,
        entity_vocab: Vocab,
        object_class_vocab: Vocab,
        d_obj: int,
        subword_splits: dict | None = None,
    ):
        self.items = list(items)
        self.token_vocab = token_vocab
        self.relation_vocab = relation_vocab
        self.entity_vocab = entity_vocab
        self.object_class_vocab = object_class_vocab
        self.d_obj = d_obj
        self.subword_splits = dict(subword_splits or {})
        for tok in SPECIAL_TOKENS:
            if tok not in token_vocab:
                raise ValueError(f"special token {tok} missing from token vocabulary")
        self._by_id = {item.id: item for item in self.items}
        if len(self._by_id) != len(self.items):
            raise ValueError("duplicate item ids")

    # -- special token ids -------------------------------------------------
    @property
    def pad_id(self):
        return self.token_vocab.id(PAD)

    @property
    def mask_id(self):
        return self.token_vocab.id(MASK)

    @property
    def sep_id(self):
        return self.token_vocab.id(SEP)

    @property
    def cls_id(self):
        return self.token_vocab.id(CLS)

    def regular_token_ids(self) -> list:
        special = {self.token_vocab.id(t) for t in SPECIAL_TOKENS}
        return [i for i in range(len(self.token_vocab)) if i not in special]

    # -- lookups ------------------------------------------------------------
    def item(self, item_id: int) -> Item:
        return self._by_id[item_id]

    def item_ids(self) -> list:
        return [item.id for item in self.items]

    def classes(self) -> list:
        return sorted({item.latent_class for item in self.items})

    def items_by_class(self) -> dict:
        grouped: dict = {}
        for item in self.items:
            grouped.setdefault(item.latent_class, []).append(item.id)
        return grouped

    def tokenize_surface(self, text: str) -> list:
        """Whitespace tokenization with optional deterministic subword splits."""
        ids = []
        for word in text.split():
            for piece in self.subword_splits.get(word, (word,)):
                ids.append(self.token_vocab.id(piece))
        return ids

    def n_triples(self) -> int:
        return sum(len(item.triples) for item in self.items)

    def validate(self) -> None:
        for item in self.items:
            for tok in item.title:
                if not 0 <= tok < len(self.token_vocab):
                    raise ValueError(f"item {item.id}: title token {tok} out of range")
            item.objects.validate(self.d_obj, len(self.object_class_vocab))
            for t in item.triples:
                if t.head != item.id:
                    raise ValueError(f"item {item.id}: triple head {t.head} differs from item id")
                if not 0 <= t.relation < len(self.relation_vocab):
                    raise ValueError(f"item {item.id}: relation {t.relation} out of range")
                if not 0 <= t.tail < len(self.entity_vocab):
                    raise ValueError(f"item {item.id}: tail {t.tail} out of range")

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.items == other.items
            and self.token_vocab == other.token_vocab
            and self.relation_vocab == other.relation_vocab
            and self.entity_vocab == other.entity_vocab
            and self.object_class_vocab == other.object_class_vocab
            and self.d_obj == other.d_obj
            and self.subword_splits == other.subword_splits
        )


def build_knowledge_text(item: Item, corpus: Corpus, max_tokens: int = 80) -> KnowledgeText:
    """Stitch each triple's relation then tail surface into one token sequence.

    Truncation happens only at triple boundaries: a triple whose tokens would
    cross ``max_tokens`` is dropped along with everything after it.
    """
    tokens: list = []
    spans: list = []
    for t in item.triples:
        rel_tokens = corpus.tokenize_surface(corpus.relation_vocab.token(t.relation))
        tail_tokens = corpus.tokenize_surface(corpus.entity_vocab.token(t.tail))
        start = len(tokens)
        end = start + len(rel_tokens) + len(tail_tokens)
        if end > max_tokens:
            break
        spans.append(((start, start + len(rel_tokens)), (start + len(rel_tokens), end)))
        tokens.extend(rel_tokens)
        tokens.extend(tail_tokens)
    return KnowledgeText(tokens=tokens, spans=spans)


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic product corpus.

    ``class_signal`` is the fraction of title tokens, object labels, and
    non-category triples that carry class information.  Every item always
    gets one ``category`` triple whose tail names its latent class, so the
    class stays recoverable from knowledge alone.  Object-label pools of
    different classes overlap on purpose: images identify the class only
    partially even at full signal.
    """

    n_items: int
    n_classes: int
    n_relations: int = 4
    n_tail_entities_per_relation: int = 6
    d_obj: int = 16
    objects_per_item_range: tuple = (2, 6)
    triples_per_item_range: tuple = (2, 4)
    class_signal: float = 1.0
    n_object_classes: int = 12
    labels_per_class: int = 3
    title_len_range: tuple = (4, 10)
    tokens_per_class: int = 6
    n_noise_tokens: int = 30
    feature_scale: float = 2.0
    feature_noise: float = 1.0

    def validate(self) -> None:
        from .config import ConfigError

        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.n_items < self.n_classes:
            raise ConfigError(f"n_items ({self.n_items}) < n_classes ({self.n_classes})")
        if self.n_relations < 1:
            raise ConfigError("n_relations must be at least 1")
        if self.n_tail_entities_per_relation < 1:
            raise ConfigError("n_tail_entities_per_relation must be at least 1")
        if self.d_obj < 1:
            raise ConfigError("d_obj must be at least 1")
        for name in ("objects_per_item_range", "triples_per_item_range", "title_len_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
        if self.triples_per_item_range[0] < 1:
            raise ConfigError("triples_per_item_range minimum is 1 (category triple)")
        if not 0.0 <= self.class_signal <= 1.0:
            raise ConfigError("class_signal must be in [0, 1]")
        if self.n_object_classes < 1 or not 1 <= self.labels_per_class <= 6:
            raise ConfigError("n_object_classes must be positive and labels_per_class in [1, 6]")


_POOL_OFFSETS = (0, 1, 5, 8, 13, 21)


def _class_label_pool(k: int, cfg: GenConfig) -> list:
    c = cfg.n_object_classes
    return [(2 * k + offset) % c for offset in _POOL_OFFSETS[: cfg.labels_per_class]]


def generate_synthetic_corpus(cfg: GenConfig, seed: int) -> Corpus:
    """Deterministic synthetic corpus; equal (cfg, seed) give equal bytes."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    relations = [CATEGORY_RELATION] + [f"prop{r}" for r in range(1, cfg.n_relations)]
    class_entities = [f"class{k}" for k in range(cfg.n_classes)]
    entity_surfaces = list(class_entities)
    tail_pools = {0: list(range(cfg.n_classes))}
    for r in range(1, cfg.n_relations):
        pool = []
        for j in range(cfg.n_tail_entities_per_relation):
            pool.append(len(entity_surfaces))
            entity_surfaces.append(f"val{r}_{j}")
        tail_pools[r] = pool

    class_tokens = [
        [f"c{k}w{j}" for j in range(cfg.tokens_per_class)] for k in range(cfg.n_classes)
    ]
    noise_tokens = [f"noise{j}" for j in range(cfg.n_noise_tokens)]
    token_list = list(SPECIAL_TOKENS) + [t for toks in class_tokens for t in toks]
    token_list += noise_tokens + list(QUESTION_WORDS) + relations + entity_surfaces
    token_vocab = Vocab(token_list)

    object_class_vocab = Vocab([f"obj{j}" for j in range(cfg.n_object_classes)])
    centers = rng.standard_normal((cfg.n_object_classes, cfg.d_obj)) * cfg.feature_scale

    items = []
    for i in range(cfg.n_items):
        k = i % cfg.n_classes

        lo, hi = cfg.title_len_range
        title_len = int(rng.integers(lo, hi + 1))
        title = []
        for _ in range(title_len):
            if rng.random() < cfg.class_signal:
                title.append(token_vocab.id(class_tokens[k][int(rng.integers(cfg.tokens_per_class))]))
            else:
                title.append(token_vocab.id(noise_tokens[int(rng.integers(cfg.n_noise_tokens))]))

        lo, hi = cfg.objects_per_item_range
        n_obj = int(rng.integers(lo, hi + 1))
        pool = _class_label_pool(k, cfg)
        features, boxes, labels = [], [], []
        for _ in range(n_obj):
            if rng.random() < cfg.class_signal:
                label = pool[int(rng.integers(len(pool)))]
            else:
                label = int(rng.integers(cfg.n_object_classes))
            feat = centers[label] + rng.standard_normal(cfg.d_obj) * cfg.feature_noise
            x1, y1 = rng.uniform(0.0, 0.5, size=2)
            w, h = rng.uniform(0.1, 0.5, size=2)
            box = [float(x1), float(y1), float(x1 + w), float(y1 + h), float(w * h)]
            features.append([float(v) for v in feat])
            boxes.append(box)
            labels.append(int(label))
        objects = ObjectSequence(features, boxes, labels)

        lo, hi = cfg.triples_per_item_range
        n_triples = int(rng.integers(lo, hi + 1))
        triples = [Triple(head=i, relation=0, tail=tail_pools[0][k])]
        for _ in range(n_triples - 1):
            if cfg.n_relations == 1:
                break
            r = int(rng.integers(1, cfg.n_relations))
            pool_r = tail_pools[r]
            if rng.random() < cfg.class_signal:
                tail = pool_r[k % len(pool_r)]
            else:
                tail = pool_r[int(rng.integers(len(pool_r)))]
            triples.append(Triple(head=i, relation=r, tail=tail))

        items.append(Item(id=i, title=title, objects=objects, triples=triples, latent_class=k))

    return Corpus(
        items=items,
        token_vocab=token_vocab,
        relation_vocab=Vocab(relations),
        entity_vocab=Vocab(entity_surfaces),
        object_class_vocab=object_class_vocab,
        d_obj=cfg.d_obj,
    )


# ---------------------------------------------------------------------------
# Corpus file I/O
# ---------------------------------------------------------------------------


def _item_record(item: Item) -> dict:
    return {
        "id": item.id,
        "title": list(item.title),
        "objects": {
            "features": item.objects.features,
            "boxes": item.objects.boxes,
            "labels": item.objects.labels,
        },
        "triples": [[t.relation, t.tail] for t in item.triples],
        "class": item.latent_class,
    }


def write_corpus(corpus: Corpus, path) -> None:
    header = {
        "version": CORPUS_VERSION,
        "n_items": len(corpus.items),
        "d_obj": corpus.d_obj,
        "token_vocab": list(corpus.token_vocab.tokens),
        "relation_vocab": list(corpus.relation_vocab.tokens),
        "entity_vocab": list(corpus.entity_vocab.tokens),
        "object_class_vocab": list(corpus.object_class_vocab.tokens),
        "special_tokens": {t: corpus.token_vocab.id(t) for t in SPECIAL_TOKENS},
        "subword_splits": corpus.subword_splits,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for item in corpus.items:
            f.write(json.dumps(_item_record(item), sort_keys=True, separators=(",", ":")) + "\n")


def _parse_item(record: dict, line_no: int) -> Item:
    try:
        objects = ObjectSequence(
            features=record["objects"]["features"],
            boxes=record["objects"]["boxes"],
            labels=record["objects"]["labels"],
        )
        triples = [
            Triple(head=record["id"], relation=rel, tail=tail) for rel, tail in record["triples"]
        ]
        return Item(
            id=record["id"],
            title=list(record["title"]),
            objects=objects,
            triples=triples,
            latent_class=record["class"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(f"line {line_no}: bad item record ({e})") from None


def read_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CorpusFormatError("line 1: empty corpus file")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"line 1: invalid header ({e.msg})") from None
    if header.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(f"line 1: unsupported corpus version {header.get('version')!r}")
    for key in ("n_items", "d_obj", "token_vocab", "relation_vocab", "entity_vocab",
                "object_class_vocab"):
        if key not in header:
            raise CorpusFormatError(f"line 1: header missing {key!r}")

    items = []
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"line {line_no}: invalid JSON ({e.msg})") from None
        items.append(_parse_item(record, line_no))

    if len(items) != header["n_items"]:
        raise CorpusFormatError(
            f"line {len(lines)}: expected {header['n_items']} items, found {len(items)}"
        )

    corpus = Corpus(
        items=items,
        token_vocab=Vocab(header["token_vocab"]),
        relation_vocab=Vocab(header["relation_vocab"]),
        entity_vocab=Vocab(header["entity_vocab"]),
        object_class_vocab=Vocab(header["object_class_vocab"]),
        d_obj=header["d_obj"],
        subword_splits=header.get("subword_splits", {}),
    )
    try:
        corpus.validate()
    except ValueError as e:
        raise CorpusFormatError(f"line 1: inconsistent corpus ({e})") from None
    return corpus


def replace_item(item: Item, **changes) -> Item:
    """Copy an item with some fields swapped; lists are copied, not shared."""
    new = dataclasses.replace(item, **changes)
    new.title = list(new.title)
    new.triples = list(new.triples)
    new.objects = ObjectSequence(
        features=[list(f) for f in new.objects.features],
        boxes=[list(b) for b in new.objects.boxes],
        labels=list(new.objects.labels),
    )
    return new
