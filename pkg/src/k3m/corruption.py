"""Modality missing/noise dataset transformations and the stratified split.

Seven corruption kinds, applied per class of size N at ratio rho (percent):

* TMR / IMR drop exactly floor(N * rho / 100) titles / images.
* MMR drops floor(N * rho / 200) images, then the same count of titles from
  the untouched remainder (the two groups are disjoint).
* TNR / INR / TINR replace exactly floor(N * rho / 100) titles / images /
  both with content copied from a uniformly random *different* item.
* MNR replaces floor(N * rho / 300) titles, then as many images from the
  remainder, then as many title+image pairs from what is left.

Counts use exact rational arithmetic, so no floating-point floor surprises.
Replacement content always comes from the original, uncorrupted corpus.  The
split is stratified by (class, action kind) at 7:1:2 with any remainder going
to train.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data_model import Corpus, ObjectSequence, replace_item

KINDS = ("TMR", "IMR", "MMR", "TNR", "INR", "TINR", "MNR")
ACTIONS = ("none", "drop_title", "drop_image", "replace_title", "replace_image", "replace_both")
SPLITS = ("train", "dev", "test")

_NOISE_KINDS = {"TNR", "INR", "TINR", "MNR"}


@dataclass(frozen=True)
class CorruptionSetting:
    kind: str
    ratio: float  # percent in [0, 100]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.ratio <= 100:
            raise ValueError(f"ratio must be in [0, 100], got {self.ratio}")


@dataclass(frozen=True)
class Action:
    kind: str  # one of ACTIONS
    title_source: int | None = None
    image_source: int | None = None


class CorruptionManifest:
    """Per-item record of the applied action, for auditing and replay."""

    def __init__(self, actions: dict):
        self.actions = dict(actions)

    def action(self, item_id: int) -> Action:
        return self.actions[item_id]

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        return isinstance(other, CorruptionManifest) and self.actions == other.actions

    def counts(self) -> dict:
        out = {kind: 0 for kind in ACTIONS}
        for action in self.actions.values():
            out[action.kind] += 1
        return out

    def counts_by_class(self, corpus: Corpus) -> dict:
        out: dict = {}
        for item in corpus.items:
            per = out.setdefault(item.latent_class, {kind: 0 for kind in ACTIONS})
            per[self.actions[item.id].kind] += 1
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for item_id in sorted(self.actions):
                a = self.actions[item_id]
                row = {"item_id": item_id, "action": a.kind}
                if a.title_source is not None:
                    row["title_source"] = a.title_source
                if a.image_source is not None:
                    row["image_source"] = a.image_source
                f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    @staticmethod
    def load(path) -> "CorruptionManifest":
        actions = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                row = json.loads(line)
                actions[row["item_id"]] = Action(
                    kind=row["action"],
                    title_source=row.get("title_source"),
                    image_source=row.get("image_source"),
                )
        return CorruptionManifest(actions)


class SplitAssignment:
    def __init__(self, assignment: dict):
        self.assignment = dict(assignment)

    def split(self, item_id: int) -> str:
        return self.assignment[item_id]

    def ids(self, split: str) -> list:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return sorted(i for i, s in self.assignment.items() if s == split)

    def __eq__(self, other):
        return isinstance(other, SplitAssignment) and self.assignment == other.assignment

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for item_id in sorted(self.assignment):
                row = {"item_id": item_id, "split": self.assignment[item_id]}
                f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    @staticmethod
    def load(path) -> "SplitAssignment":
        assignment = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                row = json.loads(line)
                assignment[row["item_id"]] = row["split"]
        return SplitAssignment(assignment)


def exact_count(n: int, ratio: float, divisor: int = 100) -> int:
    """floor(n * ratio / divisor) in exact rational arithmetic."""
    return int(n * Fraction(ratio) / divisor)


def _pick_source(rng: np.random.Generator, all_ids: list, exclude: int) -> int:
    while True:
        source = all_ids[int(rng.integers(len(all_ids)))]
        if source != exclude:
            return source


def apply_corruption(
    corpus: Corpus, setting: CorruptionSetting, seed: int
) -> tuple[Corpus, CorruptionManifest]:
    """Return a corrupted copy of the corpus plus the manifest of actions.

    The input corpus is never modified.  Deterministic under (corpus,
    setting, seed).
    """
    if setting.kind in _NOISE_KINDS and len(corpus.items) < 2:
        raise ValueError(f"{setting.kind} needs at least 2 items to sample replacements")

    rng = np.random.default_rng(seed)
    all_ids = corpus.item_ids()
    planned: dict = {}

    by_class = corpus.items_by_class()
    for latent_class in sorted(by_class):
        ids = by_class[latent_class]
        n = len(ids)
        perm = [ids[j] for j in rng.permutation(n)]
        if setting.kind in ("TMR", "IMR", "TNR", "INR", "TINR"):
            count = exact_count(n, setting.ratio)
            action = {
                "TMR": "drop_title",
                "IMR": "drop_image",
                "TNR": "replace_title",
                "INR": "replace_image",
                "TINR": "replace_both",
            }[setting.kind]
            for item_id in perm[:count]:
                planned[item_id] = action
        elif setting.kind == "MMR":
            half = exact_count(n, setting.ratio, divisor=200)
            for item_id in perm[:half]:
                planned[item_id] = "drop_image"
            for item_id in perm[half : 2 * half]:
                planned[item_id] = "drop_title"
        else:  # MNR
            third = exact_count(n, setting.ratio, divisor=300)
            for item_id in perm[:third]:
                planned[item_id] = "replace_title"
            for item_id in perm[third : 2 * third]:
                planned[item_id] = "replace_image"
            for item_id in perm[2 * third : 3 * third]:
                planned[item_id] = "replace_both"

    actions: dict = {}
    new_items = []
    for item in corpus.items:
        planned_kind = planned.get(item.id, "none")
        if planned_kind == "none":
            actions[item.id] = Action("none")
            new_items.append(item)
            continue
        if planned_kind == "drop_title":
            actions[item.id] = Action("drop_title")
            new_items.append(replace_item(item, title=[]))
        elif planned_kind == "drop_image":
            actions[item.id] = Action("drop_image")
            new_items.append(replace_item(item, objects=ObjectSequence.empty()))
        elif planned_kind == "replace_title":
            src = _pick_source(rng, all_ids, item.id)
            actions[item.id] = Action("replace_title", title_source=src)
            new_items.append(replace_item(item, title=list(corpus.item(src).title)))
        elif planned_kind == "replace_image":
            src = _pick_source(rng, all_ids, item.id)
            actions[item.id] = Action("replace_image", image_source=src)
            new_items.append(replace_item(item, objects=corpus.item(src).objects))
        else:  # replace_both, with independently sampled sources
            src_t = _pick_source(rng, all_ids, item.id)
            src_i = _pick_source(rng, all_ids, item.id)
            actions[item.id] = Action("replace_both", title_source=src_t, image_source=src_i)
            new_items.append(
                replace_item(
                    item, title=list(corpus.item(src_t).title), objects=corpus.item(src_i).objects
                )
            )

    corrupted = Corpus(
        items=new_items,
        token_vocab=corpus.token_vocab,
        relation_vocab=corpus.relation_vocab,
        entity_vocab=corpus.entity_vocab,
        object_class_vocab=corpus.object_class_vocab,
        d_obj=corpus.d_obj,
        subword_splits=corpus.subword_splits,
    )
    return corrupted, CorruptionManifest(actions)


def balanced_split(corpus: Corpus, manifest: CorruptionManifest, seed: int) -> SplitAssignment:
    """7:1:2 split, stratified by (class, action kind); remainder goes to train."""
    for item in corpus.items:
        if item.id not in manifest.actions:
            raise ValueError(f"manifest does not cover item {item.id}")

    cells: dict = {}
    for item in corpus.items:
        key = (item.latent_class, manifest.action(item.id).kind)
        cells.setdefault(key, []).append(item.id)

    rng = np.random.default_rng(seed)
    assignment: dict = {}
    for key in sorted(cells):
        ids = cells[key]
        n = len(ids)
        perm = [ids[j] for j in rng.permutation(n)]
        n_dev = n // 10
        n_test = (2 * n) // 10
        n_train = n - n_dev - n_test  # = floor(0.7 n) plus the remainder
        for item_id in perm[:n_train]:
            assignment[item_id] = "train"
        for item_id in perm[n_train : n_train + n_dev]:
            assignment[item_id] = "dev"
        for item_id in perm[n_train + n_dev :]:
            assignment[item_id] = "test"
    return SplitAssignment(assignment)
