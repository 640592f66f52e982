"""Experiment configuration: strict parsing of the JSON config file.

The file is a single JSON object with optional sections; unknown keys at any
level are rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json


class ConfigError(ValueError):
    """Invalid configuration content (bad value, unknown key, bad range)."""


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def dataclass_from_dict(cls, data: dict, section: str):
    """Build a dataclass from a dict, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(section, data, fields)
    coerced = dict(data)
    for name, value in coerced.items():
        if isinstance(value, list) and isinstance(fields[name].default, tuple):
            coerced[name] = tuple(value)
    try:
        return cls(**coerced)
    except TypeError as e:
        raise ConfigError(f"bad {section} section: {e}") from None


TOP_LEVEL_KEYS = (
    "gen",
    "model",
    "pretrain",
    "finetune",
    "sweep",
    "task",
    "seeds",
    "corpus",
    "checkpoint",
    "manifest",
    "split",
    "variant",
)

SWEEP_KEYS = ("kinds", "ratios")

DEFAULT_SWEEP_RATIOS = (0, 20, 50, 80, 100)


class ExperimentConfig:
    """Validated view of the experiment config file."""

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        _check_keys("config", raw, TOP_LEVEL_KEYS)
        self.raw = raw
        sweep = raw.get("sweep", {})
        if not isinstance(sweep, dict):
            raise ConfigError("sweep section must be an object")
        _check_keys("sweep", sweep, SWEEP_KEYS)
        self.sweep_kinds = list(sweep.get("kinds", []))
        self.sweep_ratios = list(sweep.get("ratios", DEFAULT_SWEEP_RATIOS))
        from .corruption import KINDS

        for kind in self.sweep_kinds:
            if kind not in KINDS:
                raise ConfigError(f"unknown corruption kind in sweep: {kind!r}")
        for ratio in self.sweep_ratios:
            if not isinstance(ratio, (int, float)) or not 0 <= ratio <= 100:
                raise ConfigError(f"sweep ratio out of range: {ratio!r}")

        self.task = raw.get("task")
        self.seeds = raw.get("seeds", [0])
        if not isinstance(self.seeds, list) or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a list of integers")
        self.corpus_path = raw.get("corpus")
        self.checkpoint_path = raw.get("checkpoint")
        self.manifest_path = raw.get("manifest")
        self.split_path = raw.get("split")
        self.variant = raw.get("variant")

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"{name} section must be an object")
        return value

    def gen_config(self):
        from .data_model import GenConfig

        cfg = dataclass_from_dict(GenConfig, self.section("gen"), "gen")
        cfg.validate()
        return cfg

    def model_overrides(self) -> dict:
        from .model import ModelConfig

        data = self.section("model")
        _check_keys("model", data, [f.name for f in dataclasses.fields(ModelConfig)])
        return data

    def pretrain_config(self):
        from .trainer import PretrainConfig

        return dataclass_from_dict(PretrainConfig, self.section("pretrain"), "pretrain")

    def finetune_config(self):
        from .trainer import FinetuneConfig

        return dataclass_from_dict(FinetuneConfig, self.section("finetune"), "finetune")


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from None
    return ExperimentConfig(raw)
