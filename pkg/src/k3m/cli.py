"""Command-line orchestration: k3m gen-data|corrupt|pretrain|finetune|eval|plot.

Every command echoes its effective configuration as one JSON line before
doing any work, so a run is reproducible from its own output.  Exit codes:
0 success, 1 usage or configuration error, 2 runtime failure.  K3M_THREADS
caps the worker count of the eval sweep.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError, load_experiment_config
from .corruption import CorruptionSetting, KINDS, apply_corruption, balanced_split
from .data_model import generate_synthetic_corpus, read_corpus, write_corpus
from .model import K3M, ModelConfig
from .plotting import emit_plots
from .trainer import (
    FINETUNE_TASKS,
    build_task_data,
    evaluate_task,
    finetune,
    load_model,
    pretrain,
    read_jsonl,
    save_model,
    write_jsonl,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo(command: str, args, extra: dict | None = None) -> None:
    payload = {"command": command, "seed": getattr(args, "seed", None), "out": getattr(args, "out", None)}
    if getattr(args, "config", None):
        payload["config"] = args.config
    if extra:
        payload.update(extra)
    print(json.dumps(payload, sort_keys=True))


def _load_config(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_experiment_config(args.config)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("K3M_THREADS", "1")))
    except ValueError:
        return 1


def cmd_gen_data(args) -> int:
    cfg = _load_config(args).gen_config()
    _echo("gen-data", args, {"gen": cfg.__dict__})
    corpus = generate_synthetic_corpus(cfg, seed=args.seed)
    write_corpus(corpus, args.out)
    print(f"items {len(corpus.items)}")
    print(f"triples {corpus.n_triples()}")
    return 0


def cmd_corrupt(args) -> int:
    if args.kind not in KINDS:
        raise UsageError(f"unknown corruption kind {args.kind!r}; expected one of {', '.join(KINDS)}")
    if not 0 <= args.ratio <= 100:
        raise UsageError(f"ratio must be in [0, 100], got {args.ratio}")
    _echo("corrupt", args, {"corpus": args.corpus, "kind": args.kind, "ratio": args.ratio})
    corpus = read_corpus(args.corpus)
    setting = CorruptionSetting(kind=args.kind, ratio=args.ratio)
    corrupted, manifest = apply_corruption(corpus, setting, seed=args.seed)
    split = balanced_split(corrupted, manifest, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_corpus(corrupted, os.path.join(args.out, "corpus.jsonl"))
    manifest.save(os.path.join(args.out, "manifest.jsonl"))
    split.save(os.path.join(args.out, "split.jsonl"))
    counts = manifest.counts()
    print(" ".join(f"{kind}={counts[kind]}" for kind in sorted(counts)))
    return 0


def _model_config(experiment, corpus) -> ModelConfig:
    return ModelConfig.for_corpus(corpus, **experiment.model_overrides())


def cmd_pretrain(args) -> int:
    experiment = _load_config(args)
    if not experiment.corpus_path:
        raise ConfigError("pretrain needs a 'corpus' path in the config")
    _echo("pretrain", args, {"corpus": experiment.corpus_path})
    corpus = read_corpus(experiment.corpus_path)
    model_cfg = _model_config(experiment, corpus)
    pre_cfg = experiment.pretrain_config()
    os.makedirs(args.out, exist_ok=True)
    model, history = pretrain(corpus, model_cfg, pre_cfg, seed=args.seed, out_dir=args.out)
    save_model(model, os.path.join(args.out, "checkpoint.k3m"))
    print(f"steps {len(history)}")
    if history:
        print(f"final_l_total {history[-1]['l_total']:.6f}")
    return 0


def cmd_finetune(args) -> int:
    experiment = _load_config(args)
    task = experiment.task
    if task not in FINETUNE_TASKS:
        raise ConfigError(f"task must be one of {FINETUNE_TASKS}, got {task!r}")
    for key, name in (("corpus", "corpus"), ("checkpoint", "checkpoint"), ("split", "split")):
        if not getattr(experiment, f"{key}_path" if key != "checkpoint" else "checkpoint_path"):
            raise ConfigError(f"finetune needs a {name!r} path in the config")
    _echo("finetune", args, {"task": task, "checkpoint": experiment.checkpoint_path})

    corpus = read_corpus(experiment.corpus_path)
    from .corruption import SplitAssignment

    split = SplitAssignment.load(experiment.split_path)
    model = load_model(experiment.checkpoint_path)
    fcfg = experiment.finetune_config()
    os.makedirs(args.out, exist_ok=True)
    tuned, metrics = finetune(
        model, task, corpus, split, fcfg, seed=args.seed,
        out_path=os.path.join(args.out, "metrics.jsonl"),
    )
    save_model(tuned, os.path.join(args.out, "checkpoint.k3m"))
    for row in metrics:
        if row["split"] == "test":
            print(f"test {row['metric_name']} {row['value']:.4f}")
    return 0


def cmd_eval(args) -> int:
    experiment = _load_config(args)
    task = experiment.task
    if task not in FINETUNE_TASKS:
        raise ConfigError(f"task must be one of {FINETUNE_TASKS}, got {task!r}")
    if not experiment.corpus_path or not experiment.checkpoint_path:
        raise ConfigError("eval needs 'corpus' and 'checkpoint' paths in the config")
    kinds = experiment.sweep_kinds or list(KINDS)
    ratios = experiment.sweep_ratios
    _echo("eval", args, {"task": task, "kinds": kinds, "ratios": ratios})

    corpus = read_corpus(experiment.corpus_path)
    model = load_model(experiment.checkpoint_path)
    fcfg = experiment.finetune_config()
    variant = experiment.variant or model.cfg.variant_label()

    def run_cell(cell):
        kind, ratio = cell
        setting = CorruptionSetting(kind=kind, ratio=ratio)
        corrupted, manifest = apply_corruption(corpus, setting, seed=args.seed)
        split = balanced_split(corrupted, manifest, seed=args.seed)
        data = build_task_data(task, corrupted, split, args.seed, fcfg)
        results = evaluate_task(model, task, corrupted, data.test)
        rows = []
        for metric_name, value in sorted(results.items()):
            rows.append(
                {
                    "task": task,
                    "setting": {"kind": kind, "ratio": ratio},
                    "split": "test",
                    "metric_name": metric_name,
                    "value": value,
                    "seed": args.seed,
                    "step": 0,
                    "variant": variant,
                }
            )
        return rows

    cells = [(kind, ratio) for kind in kinds for ratio in ratios]
    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_cell = list(pool.map(run_cell, cells))
    else:
        per_cell = [run_cell(cell) for cell in cells]

    rows = [row for cell_rows in per_cell for row in cell_rows]
    write_jsonl(args.out, rows, append=True)
    print(f"rows {len(rows)}")
    return 0


def cmd_plot(args) -> int:
    _echo("plot", args, {"metrics": args.metrics})
    rows = read_jsonl(args.metrics)
    if not rows:
        raise ValueError(f"metrics file {args.metrics} is empty")
    written = emit_plots(rows, args.out)
    for path in written:
        print(path)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="k3m", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("corrupt", help="apply a missing/noise setting")
    p.add_argument("--corpus", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_corrupt)

    p = sub.add_parser("pretrain", help="run the three pretraining tasks")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a task head")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a corruption sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("plot", help="emit CSV/SVG degradation curves")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
