"""Command-line entry point: run, ablate, gradcheck, export.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck_suite
from .config import ConfigError, ExperimentConfig, build_data, config_items, format_config, load_config
from .datasets import DatasetError, LabeledDataset, split_tasks
from .evaluation import EvaluationError, RunRecord, export_embeddings
from .numerics import CheckpointError
from .trainer import (
    ABLATIONS,
    EpochLog,
    TrainingError,
    classifier_for,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _prepare_out(path: Path, overwrite: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not overwrite:
        raise UsageError(f"output directory {path} is not empty; pass --overwrite to replace its contents")
    path.mkdir(parents=True, exist_ok=True)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _print_progress(log: EpochLog) -> None:
    print(log.line(), flush=True)


def _execute(cfg: ExperimentConfig, out: Path, ablation: str, quiet: bool) -> RunRecord:
    data = build_data(cfg.dataset)
    protocol = cfg.protocol.build()
    (out / "checkpoints").mkdir(exist_ok=True)
    # the stream is rebuilt inside run_experiment; the order is only needed for export
    class_order = [int(c) for c in split_tasks(data.train, data.test, protocol, cfg.train.seed).class_order]

    def on_phase(state, result):
        save_checkpoint(
            out / "checkpoints" / f"phase_{result.phase}.ckpt",
            state,
            cfg.model,
            {"ablation": ablation, "alpha": cfg.loss.alpha, "class_order": class_order},
        )
        if not quiet:
            print(f"phase={result.phase} classes={result.classes_seen} accuracy={result.accuracy:.2f}", flush=True)

    record = run_experiment(
        data.train,
        data.test,
        protocol,
        cfg.train_config(),
        cfg.model,
        ablation,
        selection=cfg.protocol.selection,
        progress=None if quiet else _print_progress,
        on_phase=on_phase,
        config_echo=config_items(cfg),
    )
    (out / "run_record.json").write_text(record.to_json() + "\n", encoding="utf-8")
    (out / "accuracy.csv").write_text(record.accuracy_csv(), encoding="utf-8")
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    return record


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _prepare_out(out, args.overwrite)
    record = _execute(cfg, out, cfg.ablation, args.quiet)
    print(f"done ablation={cfg.ablation} avg_incremental={record.avg_incremental:.2f} final={record.final_accuracy:.2f}")
    return EXIT_OK


ABLATION_HEADER = "ablation,avg_incremental,final_accuracy"


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _prepare_out(out, args.overwrite)
    rows = [ABLATION_HEADER]
    for ablation in ABLATIONS:
        sub = out / ablation
        sub.mkdir(exist_ok=True)
        record = _execute(cfg, sub, ablation, args.quiet)
        rows.append(f"{ablation},{record.avg_incremental:.2f},{record.final_accuracy:.2f}")
    table = "\n".join(rows) + "\n"
    (out / "ablation.csv").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite.run_battery(seed=args.seed or 0, configs=args.configs)
    for r in results:
        print(f"{r.loss:8s} max_rel_error={r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAIL {r.loss}: {r.worst}")
        return EXIT_RUNTIME
    print(f"PASS all {len(results)} losses within {gradcheck_suite.TOLERANCE:g}")
    return EXIT_OK


def _relabel(ds: LabeledDataset, class_order: list[int], seen: int) -> LabeledDataset:
    """Map original labels to training ids and keep only classes the checkpoint has seen."""
    lookup = np.full(max(max(class_order), int(ds.labels.max())) + 1, -1, dtype=np.int64)
    lookup[np.asarray(class_order[:seen])] = np.arange(seen)
    new = lookup[ds.labels]
    keep = np.flatnonzero(new >= 0)
    sub = ds.subset(keep)
    return LabeledDataset(sub.samples, new[keep], seen, ds.split, indices=sub.indices)


def cmd_export(args) -> int:
    cfg = _load(args)
    target = Path(args.out)
    if target.exists() and not args.overwrite:
        raise UsageError(f"{target} exists; pass --overwrite to replace it")
    state, _, meta = load_checkpoint(args.checkpoint)
    data = build_data(cfg.dataset)
    source = data.test if args.split == "test" else data.train
    if source.dim != state.extractor.input_dim:
        raise CheckpointError(
            f"checkpoint expects inputs of width {state.extractor.input_dim}, dataset has {source.dim}"
        )
    ds = _relabel(source, meta["class_order"], state.seen_classes)
    if args.limit:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    model = classifier_for(state, meta.get("alpha", 0.1))
    n = export_embeddings(model, ds, target, args.space)
    print(f"wrote {n} rows to {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="create-cil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty output")

    p = sub.add_parser("run", help="train over the task stream and record every phase")
    common(p, "output directory")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run nme, ae_only and full on one config")
    common(p, "output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=20, help="random configurations per loss")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="write feature or latent embeddings from a checkpoint")
    common(p, "output table path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--space", default="feature", help="'feature' or 'latent:<class id>'")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=0, help="export at most this many rows")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" (key {exc.key})" if exc.key else ""
        _err(f"config: {exc}{where}")
        return EXIT_CONFIG
    except UsageError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except CheckpointError as exc:
        _err(f"checkpoint: {exc}")
        return EXIT_RUNTIME
    except TrainingError as exc:
        _err(f"training failed: {exc}")
        return EXIT_RUNTIME
    except (DatasetError, EvaluationError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
