"""Command-line front end: generate, train, eval, verify, compare, ablation, plot.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 training aborted on a non-finite value.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ResolvedConfig, dump_toml, load_config
from .data import DatasetFormatError, file_hash, generate_synthetic, load, save
from .encoder import TARGET, CheckpointError, ValidationError, load_checkpoint, save_checkpoint
from .loss import LossConfigError, inject_fault
from .trainer import (
    DEFAULT_SEEDS,
    ABLATION_CONDITIONS,
    TRAINERS,
    TrainingAborted,
    compare_methods,
    evaluate,
    format_table,
    plot_metrics,
    run_ablation,
    write_metrics_csv,
    write_timing_csv,
)

logger = logging.getLogger("pctl")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
OUT_DIR_ENV = "PCTL_OUT_DIR"
FAULTS = ("info_nce_sign",)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def default_out_dir(command: str) -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, "pctl_runs")) / command


def write_manifest(out_dir: Path, args: argparse.Namespace, cfg: ResolvedConfig | None, dataset_hash: str | None) -> Path:
    """Record what is about to run; written before any output of the command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": list(args.argv),
        "config": cfg.flat() if cfg is not None else None,
        "seed": cfg.train.seed if cfg is not None else None,
        "dataset_hash": dataset_hash,
        "out_dir": str(out_dir),
        "tool_version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def resolve_config(args) -> ResolvedConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        key = "generator.seed" if args.command == "generate" else "train.seed"
        overrides.append(f"{key}={args.seed}")
    if getattr(args, "mode", None) is not None:
        overrides.append(f'train.mode="{args.mode}"')
    cfg = load_config(args.config, overrides)
    print("# resolved config")
    print(dump_toml(cfg), end="")
    return cfg


def load_dataset(path):
    if path is None:
        raise UsageError("--data is required")
    if not Path(path).is_file():
        raise UsageError(f"dataset file not found: {path}")
    return load(path), file_hash(path)


def out_dir_of(args) -> Path:
    return Path(args.out_dir) if args.out_dir else default_out_dir(args.command)


def parse_seeds(text: str | None):
    if text is None:
        return DEFAULT_SEEDS
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out_dir = out_dir_of(args)
    target = Path(args.out) if args.out else out_dir / "dataset.jsonl"
    write_manifest(out_dir, args, cfg, None)
    ds = generate_synthetic(cfg.generator)
    target.parent.mkdir(parents=True, exist_ok=True)
    save(ds, target)
    print(f"wrote {len(ds.records)} records to {target} (sha256 {file_hash(target)})")
    print(f"domain-gap probe: {json.dumps(ds.header['probe'])}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds, digest = load_dataset(args.data)
    out_dir = out_dir_of(args)
    write_manifest(out_dir, args, cfg, digest)
    (out_dir / "config.toml").write_text(dump_toml(cfg), encoding="utf-8")
    mode = cfg.train.mode
    bank_dir = None
    if args.dump_banks and mode == "pctl":
        bank_dir = out_dir / "banks"
        bank_dir.mkdir(exist_ok=True)
    try:
        if mode == "pctl":
            state, metrics = TRAINERS[mode](cfg.train, ds, bank_dump_dir=bank_dir)
        else:
            state, metrics = TRAINERS[mode](cfg.train, ds)
    except TrainingAborted as exc:
        write_metrics_csv(exc.metrics, out_dir / "metrics.csv")
        if exc.best_state is not None:
            save_checkpoint(exc.best_state, out_dir / "checkpoint.bin", {"mode": mode, "aborted": True})
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    write_metrics_csv(metrics, out_dir / "metrics.csv")
    write_timing_csv(metrics, out_dir / "timing.csv")
    best = metrics.best_row
    save_checkpoint(
        state,
        out_dir / "checkpoint.bin",
        {"mode": mode, "best_epoch": metrics.best_epoch, "dataset_hash": digest, "config": cfg.flat()},
    )
    logger.info("mode %s: %d source batches, %d target batches", mode, metrics.source_batches, metrics.target_batches)
    print(f"mode {mode}: source batches {metrics.source_batches}, target batches {metrics.target_batches}")
    print(f"best epoch {best['epoch']} ({best['phase']}): val_ce {best['val_ce']:.4f} val_acc {best['val_acc']:.4f} test_acc {best['test_acc']:.4f}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ds, digest = load_dataset(args.data)
    out_dir = out_dir_of(args)
    write_manifest(out_dir, args, None, digest)
    state, extra = load_checkpoint(args.checkpoint)
    res = evaluate(state, ds, args.split, args.domain)
    result = {
        "split": args.split,
        "domain": args.domain,
        "n": res.n,
        "accuracy": res.accuracy,
        "ce": res.ce,
        "tp": res.tp,
        "fp": res.fp,
        "fn": res.fn,
        "tn": res.tn,
    }
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"{args.domain}/{args.split}: n={res.n} accuracy={res.accuracy:.4f} ce={res.ce:.4f}")
        print(f"TP={res.tp} FP={res.fp} FN={res.fn} TN={res.tn}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(result), lineterminator="\n")
            w.writeheader()
            w.writerow(result)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    out_dir = out_dir_of(args)
    write_manifest(out_dir, args, None, None)
    names = args.only or list(verify.CHECKS)
    for name in names:
        if name not in verify.CHECKS:
            raise UsageError(f"unknown check {name!r}; choose from {', '.join(verify.CHECKS)}")
    results = []
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            for name in names:
                results.extend(verify.CHECKS[name]())
    else:
        for name in names:
            results.extend(verify.CHECKS[name]())
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def _write_results(path: Path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "schedule", "mean", "std", "accuracies"])
        for r in results:
            w.writerow([r.name, " ".join(map(str, r.schedule)), repr(r.mean), repr(r.std), " ".join(repr(a) for a in r.accuracies)])


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    seeds = parse_seeds(args.seeds)
    ds, digest = load_dataset(args.data)
    out_dir = out_dir_of(args)
    write_manifest(out_dir, args, cfg, digest)
    results = list(compare_methods(cfg.train, ds, seeds).values())
    print(format_table(results))
    _write_results(out_dir / "compare.csv", results)
    return EXIT_OK


def _parse_schedules(items) -> dict[str, tuple[int, ...]]:
    if not items:
        return dict(ABLATION_CONDITIONS)
    out = {}
    for item in items:
        try:
            schedule = tuple(int(k) for k in item.split(","))
        except ValueError:
            raise UsageError(f"--schedule expects comma-separated integers, got {item!r}") from None
        out[f"k={item}"] = schedule
    return out


def cmd_ablation(args) -> int:
    cfg = resolve_config(args)
    seeds = parse_seeds(args.seeds)
    conditions = _parse_schedules(args.schedule)
    ds, digest = load_dataset(args.data)
    out_dir = out_dir_of(args)
    write_manifest(out_dir, args, cfg, digest)
    results = run_ablation(cfg.train, ds, conditions, seeds)
    print(format_table(results))
    _write_results(out_dir / "ablation.csv", results)
    return EXIT_OK


def cmd_plot(args) -> int:
    if not Path(args.metrics).is_file():
        raise UsageError(f"metrics file not found: {args.metrics}")
    out = Path(args.out) if args.out else Path(args.metrics).with_suffix(".svg")
    write_manifest(out_dir_of(args), args, None, None)
    plot_metrics(args.metrics, out)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pctl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pctl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV}/<command> or pctl_runs/<command>)")
        if config:
            sp.add_argument("--config", help="TOML file with dotted keys")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
            sp.add_argument("--seed", type=int, help="shortcut for the seed key")

    g = sub.add_parser("generate", help="write a synthetic two-domain dataset")
    common(g)
    g.add_argument("--out", help="dataset path (default <out-dir>/dataset.jsonl)")

    t = sub.add_parser("train", help="train one method and write metrics and the best checkpoint")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=("pctl", "target-only", "fine-tune"))
    t.add_argument("--dump-banks", action="store_true", help="write each epoch's prototype bank as JSON")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--domain", default=TARGET, choices=("source", "target"))
    e.add_argument("--json", action="store_true", help="print one JSON object")
    e.add_argument("--csv", help="also write the result as a one-row CSV")

    v = sub.add_parser("verify", help="run the gradient and property checks")
    common(v, config=False)
    v.add_argument("--only", action="append", help="run only this group of checks (repeatable)")
    v.add_argument("--inject-fault", choices=FAULTS, help="test hook: corrupt a loss to confirm the checks catch it")

    c = sub.add_parser("compare", help="PCTL vs target-only vs fine-tune over seeds")
    common(c)
    c.add_argument("--data", required=True)
    c.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")

    a = sub.add_parser("ablation", help="PCTL over several cluster schedules")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    a.add_argument("--schedule", action="append", help="comma-separated k per round, e.g. 64,128,256 (repeatable)")

    pl = sub.add_parser("plot", help="loss and accuracy curves from a metrics CSV as SVG")
    common(pl, config=False)
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", help="SVG path (default next to the CSV)")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "compare": cmd_compare,
    "ablation": cmd_ablation,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, LossConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CheckpointError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
