"""Command-line entry point: ``casa {gen-data,train,ablate,eval,report}``.

Exit status is 0 on success. Failures print a single JSON line on stderr,
``error: {"type": ..., "message": ...}``, and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .datasets import SyntheticSpec, generate, load_csv, save_csv
from .errors import CasaError, ConfigError
from .harness import (
    VARIANTS,
    ExperimentConfig,
    load_checkpoint,
    load_config,
    report,
    rows_from_metrics,
    run_variants,
)
from .inference import EnsembleModel, evaluate, write_predictions


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.train = replace(config.train, seed=args.seed)
        if isinstance(config.dataset, SyntheticSpec):
            config.dataset = replace(config.dataset, seed=args.seed)
    if args.out is not None:
        config.output_dir = args.out
    config.validate()
    return config


def cmd_gen_data(args) -> dict:
    config = _config(args)
    if not isinstance(config.dataset, SyntheticSpec):
        raise ConfigError("gen-data needs a synthetic dataset spec in the config")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    save_csv(generate(config.dataset), path, spec=config.dataset)
    return {"dataset": str(path)}


def _run(args, variants) -> dict:
    config = _config(args)
    if config.output_dir is None:
        raise ConfigError("an output directory is required (--out or output_dir)")
    rows = run_variants(config, variants)
    print(Path(config.output_dir, "report.txt").read_text(encoding="utf-8"), end="")
    return {v: {"average": r.average, "stderr": r.stderr, "per_domain": r.per_domain} for v, r in rows.items()}


def cmd_train(args) -> dict:
    return _run(args, None)


def cmd_ablate(args) -> dict:
    return _run(args, args.variants or list(VARIANTS))


def cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    shared = ckpt.shared_adapter is not None and all(b.adapter is not None for b in ckpt.bundles)
    model = EnsembleModel(ckpt.bundles, require_shared_adapter=shared)
    domains = {d.domain_id: d for d in load_csv(args.data)}
    if args.domain not in domains:
        raise ConfigError(f"domain {args.domain} not in {args.data}")
    ds = domains[args.domain]
    if args.predictions:
        acc = write_predictions(args.predictions, model, ds, args.batch_size)
    else:
        acc = evaluate(model, ds, args.batch_size)
    print(f"accuracy {acc!r} domain {args.domain} batch_size {args.batch_size}")
    return {"accuracy": acc}


def cmd_report(args) -> dict:
    out = Path(args.out or ".")
    metrics = Path(args.metrics) if args.metrics else out / "metrics.jsonl"
    rows = rows_from_metrics(metrics)
    if not rows:
        raise ConfigError(f"no test records in {metrics}")
    report(rows, out)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return {r.variant: r.average for r in rows}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casa", description="Context-aware self-adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="write the synthetic benchmark as CSV")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the configured variant")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run several variants on shared stage-one models")
    common(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score a checkpoint on one domain of a CSV dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--predictions", help="optional per-sample CSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="rebuild the report table from a metrics file")
    p.add_argument("--out", help="directory holding metrics.jsonl; the report is written here")
    p.add_argument("--metrics", help="explicit metrics.jsonl path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CasaError, OSError, json.JSONDecodeError) as exc:
        payload = {"type": type(exc).__name__, "message": str(exc).replace("\n", " ")}
        print("error: " + json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
