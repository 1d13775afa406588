"""Command-line entry points for batch experiment runs.

Subcommands: prepare (emit bundled datasets), train (base model to a
checkpoint), stream (materialize insert batches + manifest), run (full
experiment), report (summaries and plots from a run directory).

Exit codes: 0 success, 2 configuration/input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import make_update_stream, save_stream
from .datasets import make_census_like, make_enumerable_toy, make_mog_table
from .experiment import (ConfigError, ExperimentConfig, build_model, report,
                         resolve_dataset, run_experiment, train_config)

log = logging.getLogger("shiftup")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    for override in args.override or []:
        if "=" not in override:
            raise ConfigError(f"bad override {override!r}, expected key=value")
        key, value = override.split("=", 1)
        doc = cfg.to_json()
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        try:
            node[parts[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[parts[-1]] = value
        cfg = ExperimentConfig.from_json(doc)
    return cfg


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    census = make_census_like(args.rows, seed=args.seed)
    census.to_csv(out / "census.csv")
    census.schema.save(out / "census.schema.json")
    mog = make_mog_table(seed=args.seed)
    mog.to_csv(out / "mog.csv")
    mog.schema.save(out / "mog.schema.json")
    toy = make_enumerable_toy(seed=args.seed)
    toy.to_csv(out / "toy.csv")
    toy.schema.save(out / "toy.schema.json")
    print(f"wrote census ({census.row_count} rows), mog ({mog.row_count}), "
          f"toy ({toy.row_count}) under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    base = resolve_dataset(cfg)
    model = build_model(cfg, base).fit(base, train_config(cfg))
    model.save(args.out)
    print(f"trained {cfg.family} on {base.row_count} rows -> {args.out} "
          f"(final loss {model.loss_trace[-1]:.4f})")
    return 0


def cmd_stream(args) -> int:
    cfg = _load_config(args)
    base = resolve_dataset(cfg)
    stream = make_update_stream(
        base, fraction=cfg.stream.get("fraction", 0.2),
        n_batches=cfg.stream.get("n_batches", 1),
        drift=cfg.stream.get("drift", True),
        seed=cfg.stream.get("seed", cfg.seed),
        drift_columns=cfg.stream.get("drift_columns"))
    manifest = save_stream(stream, args.out, base.schema)
    print(f"wrote {len(stream)} batches, manifest {manifest}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.output_dir:
        doc = cfg.to_json()
        doc["output_dir"] = args.output_dir
        cfg = ExperimentConfig.from_json(doc)
    run_dir = run_experiment(cfg)
    print(f"run complete: {run_dir}")
    return 0


def cmd_report(args) -> int:
    written = report(args.run)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftup",
        description="detect distribution shift in insert streams and update "
                    "learned database models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate the bundled synthetic datasets")
    p.add_argument("--out", default="data")
    p.add_argument("--rows", type=int, default=48842)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prepare)

    for name, fn, needs_out in (("train", cmd_train, True),
                                ("stream", cmd_stream, True),
                                ("run", cmd_run, False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")
        if needs_out:
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--output-dir", default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="emit CSV summaries and plots for a run")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report runtime failures as exit 3
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
