"""Command-line entry point: ``resitta {pretrain,run,sweep,make-dataset,verify}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .. import nn
from . import runner, verify
from .config import RunConfig, coerce, load_config


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        # everything is parsed as a string and coerced with the config rules
        p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _config_from(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return load_config(args.config, overrides)


def cmd_pretrain(args) -> int:
    cfg = _config_from(args)
    net = runner.pretrain_source(
        runner.load_source_data(cfg), cfg.pretrain_epochs, cfg.seed, cfg.pretrain_lr, cfg.batch_size
    )
    nn.save_checkpoint(net, args.out)
    clean = runner.load_domains(cfg.replace(domains=(runner.CLEAN,))) if not cfg.data_dir else None
    if clean:
        print(f"clean test error: {100 * runner.evaluate(net, clean[runner.CLEAN]):.1f}%")
    print(f"wrote {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config_from(args)
    m = runner.run_experiment(cfg)
    if m.status != "ok":
        print(f"run failed: {m.error}", file=sys.stderr)
        return 1
    print(runner.format_table({cfg.arm: m}), end="")
    print(f"wall clock: {m.wall_clock:.1f}s")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from(args)
    values = [coerce(args.param, v) for v in args.values.split(",")]
    results = runner.sweep(cfg, args.param, values, jobs=args.jobs)
    table = runner.format_sweep_table(args.param, results)
    print(table, end="")
    if cfg.out_dir:
        Path(cfg.out_dir, f"sweep_{args.param}.txt").write_text(table)
    return 0 if all(m.status == "ok" for _, m in results) else 1


def cmd_make_dataset(args) -> int:
    cfg = _config_from(args)
    for path in runner.make_datasets(cfg, args.out, args.format):
        print(path)
    return 0


def cmd_verify(args) -> int:
    reports = verify.run_suite(args.seed or 1)
    for r in reports:
        print(r.to_json())
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resitta", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the source model on clean data and save a checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one arm over the corruption stream")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one arm for each value of a config key")
    _add_config_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-dataset", help="write synthetic clean and corrupted splits to a directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("rtds", "csv"), default="rtds")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("verify", help="check the engine against the brute-force oracles")
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
