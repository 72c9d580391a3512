"""Command line entry point: ``nncsl run | validate | report``.

Exit codes: 0 success, 1 configuration problem, 2 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment
from .errors import ConfigError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _parse_override(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser():
    parser = argparse.ArgumentParser(prog="nncsl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-step logs")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="experiment JSON file; defaults apply to anything it omits")
        p.add_argument("--method", action="append", dest="methods", metavar="NAME",
                       help="method to run; repeat to sweep (replaces the file's list)")
        p.add_argument("--seed", action="append", dest="seeds", type=int, metavar="N",
                       help="seed to run; repeat for several (replaces the file's list)")
        p.add_argument("--set", action="append", dest="overrides", type=_parse_override, default=[],
                       metavar="KEY=VALUE", help="override a config value by dotted key, e.g. train.tau=0.2")

    run = sub.add_parser("run", help="train and write per-seed results")
    config_args(run)
    run.add_argument("--out", help=f"output root (beats ${experiment.OUTPUT_ROOT_ENV} and output_dir)")
    run.add_argument("--jobs", type=int, default=1, help="seeds to train in parallel processes")
    run.add_argument("--dump-embeddings", action="store_true", help="also write projected coordinates")
    run.add_argument("--checkpoints", action="store_true", help="save the model after every task")

    val = sub.add_parser("validate", help="resolve defaults and check constraints without training")
    config_args(val)

    rep = sub.add_parser("report", help="re-aggregate results already on disk")
    rep.add_argument("root", help="output root written by `nncsl run`")
    return parser


def _resolve(args):
    overrides = dict(args.overrides)
    if args.methods:
        overrides["methods"] = args.methods
    if args.seeds:
        overrides["seeds"] = args.seeds
    if getattr(args, "dump_embeddings", False):
        overrides["dump_embeddings"] = True
    if getattr(args, "checkpoints", False):
        overrides["checkpoints"] = True
    return experiment.load_config(args.config, overrides)


def _fmt(stat):
    return "n/a" if stat is None else f"{stat['mean']:.4f} ± {stat['stdev']:.4f}"


def _print_table(aggregates, out):
    print(f"{'method':10s} {'seeds':>5s}  {'ACC':>17s}  {'FWT':>17s}  {'BWT':>17s}", file=out)
    for method, agg in aggregates.items():
        print(
            f"{method:10s} {len(agg['seeds']):5d}  {_fmt(agg['acc']):>17s}  "
            f"{_fmt(agg['fwt']):>17s}  {_fmt(agg['bwt']):>17s}",
            file=out,
        )


def cmd_run(args, out):
    resolved = _resolve(args)
    problems = experiment.validate(resolved)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    root = experiment.output_root(resolved, args.out)
    try:
        aggregates = experiment.run_experiment(resolved, root, jobs=max(1, args.jobs))
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _print_table(aggregates, out)
    print(f"results written to {root}", file=out)
    return EXIT_OK


def cmd_validate(args, out):
    resolved = _resolve(args)
    problems = experiment.validate(resolved)
    if problems:
        for p in problems:
            print(f"violation: {p}", file=out)
        return EXIT_CONFIG
    print("OK", file=out)
    print(json.dumps({**resolved, "config_hash": experiment.config_hash(resolved)}, indent=2, sort_keys=True),
          file=out)
    return EXIT_OK


def cmd_report(args, out):
    aggregates = experiment.collect(args.root)
    if not aggregates:
        print(f"no results found under {args.root}", file=sys.stderr)
        return EXIT_CONFIG
    for method, agg in aggregates.items():
        experiment.write_json(experiment.Path(args.root) / method / "aggregate.json", agg)
    _print_table(aggregates, out)
    return EXIT_OK


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handler = {"run": cmd_run, "validate": cmd_validate, "report": cmd_report}[args.command]
    try:
        return handler(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
