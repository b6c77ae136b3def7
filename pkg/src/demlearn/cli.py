"""Command-line interface: run, sweep-mu, compare, export-dendrogram.

Flags mirror the dotted config keys and win over the config file, which wins
over built-in defaults.  Exit codes: 0 success, 1 config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .data import ConfigurationError
from .clustering import format_dendrogram
from .harness import (
    ExperimentPlan,
    compare_plan,
    parse_config,
    run_plan,
    sweep_mu,
)
from .training import run

# (flag, dotted key, type)
_CONFIG_FLAGS = [
    ("--algorithm", "run.algorithm", str),
    ("--rounds", "run.rounds", int),
    ("--k", "run.k", int),
    ("--tau", "run.tau", int),
    ("--mu", "run.mu", float),
    ("--beta0", "run.beta0", float),
    ("--beta-decay", "run.beta_decay", float),
    ("--beta-min", "run.beta_min", float),
    ("--epochs", "run.epochs", int),
    ("--batch-size", "run.batch_size", int),
    ("--lr", "run.lr", float),
    ("--metric", "run.metric", str),
    ("--fedavg-weighting", "run.fedavg_weighting", str),
    ("--seed", "run.seed", int),
    ("--model-kind", "model.kind", str),
    ("--hidden-dim", "model.hidden_dim", int),
    ("--data-source", "data.source", str),
    ("--data-dir", "data.dir", str),
    ("--data-seed", "data.seed", int),
    ("--clients", "data.clients", int),
    ("--labels-per-client", "data.labels_per_client", int),
    ("--samples-per-client", "data.samples_per_client", int),
    ("--test-frac", "data.test_frac", float),
    ("--classes", "synthetic.classes", int),
    ("--input-dim", "synthetic.input_dim", int),
    ("--samples-per-class", "synthetic.samples_per_class", int),
    ("--separation", "synthetic.separation", float),
]


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we treat that as a config error."""

    def error(self, message):
        raise ConfigurationError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    for flag, key, typ in _CONFIG_FLAGS:
        p.add_argument(flag, dest=key, type=typ, default=None, help=f"override {key}")
    p.add_argument(
        "--fixed-structure",
        dest="run.fixed_structure",
        action="store_const",
        const=True,
        default=None,
        help="build the hierarchy once at t=0 and never rebuild",
    )


def _config_from_args(args: argparse.Namespace):
    overrides = {
        key: getattr(args, key)
        for _, key, _t in _CONFIG_FLAGS
        if getattr(args, key) is not None
    }
    fixed = getattr(args, "run.fixed_structure")
    if fixed is not None:
        overrides["run.fixed_structure"] = fixed
    return parse_config(args.config, overrides)


def _build_parser() -> _Parser:
    parser = _Parser(prog="demlearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a single configured run")
    _add_config_flags(p_run)
    p_run.add_argument("--name", default="run", help="run name used in output files")
    p_run.add_argument("--out", default="results", help="output directory")

    p_sweep = sub.add_parser("sweep-mu", help="one run per proximal strength")
    _add_config_flags(p_sweep)
    p_sweep.add_argument(
        "--mu-values",
        default="0.002,0.01,0.05",
        help="comma-separated mu values",
    )
    p_sweep.add_argument("--out", default="results", help="output directory")

    p_cmp = sub.add_parser(
        "compare", help="demlearn / demlearn-p / fedavg / fedprox on one partition"
    )
    _add_config_flags(p_cmp)
    p_cmp.add_argument("--out", default="results", help="output directory")

    p_dend = sub.add_parser(
        "export-dendrogram", help="run and write the last rebuild's dendrogram"
    )
    _add_config_flags(p_dend)
    p_dend.add_argument("--out-file", default=None, help="path (default: stdout)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            cfg = _config_from_args(args)
            plan = ExperimentPlan([(args.name, cfg)], out_dir=args.out)
            return run_plan(plan)
        if args.command == "sweep-mu":
            cfg = _config_from_args(args)
            values = [float(v) for v in args.mu_values.split(",") if v.strip()]
            plan = sweep_mu(cfg, values)
            plan.out_dir = args.out
            return run_plan(plan)
        if args.command == "compare":
            cfg = _config_from_args(args)
            plan = compare_plan(cfg)
            plan.out_dir = args.out
            return run_plan(plan)
        if args.command == "export-dendrogram":
            cfg = _config_from_args(args)
            if cfg.algorithm not in ("demlearn", "demlearn-p"):
                raise ConfigurationError(
                    "export-dendrogram requires a hierarchical algorithm"
                )
            result = run(cfg, record_structures=True)
            if not result.dendrograms:
                raise ConfigurationError(
                    "no dendrogram was built (did the run execute any rounds?)"
                )
            _, dend = result.dendrograms[-1]
            text = format_dendrogram(dend)
            if args.out_file:
                with open(args.out_file, "w", encoding="utf-8") as f:
                    f.write(text)
            else:
                sys.stdout.write(text)
            return 0
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
