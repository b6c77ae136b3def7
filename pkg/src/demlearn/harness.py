"""Experiment orchestration: config resolution, plans, and file emission.

Configs resolve in three layers (built-in defaults, then a flat key=value
file with dotted keys, then command-line flags).  A plan is a named list of
runs sharing one data partition; each run emits a per-round metrics CSV, a
summary record, per-rebuild dendrogram snapshots, and a tree log.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

from .clustering import format_dendrogram
from .data import ConfigurationError
from .training import RunConfig, RunResult, run

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL_WORDS[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}") from None


# dotted config key -> (RunConfig attribute, parser for file values)
CONFIG_KEYS: dict[str, tuple[str, Callable[[str], object]]] = {
    "run.algorithm": ("algorithm", str),
    "run.rounds": ("rounds", int),
    "run.k": ("k_levels", int),
    "run.tau": ("tau", int),
    "run.mu": ("mu", float),
    "run.beta0": ("beta0", float),
    "run.beta_decay": ("beta_decay", float),
    "run.beta_min": ("beta_min", float),
    "run.epochs": ("epochs", int),
    "run.batch_size": ("batch_size", int),
    "run.lr": ("lr", float),
    "run.metric": ("metric", str),
    "run.fixed_structure": ("fixed_structure", _parse_bool),
    "run.fedavg_weighting": ("fedavg_weighting", str),
    "run.seed": ("seed", int),
    "model.kind": ("model_kind", str),
    "model.hidden_dim": ("hidden_dim", int),
    "data.source": ("data_source", str),
    "data.dir": ("data_dir", str),
    "data.seed": ("data_seed", int),
    "data.clients": ("n_clients", int),
    "data.labels_per_client": ("labels_per_client", int),
    "data.samples_per_client": ("samples_per_client", int),
    "data.test_frac": ("test_frac", float),
    "synthetic.classes": ("num_classes", int),
    "synthetic.input_dim": ("input_dim", int),
    "synthetic.samples_per_class": ("samples_per_class", int),
    "synthetic.separation": ("class_separation", float),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in CONFIG_KEYS.items()}

# fields that must agree across a shared-partition plan
_PARTITION_ATTRS = (
    "data_source",
    "data_dir",
    "data_seed",
    "n_clients",
    "labels_per_client",
    "samples_per_client",
    "test_frac",
    "num_classes",
    "input_dim",
    "samples_per_class",
    "class_separation",
)

DEMLEARN_P_DEFAULT_MU = 0.005


def read_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(
                    f"{path}:{lineno}: expected 'key = value', got {line!r}"
                )
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def parse_config(
    path: Optional[str] = None, overrides: Optional[dict[str, object]] = None
) -> RunConfig:
    """Resolve defaults < file < flag overrides into a validated RunConfig.

    `overrides` is keyed by dotted config key with already-typed values.
    Unknown keys in either layer are rejected with their key path.
    """
    provided: dict[str, object] = {}
    if path is not None:
        for key, raw in read_config_file(path).items():
            if key not in CONFIG_KEYS:
                raise ConfigurationError(f"unknown config key {key!r}")
            attr, parser = CONFIG_KEYS[key]
            try:
                provided[attr] = parser(raw)
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key!r}: {exc}") from None
    for key, value in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        attr, _ = CONFIG_KEYS[key]
        provided[attr] = value

    algorithm = provided.get("algorithm", RunConfig.algorithm)
    if algorithm in ("demlearn-p", "fedprox") and "mu" not in provided:
        provided["mu"] = DEMLEARN_P_DEFAULT_MU
    cfg = RunConfig(**provided)
    cfg.validate()
    return cfg


def config_echo(cfg: RunConfig) -> dict[str, object]:
    """The resolved config as dotted keys, as written into summaries."""
    return {key: getattr(cfg, attr) for key, (attr, _) in CONFIG_KEYS.items()}


@dataclass
class ExperimentPlan:
    """Named runs plus output destination; names must be unique."""

    runs: list[tuple[str, RunConfig]]
    out_dir: str = "results"
    shared_partition: bool = True

    def validate(self) -> None:
        names = [name for name, _ in self.runs]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate run names in plan: {names}")
        for _, cfg in self.runs:
            cfg.validate()
        if self.shared_partition and self.runs:
            first = self.runs[0][1]
            for name, cfg in self.runs[1:]:
                for attr in _PARTITION_ATTRS:
                    if getattr(cfg, attr) != getattr(first, attr):
                        raise ConfigurationError(
                            f"run {name!r} breaks the shared partition: "
                            f"{_ATTR_TO_KEY[attr]} differs"
                        )


def sweep_mu(base: RunConfig, values: Sequence[float]) -> ExperimentPlan:
    """One run per proximal strength, sharing partition and seeds.

    mu = 0 degenerates to the non-proximal algorithm.
    """
    if not values:
        raise ConfigurationError("sweep needs at least one mu value")
    runs = []
    for v in values:
        if v < 0:
            raise ConfigurationError(f"mu must be non-negative, got {v}")
        if v == 0:
            cfg = replace(base, algorithm="demlearn", mu=0.0)
        else:
            cfg = replace(base, algorithm="demlearn-p", mu=float(v))
        runs.append((f"mu_{v:g}", cfg))
    return ExperimentPlan(runs)


def compare_plan(base: RunConfig) -> ExperimentPlan:
    """The four algorithms on one shared partition."""
    prox_mu = base.mu if base.mu > 0 else DEMLEARN_P_DEFAULT_MU
    return ExperimentPlan(
        [
            ("demlearn", replace(base, algorithm="demlearn", mu=0.0)),
            ("demlearn-p", replace(base, algorithm="demlearn-p", mu=prox_mu)),
            ("fedavg", replace(base, algorithm="fedavg", mu=0.0)),
            ("fedprox", replace(base, algorithm="fedprox", mu=prox_mu)),
        ]
    )


def fixed_structure_mode(cfg: RunConfig) -> RunConfig:
    """Build the structure once at t=0 and never rebuild (tau effectively infinite)."""
    return replace(cfg, fixed_structure=True)


def metrics_csv_lines(name: str, cfg: RunConfig, result: RunResult) -> list[str]:
    k = cfg.k_levels if cfg.algorithm in ("demlearn", "demlearn-p") else 1
    g_cols = [f"g_spe_{i}" for i in range(1, k)] + [f"g_gen_{i}" for i in range(1, k)]
    header = ["run", "t", "c_spe", "c_gen", *g_cols, "global_acc", "global_loss"]
    lines = [",".join(header)]
    for m in result.metrics:
        row = [name, str(m.t), repr(m.c_spe), repr(m.c_gen)]
        row += [repr(v) for v in m.g_spe]
        row += [repr(v) for v in m.g_gen]
        row += [repr(m.global_acc), repr(m.global_loss)]
        lines.append(",".join(row))
    return lines


def summary_record(name: str, cfg: RunConfig, result: RunResult) -> str:
    payload: dict[str, object] = {
        "run": name,
        "rounds_completed": len(result.metrics),
        "config": config_echo(cfg),
    }
    if result.metrics:
        last = result.metrics[-1]
        payload["final"] = {
            "t": last.t,
            "c_spe": last.c_spe,
            "c_gen": last.c_gen,
            "g_spe": list(last.g_spe),
            "g_gen": list(last.g_gen),
            "global_acc": last.global_acc,
            "global_loss": last.global_loss,
        }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_run_outputs(out_dir: str, name: str, cfg: RunConfig, result: RunResult) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []

    csv_path = os.path.join(out_dir, f"{name}_metrics.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("\n".join(metrics_csv_lines(name, cfg, result)) + "\n")
    written.append(csv_path)

    summary_path = os.path.join(out_dir, f"{name}_summary.json")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write(summary_record(name, cfg, result))
    written.append(summary_path)

    for t, dend in result.dendrograms:
        dpath = os.path.join(out_dir, f"{name}_dendrogram_t{t}.txt")
        with open(dpath, "w", encoding="utf-8") as f:
            f.write(format_dendrogram(dend))
        written.append(dpath)

    if result.tree_snapshots:
        tpath = os.path.join(out_dir, f"{name}_tree.txt")
        with open(tpath, "w", encoding="utf-8") as f:
            for t, snap in result.tree_snapshots:
                f.write(f"round t={t}\n{snap}\n")
        written.append(tpath)
    return written


def run_plan(plan: ExperimentPlan) -> int:
    """Execute every run in the plan; 0 on success, 1/2 on config/runtime failure.

    Outputs are flushed per run, so a failure keeps everything completed so far.
    """
    try:
        plan.validate()
    except ConfigurationError as exc:
        print(f"config error: {exc}")
        return 1
    for name, cfg in plan.runs:
        try:
            result = run(cfg, record_structures=True)
        except ConfigurationError as exc:
            print(f"config error in run {name!r}: {exc}")
            return 1
        except Exception as exc:  # noqa: BLE001 - report and abort with status
            print(f"run {name!r} failed: {exc}")
            return 2
        write_run_outputs(plan.out_dir, name, cfg, result)
        if result.metrics:
            last = result.metrics[-1]
            print(
                f"{name}: t={last.t} c_spe={last.c_spe:.4f} c_gen={last.c_gen:.4f} "
                f"global={last.global_acc:.4f}"
            )
        else:
            print(f"{name}: no rounds executed")
    return 0
