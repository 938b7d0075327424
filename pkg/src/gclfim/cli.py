"""Experiment runner: ``gclfim run <config.json>`` and ``gclfim sweep <config.json> --param ... --values ...``.

Config document (JSON)::

    {
      "dataset":   {"type": "sbm", "num_classes": 6, "nodes_per_class": 100, "feature_dim": 16,
                    "p_in": 0.05, "p_out": 0.005, "seed": 0}
                   or {"type": "files", "node_file": "nodes.txt", "edge_file": "edges.txt"},
      "schedule":  {"classes_per_task": 2, "split_ratio": [0.6, 0.2, 0.2], "seed": 0},
      "train":     {"epochs": 200, "batch_size": 128, "learning_rate": 1e-5, "weight_decay": 5e-4,
                    "ema_beta": 0.5, "hidden": 256, ...},
      "strategies": [{"strategy": "ours", "lambda": 0.1, "queue_size": 128}, ...],
      "seeds":     [0, 1, 2],
      "output_dir": "runs/example"
    }

Missing fields fall back to the defaults below. Relative file paths are
resolved against the config file's directory. ``GCLFIM_OUTPUT_ROOT``, when
set, replaces the directory that relative ``output_dir`` values hang off.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .engine import RunResult, TrainConfig, run_continual
from .gcn import save_checkpoint
from .graphs import GraphFormatError, GraphValidationError, build_schedule, generate_sbm_stream, load_graph
from .metrics import emit_heatmap, mean_std
from .regularizers import RegConfig, RegularizerConfigError

OUTPUT_ROOT_ENV = "GCLFIM_OUTPUT_ROOT"

DEFAULT_CONFIG = {
    "dataset": {
        "type": "sbm",
        "num_classes": 6,
        "nodes_per_class": 100,
        "feature_dim": 16,
        "p_in": 0.05,
        "p_out": 0.005,
        "feature_scale": 1.0,
        "seed": 0,
    },
    "schedule": {"classes_per_task": 2, "split_ratio": [0.6, 0.2, 0.2], "seed": 0},
    "train": {
        "epochs": 200,
        "batch_size": 128,
        "learning_rate": 1e-5,
        "weight_decay": 5e-4,
        "ema_beta": 0.5,
        "hidden": 256,
    },
    "strategies": [{"strategy": "ours", "lambda": 0.1, "queue_size": 128}],
    "seeds": [0, 1, 2],
    "output_dir": "runs/default",
}

SWEEP_PARAMS = {"lambda": "lam", "M": "queue_size", "ema_beta": "ema_beta", "gamma": "gamma"}
DEFAULT_SWEEP_VALUES = {"lambda": [0.01, 0.1, 0.5], "M": [32, 64, 128]}

log = logging.getLogger("gclfim")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategySpec:
    name: str
    reg: RegConfig


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    schedule: dict
    train: TrainConfig
    strategies: tuple[StrategySpec, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    raw: dict


def _strategy_spec(entry: dict) -> StrategySpec:
    entry = dict(entry)
    name = entry.pop("name", entry.get("strategy"))
    if "lambda" in entry:
        entry["lam"] = entry.pop("lambda")
    if "M" in entry:
        entry["queue_size"] = entry.pop("M")
    known = {f.name for f in fields(RegConfig)}
    unknown = set(entry) - known
    if unknown:
        raise ConfigError(f"unknown strategy fields {sorted(unknown)}")
    if name is None:
        raise ConfigError("strategy entry needs a 'strategy' tag")
    return StrategySpec(str(name), RegConfig(**entry))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    base = path.parent

    dataset = {**(DEFAULT_CONFIG["dataset"] if raw.get("dataset", {}).get("type", "sbm") == "sbm" else {}),
               **raw.get("dataset", {})}
    if dataset.get("type") == "files":
        for key in ("node_file", "edge_file"):
            if key not in dataset:
                raise ConfigError(f"dataset of type 'files' needs '{key}'")
            p = Path(dataset[key])
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                raise ConfigError(f"{key} does not exist: {p}")
            dataset[key] = str(p)
    elif dataset.get("type") != "sbm":
        raise ConfigError(f"unknown dataset type {dataset.get('type')!r}")

    schedule = {**DEFAULT_CONFIG["schedule"], **raw.get("schedule", {})}
    try:
        train = TrainConfig(**{**DEFAULT_CONFIG["train"], **raw.get("train", {})})
        strategies = tuple(_strategy_spec(s) for s in raw.get("strategies", DEFAULT_CONFIG["strategies"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    seeds = tuple(int(s) for s in raw.get("seeds", DEFAULT_CONFIG["seeds"]))
    if not strategies:
        raise ConfigError("at least one strategy is required")
    if not seeds:
        raise ConfigError("at least one seed is required")
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        raise ConfigError(f"strategy names must be unique, got {names}")

    out = Path(raw.get("output_dir", DEFAULT_CONFIG["output_dir"]))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        out = Path(root) / (out.name if out.is_absolute() else out)
    elif not out.is_absolute():
        out = base / out
    return ExperimentConfig(dataset, schedule, train, strategies, seeds, out, raw)


def build_stream(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds["type"] == "files":
        raw = load_graph(ds["node_file"], ds["edge_file"])
    else:
        raw = generate_sbm_stream(
            int(ds["num_classes"]),
            int(ds["nodes_per_class"]),
            int(ds["feature_dim"]),
            float(ds["p_in"]),
            float(ds["p_out"]),
            seed=int(ds["seed"]),
            feature_scale=float(ds.get("feature_scale", 1.0)),
        )
    sc = cfg.schedule
    return build_schedule(raw, int(sc["classes_per_task"]), tuple(sc["split_ratio"]), seed=int(sc["seed"]))


def _cell(args) -> RunResult:
    schedule, train, reg, seed = args
    return run_continual(schedule, train, reg, seed)


def _run_grid(schedule, train: TrainConfig, cells: list[tuple[str, RegConfig, int]], jobs: int) -> list[RunResult]:
    work = [(schedule, train, reg, seed) for _, reg, seed in cells]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_cell, work))
    return [_cell(w) for w in work]


def _write_log(path: Path, labels: list[str], results: list[RunResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, res in zip(labels, results):
            fh.write(f"# run {label}\n")
            for rec in res.history:
                fh.write(
                    f"task={rec['task']} epoch={rec['epoch']} loss={rec['loss']:.6f} "
                    f"reg={rec['reg']:.6f} val_acc={rec['val_acc']:.4f}\n"
                )
            fh.write(f"# final AP={res.ap:.4f} AF={res.af:.4f}\n")


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _prepare_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def run(config_path: str | Path, jobs: int = 1) -> int:
    cfg = load_config(config_path)
    schedule = build_stream(cfg)
    out = _prepare_dir(cfg)
    cells = [(spec.name, spec.reg, seed) for spec in cfg.strategies for seed in cfg.seeds]
    log.info("running %d cells into %s", len(cells), out)
    results = _run_grid(schedule, cfg.train, cells, jobs)

    rows, labels = [], []
    for (name, _, seed), res in zip(cells, results):
        label = f"{name}_seed{seed}"
        labels.append(label)
        emit_heatmap(res.accuracy, out / "heatmaps" / f"{label}.csv")
        save_checkpoint(res.params, out / "checkpoints" / f"{label}.ckpt")
        rows.append([name, seed, _fmt(res.ap), _fmt(res.af)])
    _write_csv(out / "results.csv", ["strategy", "seed", "AP_final", "AF_final"], rows)

    summary = []
    for spec in cfg.strategies:
        mine = [r for (name, _, _), r in zip(cells, results) if name == spec.name]
        ap_m, ap_s = mean_std([r.ap for r in mine])
        af_m, af_s = mean_std([r.af for r in mine])
        summary.append([spec.name, len(mine), _fmt(ap_m), _fmt(ap_s), _fmt(af_m), _fmt(af_s)])
    _write_csv(out / "summary.csv", ["strategy", "n_seeds", "AP_mean", "AP_std", "AF_mean", "AF_std"], summary)
    _write_log(out / "run.log", labels, results)
    for row in summary:
        log.info("%s AP=%s±%s AF=%s±%s", row[0], *row[2:])
    return 0


def sweep(config_path: str | Path, param: str, values: list[float], jobs: int = 1) -> int:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    cfg = load_config(config_path)
    schedule = build_stream(cfg)
    out = _prepare_dir(cfg)
    field_name = SWEEP_PARAMS[param]
    cast = int if param == "M" else float

    cells = []
    for value in sorted(values):
        for spec in cfg.strategies:
            try:
                reg = replace(spec.reg, **{field_name: cast(value)})
            except RegularizerConfigError as exc:
                raise ConfigError(f"{param}={value}: {exc}") from None
            for seed in cfg.seeds:
                cells.append((value, spec.name, reg, seed))
    results = _run_grid(schedule, cfg.train, [(n, r, s) for _, n, r, s in cells], jobs)

    rows, labels = [], []
    for (value, name, _, seed), res in zip(cells, results):
        label = f"{name}_{param}={value}_seed{seed}"
        labels.append(label)
        emit_heatmap(res.accuracy, out / "heatmaps" / f"{label}.csv")
        save_checkpoint(res.params, out / "checkpoints" / f"{label}.ckpt")
        rows.append([param, value, name, seed, _fmt(res.ap), _fmt(res.af)])
    _write_csv(out / "sweep_results.csv", ["param", "value", "strategy", "seed", "AP_final", "AF_final"], rows)

    summary = []
    for value in sorted(values):
        for spec in cfg.strategies:
            mine = [r for (v, n, _, _), r in zip(cells, results) if v == value and n == spec.name]
            ap_m, ap_s = mean_std([r.ap for r in mine])
            af_m, af_s = mean_std([r.af for r in mine])
            summary.append([param, value, spec.name, _fmt(ap_m), _fmt(ap_s), _fmt(af_m), _fmt(af_s)])
    _write_csv(
        out / "sweep_summary.csv",
        ["param", "value", "strategy", "AP_mean", "AP_std", "AF_mean", "AF_std"],
        summary,
    )
    _write_log(out / "run.log", labels, results)
    return 0


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse values {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="gclfim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run every strategy x seed cell of a config")
    p_run.add_argument("config")
    p_run.add_argument("--jobs", type=int, default=1)
    p_sweep = sub.add_parser("sweep", help="sweep one regularizer hyperparameter")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", type=_parse_values, default=None)
    p_sweep.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return run(args.config, jobs=args.jobs)
        values = args.values if args.values is not None else DEFAULT_SWEEP_VALUES.get(args.param, [])
        return sweep(args.config, args.param, values, jobs=args.jobs)
    except (ConfigError, GraphFormatError, GraphValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
