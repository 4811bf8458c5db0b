"""``es-split`` experiment runner.

Every subcommand writes JSON-lines records (one per run, each embedding the
fully resolved experiment config) and a CSV summary derived from them.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import CapacityError, DivergenceError, ParseError, UndefinedMetricError, ValidationError
from .graph import HOMOPHILY_MEASURES, Graph, load_dataset
from .model import forward_logits
from .synth import (CSBMSpec, Fractions, NoiseSpec, PerClassCount, add_edge_noise,
                    circulant_categorical, csbm_generate, make_splits)
from .train import TrainConfig, evaluate, time_inference, train_model

log = logging.getLogger("es_split")

COMMANDS = ("bench", "csbm-grid", "robustness", "timing", "ablation", "homophily")
MLP_FAMILY = ("mlp", "graphmlp", "esmlp")

DEFAULTS = {
    "dataset": None,
    "dataset_name": None,
    "models": ["esmlp"],
    "seed": 0,
    "repeats": 1,
    "splits": {"scheme": "auto"},
    "train": {},
    "model_overrides": {},
    "csbm": {"n": 2000, "p": 0.8, "q": 0.1, "sigma": 0.2},
    "grid": {"p": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "q": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]},
    "noise": {"levels": [0.25, 0.5, 1.0, 2.0], "kinds": ["uniform", "categorical"],
              "preset": None},
    "timing": {"repeats": 20, "modes": ["full_graph", "test_only"]},
    "ablation": {"variants": ["full", "no_nc", "no_icr"]},
    "wallclock": False,
    "out": None,
}


class UsageError(Exception):
    """Bad command line or config file (exit code 1)."""


class DataError(Exception):
    """Dataset could not be loaded or transformed (exit code 2)."""


# ---------------------------------------------------------------- config


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then command-line flags (flags win)."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    if args.dataset is not None:
        cfg["dataset"] = args.dataset
    if args.model:
        cfg["models"] = list(args.model)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.repeats is not None:
        cfg["repeats"] = args.repeats
    if args.out is not None:
        cfg["out"] = args.out
    cfg["command"] = args.command
    if cfg["repeats"] < 1:
        raise UsageError("repeats must be >= 1")
    for m in cfg["models"]:
        if m not in ("mlp", "graphmlp", "esmlp", "gcn"):
            raise UsageError(f"unknown model {m!r}")
    return cfg


def _train_config(cfg: dict, model: str, seed: int, dataset_name: str | None,
                  extra: dict | None = None) -> TrainConfig:
    overrides = dict(cfg["train"])
    overrides.update(cfg["model_overrides"].get(model, {}))
    overrides.update(extra or {})
    overrides["seed"] = seed
    try:
        return TrainConfig.for_dataset(model, dataset_name, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training options for {model}: {exc}") from None


# ---------------------------------------------------------------- graphs


def _dataset_name(cfg: dict) -> str | None:
    if cfg["dataset_name"]:
        return cfg["dataset_name"]
    if cfg["dataset"]:
        return Path(cfg["dataset"]).name.lower()
    return "csbm"


def _load(cfg: dict) -> Graph:
    if cfg["dataset"]:
        try:
            return load_dataset(cfg["dataset"])
        except (OSError, ParseError, ValidationError, ValueError) as exc:
            raise DataError(f"cannot load dataset {cfg['dataset']}: {exc}") from None
    c = cfg["csbm"]
    return csbm_generate(CSBMSpec(c["n"], c["p"], c["q"], c.get("d"), c.get("mu"),
                                  c.get("sigma", 0.2), c.get("seed", cfg["seed"])))


def _split_graph(g: Graph, cfg: dict, index: int, from_csbm: bool) -> Graph:
    """Graph whose active split is number ``index`` under the configured scheme."""
    scheme = dict(cfg["splits"])
    kind = scheme.pop("scheme", "auto")
    if kind == "auto":
        kind = "file" if g.splits else ("fractions" if from_csbm else "per_class")
        if kind == "fractions" and not scheme:
            scheme = {"train": 0.6, "val": 0.2, "test": 0.2}
    try:
        if kind == "file":
            if not g.splits:
                raise DataError("dataset has no splits.json")
            return g.select_split(index % len(g.splits))
        if kind == "fractions":
            s = make_splits(g, Fractions(**scheme), 1, cfg["seed"] + index)
        elif kind == "per_class":
            s = make_splits(g, PerClassCount(**scheme), 1, cfg["seed"] + index)
        else:
            raise UsageError(f"unknown split scheme {kind!r}")
    except TypeError as exc:
        raise UsageError(f"bad split options: {exc}") from None
    except (CapacityError, ValidationError) as exc:
        raise DataError(str(exc)) from None
    return g.with_splits(s)


# ---------------------------------------------------------------- execution


def worker_count() -> int:
    raw = os.environ.get("ES_SPLIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"ES_SPLIT_THREADS must be an integer, got {raw!r}") from None


def run_jobs(fn, jobs: list) -> list:
    """Map ``fn`` over ``jobs`` in order, in worker processes when allowed."""
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _result_dict(res, wallclock: bool) -> dict:
    out = {"best_val": res.best_val, "test": res.test, "best_epoch": res.best_epoch,
           "epochs_run": res.epochs_run, "components": res.components, "trace": res.trace}
    if wallclock:
        out["train_seconds"] = res.train_seconds
    return out


def _train_job(graph: Graph, tcfg: TrainConfig, wallclock: bool) -> dict:
    _, res = train_model(graph, tcfg)
    return _result_dict(res, wallclock)


class Appender:
    """Single writer for the JSON-lines stream."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        line = json.dumps(record, default=_json_default)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        else:
            print(line)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary(records: list[dict], keys: list[str], value: str, path) -> list[dict]:
    """Group ``records`` by ``keys`` and write mean/std/count of ``value`` as CSV."""
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    rows = []
    for key, recs in groups.items():
        vals = np.array([r[value] for r in recs], dtype=np.float64)
        row = dict(zip(keys, key))
        row.update(mean=float(vals.mean()), std=float(vals.std()), runs=len(vals))
        extras = [k for k in recs[0] if k.startswith("h_")]
        for k in extras:
            hv = [r[k] for r in recs if r.get(k) is not None]
            row[k] = float(np.mean(hv)) if hv else None
        rows.append(row)
    if path:
        fields = list(rows[0]) if rows else keys + ["mean", "std", "runs"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


def _summary_path(cfg: dict) -> Path | None:
    return Path(cfg["out"]).with_suffix(".csv") if cfg["out"] else None


def homophily_report(g: Graph) -> dict:
    out = {"n": g.n, "edges": g.num_edges, "d": g.num_features, "classes": g.num_classes}
    for name, fn in HOMOPHILY_MEASURES.items():
        try:
            out[name] = fn(g)
        except (UndefinedMetricError, ValueError) as exc:
            out[name] = None
            out.setdefault("undefined", {})[name] = str(exc)
    return out


# ---------------------------------------------------------------- subcommands


def cmd_bench(cfg: dict) -> list[dict]:
    g = _load(cfg)
    name = _dataset_name(cfg)
    jobs, meta = [], []
    for model in cfg["models"]:
        for i in range(cfg["repeats"]):
            gi = _split_graph(g, cfg, i, not cfg["dataset"])
            tcfg = _train_config(cfg, model, cfg["seed"] + i, name)
            jobs.append((gi, tcfg, cfg["wallclock"]))
            meta.append({"model": model, "split": i, "seed": cfg["seed"] + i,
                         "train_config": tcfg.to_dict()})
    out = Appender(cfg["out"])
    for m, res in zip(meta, run_jobs(_train_job, jobs)):
        out.write({"command": "bench", **m, "test": res["test"], "result": res, "config": cfg})
    write_summary(out.records, ["model"], "test", _summary_path(cfg))
    return out.records


def _grid_cells(cfg: dict) -> list[tuple[float, float]]:
    grid = cfg["grid"]
    if "cells" in grid:
        return [tuple(c) for c in grid["cells"]]
    return [(p, q) for p in grid["p"] for q in grid["q"]]


def _csbm_cell_job(cfg: dict, p: float, q: float, rep: int, model: str) -> dict:
    c = cfg["csbm"]
    seed = cfg["seed"] + rep
    g = csbm_generate(CSBMSpec(c["n"], p, q, c.get("d"), c.get("mu"), c.get("sigma", 0.2), seed))
    g = g.with_splits(make_splits(g, Fractions(0.6, 0.2, 0.2), 1, seed))
    tcfg = _train_config(cfg, model, seed, "csbm")
    _, res = train_model(g, tcfg)
    rec = {"command": "csbm-grid", "model": model, "p": p, "q": q, "repeat": rep, "seed": seed,
           "test": res.test, **homophily_report(g), "result": _result_dict(res, cfg["wallclock"]),
           "train_config": tcfg.to_dict()}
    rec.pop("undefined", None)
    return rec


def cmd_csbm_grid(cfg: dict) -> list[dict]:
    jobs = [(cfg, p, q, rep, model) for (p, q) in _grid_cells(cfg)
            for model in cfg["models"] for rep in range(cfg["repeats"])]
    out = Appender(cfg["out"])
    for rec in run_jobs(_csbm_cell_job, jobs):
        out.write({**rec, "config": cfg})
    write_summary(out.records, ["model", "p", "q"], "test", _summary_path(cfg))
    return out.records


def _noise_distributions(g: Graph, cfg: dict) -> dict:
    preset = cfg["noise"].get("preset")
    if preset is None and g.num_classes == 2:
        preset = "binary"
    return circulant_categorical(g.num_classes, preset)


def cmd_robustness(cfg: dict) -> list[dict]:
    g0 = _load(cfg)
    name = _dataset_name(cfg)
    out = Appender(cfg["out"])
    for rep in range(cfg["repeats"]):
        g = _split_graph(g0, cfg, rep, not cfg["dataset"])
        seed = cfg["seed"] + rep
        trained = {}
        for model in cfg["models"]:
            tcfg = _train_config(cfg, model, seed, name)
            params, res = train_model(g, tcfg)
            clean = forward_logits(params, g)
            trained[model] = (params, tcfg, clean)
            out.write({"command": "robustness", "model": model, "repeat": rep, "seed": seed,
                       "kind": "clean", "level": 0.0, "added": 0, "test": res.test,
                       "invariant": True, "train_config": tcfg.to_dict(), "config": cfg})
        dists = _noise_distributions(g, cfg)
        for kind in cfg["noise"]["kinds"]:
            for level in cfg["noise"]["levels"]:
                k = int(round(level * g.num_edges))
                try:
                    noisy = add_edge_noise(g, NoiseSpec(k, kind, dists if kind == "categorical"
                                                        else {}, seed=seed))
                except CapacityError as exc:
                    raise DataError(f"noise level {level} ({kind}): {exc}") from None
                for model, (params, tcfg, clean) in trained.items():
                    logits = forward_logits(params, noisy)
                    invariant = bool(np.array_equal(logits, clean))
                    if model in MLP_FAMILY and not invariant:
                        raise RuntimeError(f"{model} predictions changed under edge noise")
                    out.write({"command": "robustness", "model": model, "repeat": rep,
                               "seed": seed, "kind": kind, "level": level, "added": k,
                               "test": evaluate(tcfg.metric, logits, noisy.labels, noisy.test),
                               "invariant": invariant, "train_config": tcfg.to_dict(),
                               "config": cfg})
    write_summary(out.records, ["model", "kind", "level"], "test", _summary_path(cfg))
    return out.records


def cmd_timing(cfg: dict) -> list[dict]:
    g0 = _load(cfg)
    name = _dataset_name(cfg)
    out = Appender(cfg["out"])
    reps = cfg["timing"]["repeats"]
    for rep in range(cfg["repeats"]):
        g = _split_graph(g0, cfg, rep, not cfg["dataset"])
        seed = cfg["seed"] + rep
        medians = {}
        for model in cfg["models"]:
            tcfg = _train_config(cfg, model, seed, name)
            params, res = train_model(g, tcfg)
            for mode in cfg["timing"]["modes"]:
                stats = time_inference(params, g, mode, reps)
                medians[(model, mode)] = stats["median"]
                out.write({"command": "timing", "model": model, "repeat": rep, "seed": seed,
                           "mode": mode, "median": stats["median"], "mean": stats["mean"],
                           "nodes": stats["nodes"], "edges": stats["edges"], "test": res.test,
                           "train_config": tcfg.to_dict(), "config": cfg})
        if ("gcn", "full_graph") in medians and ("esmlp", "test_only") in medians:
            out.write({"command": "timing", "model": "gcn/esmlp", "repeat": rep, "seed": seed,
                       "mode": "ratio", "median": medians[("gcn", "full_graph")]
                       / medians[("esmlp", "test_only")], "config": cfg})
    write_summary(out.records, ["model", "mode"], "median", _summary_path(cfg))
    return out.records


ABLATIONS = {
    "full": {},
    "no_nc": {"alpha_nc": 0.0},
    "no_icr": {"beta_icr": 0.0},
    "no_both": {"alpha_nc": 0.0, "beta_icr": 0.0},
}


def cmd_ablation(cfg: dict) -> list[dict]:
    g0 = _load(cfg)
    name = _dataset_name(cfg)
    jobs, meta = [], []
    for variant in cfg["ablation"]["variants"]:
        if variant not in ABLATIONS:
            raise UsageError(f"unknown ablation variant {variant!r}")
        for rep in range(cfg["repeats"]):
            g = _split_graph(g0, cfg, rep, not cfg["dataset"])
            tcfg = _train_config(cfg, "esmlp", cfg["seed"] + rep, name, ABLATIONS[variant])
            jobs.append((g, tcfg, cfg["wallclock"]))
            meta.append({"variant": variant, "repeat": rep, "seed": cfg["seed"] + rep,
                         "train_config": tcfg.to_dict()})
    out = Appender(cfg["out"])
    for m, res in zip(meta, run_jobs(_train_job, jobs)):
        out.write({"command": "ablation", "model": "esmlp", **m, "test": res["test"],
                   **{f"loss_{k}": res["components"].get(k) for k in ("ce", "nc", "icr")},
                   "result": res, "config": cfg})
    write_summary(out.records, ["variant"], "test", _summary_path(cfg))
    return out.records


def cmd_homophily(cfg: dict) -> dict:
    g = _load(cfg)
    report = homophily_report(g)
    for key in ("n", "edges", "d", "classes", *HOMOPHILY_MEASURES):
        val = report[key]
        shown = "undefined" if val is None else (f"{val:.4f}" if isinstance(val, float) else val)
        print(f"{key:>8}: {shown}", file=sys.stderr if cfg["out"] is None else sys.stdout)
    record = {"command": "homophily", **report, "config": cfg}
    Appender(cfg["out"]).write(record)
    return record


HANDLERS = {
    "bench": cmd_bench,
    "csbm-grid": cmd_csbm_grid,
    "robustness": cmd_robustness,
    "timing": cmd_timing,
    "ablation": cmd_ablation,
    "homophily": cmd_homophily,
}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="es-split", description="Edge-splitting MLP experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--dataset", help="dataset directory (features/edges/labels/splits)")
    p.add_argument("--model", action="append", help="model to run (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", help="JSON-lines output file (CSV summary written alongside)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"es-split: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"es-split: data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"es-split: training diverged: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
