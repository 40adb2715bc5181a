"""Declarative experiment grids: config, validation, presets and the cell runner.

A config is one JSON object. Every field is optional when a preset is named;
explicit fields override the preset one by one (nested ``tasks``, ``train``
and ``diagnostics`` objects merge key by key).

::

    {
      "preset": "permuted-mnist-5",
      "tasks": {"kind": "permuted-mnist", "n_tasks": 5, "n_train": 5000, "n_eval": 1000},
      "methods": ["finetune", "mas-global", "l-mas", "ewc", "si"],
      "lambdas": [1.0],
      "seeds": [1, 2, 3],
      "importance_source": "train",
      "train": {"epochs": 10, "batch_size": 200, "lr": 0.1, "hidden": [128, 128]},
      "diagnostics": {"histogram_bins": 50, "top_k": 1000, "correlation": false}
    }

A cell is one (method, lambda, seed) triple. ``finetune`` and ``joint`` ignore
the lambda grid and run once per seed with lambda 0.
"""
from __future__ import annotations

import copy
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import importance as imp
from .analysis import (AGGREGATE_COLUMNS, CORRELATION_COLUMNS, REPORT_COLUMNS, SequenceReport,
                       aggregate, omega_correlation, omega_histogram, report_rows, write_csv)
from .continual import (FINETUNE, JOINT, METHOD_ALIASES, METHODS, SOURCES, TrainConfig,
                        estimate_importance_phase, joint_train, run_sequence)
from .errors import ConfigError
from .tasks import (Dataset, TaskSpec, mnist_desk_tasks, select_subset, synth_classification,
                    synth_embedding, with_importance_set)

log = logging.getLogger(__name__)

TASK_KINDS = ("permuted-mnist", "synthetic-classification", "synthetic-embedding")
CONFIG_FIELDS = ("preset", "name", "tasks", "methods", "lambdas", "seeds", "importance_source",
                 "train", "diagnostics", "data_dir", "out_dir")
TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig)
                     if f.name not in ("seed", "method", "lam", "importance_source"))
CORRELATION_METHODS = (imp.MAS_GLOBAL, imp.MAS_VECTOR, imp.L_MAS)
LOG_COLUMNS = ["task", "epoch", "task_loss", "penalty", "train_metric"]
PROBE_COLUMNS = ["method", "lam", "seed", "probe", "after", "end", "forgetting"]

TASK_DEFAULTS = {
    "permuted-mnist": {"n_tasks": 5, "n_train": 5000, "n_eval": 1000, "full": False,
                       "identity_first": True, "multi_head": False},
    "synthetic-classification": {"n_tasks": 2, "classes": 4, "dim": 10, "per_class": 200,
                                 "spread": 2.0, "noise": 1.0, "multi_head": True,
                                 "split_support": False, "subset_labels": None},
    "synthetic-embedding": {"n_tasks": 2, "dim_in": 10, "dim_out": 5, "n": 500, "noise": 0.05,
                            "shift": 0.0},
}

# Desk-scale settings. Training hyperparameters were calibrated once on the
# 5k-image MNIST subset and on the synthetic generators; see the README.
PRESETS: dict[str, dict] = {
    "permuted-mnist-5": {
        "name": "permuted-mnist-5",
        "tasks": {"kind": "permuted-mnist", "n_tasks": 5, "n_train": 5000, "n_eval": 1000},
        "methods": ["finetune", "mas-global", "l-mas", "ewc", "si"],
        "lambdas": [1.0],
        "seeds": [1, 2, 3],
        "train": {"epochs": 10, "batch_size": 200, "lr": 0.3, "hidden": [512, 512], "merge": "mean"},
    },
    "lambda-sensitivity": {
        "name": "lambda-sensitivity",
        "tasks": {"kind": "permuted-mnist", "n_tasks": 5, "n_train": 5000, "n_eval": 1000},
        "methods": ["mas-global"],
        "lambdas": [0.1, 1.0, 10.0],
        "seeds": [1, 2, 3],
        "train": {"epochs": 10, "batch_size": 200, "lr": 0.3, "hidden": [512, 512], "merge": "mean"},
    },
    "adaptation-subset": {
        "name": "adaptation-subset",
        "tasks": {"kind": "synthetic-classification", "n_tasks": 4, "classes": 6, "dim": 10,
                  "per_class": 300, "spread": 2.0, "noise": 1.0, "multi_head": True,
                  "split_support": True, "subset_labels": [0, 1, 2]},
        "methods": ["mas-global"],
        "lambdas": [1.0],
        "seeds": [1, 2, 3],
        "importance_source": "custom-subset",
        "train": {"epochs": 20, "batch_size": 20, "lr": 0.1, "hidden": [16]},
    },
    "vector-vs-global": {
        "name": "vector-vs-global",
        "tasks": {"kind": "synthetic-classification", "n_tasks": 2, "classes": 4, "dim": 10,
                  "per_class": 200, "spread": 2.0, "multi_head": True},
        "methods": ["mas-global", "mas-vector"],
        "lambdas": [1.0],
        "seeds": [1, 2, 3],
        "train": {"epochs": 20, "batch_size": 20, "lr": 0.1, "hidden": [32]},
    },
    "omega-diagnostics": {
        "name": "omega-diagnostics",
        "tasks": {"kind": "synthetic-classification", "n_tasks": 1, "classes": 5, "dim": 20,
                  "per_class": 400, "spread": 3.0, "multi_head": True},
        "methods": ["mas-global"],
        "lambdas": [1.0],
        "seeds": [0],
        "train": {"epochs": 10, "batch_size": 20, "lr": 0.1, "hidden": [64, 64]},
        "diagnostics": {"correlation": True},
    },
    "embedding-2": {
        "name": "embedding-2",
        "tasks": {"kind": "synthetic-embedding", "n_tasks": 2, "dim_in": 10, "dim_out": 5, "n": 500,
                  "shift": 3.0},
        "methods": ["finetune", "mas-global", "joint"],
        "lambdas": [5.0, 20.0],
        "seeds": [1, 2, 3],
        "train": {"epochs": 30, "batch_size": 20, "lr": 0.05, "hidden": [64]},
    },
}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    tasks: dict = field(default_factory=lambda: {"kind": "synthetic-classification"})
    methods: list[str] = field(default_factory=lambda: [imp.MAS_GLOBAL])
    lambdas: list[float] = field(default_factory=lambda: [1.0])
    seeds: list[int] = field(default_factory=lambda: [1])
    importance_source: str = "train"
    train: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    data_dir: str | None = None
    out_dir: str | None = None
    preset: str | None = None

    def train_config(self, method: str, lam: float, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, method=method, lam=lam,
                           importance_source=self.importance_source, **self.train)

    def task_options(self) -> dict:
        kind = self.tasks.get("kind")
        return {**TASK_DEFAULTS[kind], **{k: v for k, v in self.tasks.items() if k != "kind"}}

    def cells(self) -> list[tuple[str, float, int]]:
        out = []
        for method in self.methods:
            method = METHOD_ALIASES.get(method, method)
            lams = [0.0] if method in (FINETUNE, JOINT) else self.lambdas
            for lam in lams:
                for seed in self.seeds:
                    out.append((method, float(lam), int(seed)))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: dict, preset: str | None = None) -> dict:
    """Apply the named preset (argument wins over the ``preset`` field) under ``raw``."""
    name = preset or raw.get("preset")
    if name is None:
        return dict(raw)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {sorted(PRESETS)}")
    return _merge(_merge(PRESETS[name], {"preset": name}), {k: v for k, v in raw.items() if k != "preset"})


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(raw: dict, preset: str | None = None) -> list[str]:
    """Every problem with ``raw`` (after preset resolution), as readable strings."""
    if not isinstance(raw, dict):
        return ["config must be a JSON object"]
    try:
        cfg = resolve(raw, preset)
    except ConfigError as e:
        return [str(e)]
    errs = []
    for k in cfg:
        if k not in CONFIG_FIELDS:
            errs.append(f"unknown field {k!r}; valid: {list(CONFIG_FIELDS)}")

    methods = cfg.get("methods", [imp.MAS_GLOBAL])
    valid_methods = sorted(set(METHODS) | {JOINT} | set(METHOD_ALIASES))
    if not isinstance(methods, list) or not methods:
        errs.append("methods: must be a non-empty list")
    else:
        for m in methods:
            if m not in valid_methods:
                errs.append(f"methods: unknown method {m!r}; valid: {valid_methods}")

    lambdas = cfg.get("lambdas", [1.0])
    if not isinstance(lambdas, list) or not lambdas:
        errs.append("lambdas: must be a non-empty list")
    else:
        for i, lam in enumerate(lambdas):
            if not _is_number(lam):
                errs.append(f"lambdas[{i}]: must be a number, got {lam!r}")
            elif lam < 0:
                errs.append(f"lambdas[{i}]: lambda must be >= 0, got {lam}")

    seeds = cfg.get("seeds", [1])
    if not isinstance(seeds, list) or not seeds:
        errs.append("seeds: must be a non-empty list of integers")
    elif not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        errs.append("seeds: every seed must be a nonnegative integer")
    elif len(set(seeds)) != len(seeds):
        errs.append("seeds: duplicate seeds")

    source = cfg.get("importance_source", "train")
    if source not in SOURCES:
        errs.append(f"importance_source: must be one of {list(SOURCES)}, got {source!r}")

    train = cfg.get("train", {})
    if not isinstance(train, dict):
        errs.append("train: must be an object")
        train = {}
    for k, v in train.items():
        if k not in TRAIN_FIELDS:
            errs.append(f"train.{k}: unknown field; valid: {list(TRAIN_FIELDS)}")
    if not errs or all(not e.startswith("train.") for e in errs):
        try:
            TrainConfig(**{k: v for k, v in train.items() if k in TRAIN_FIELDS})
        except (ConfigError, TypeError, ValueError) as e:
            errs.append(f"train: {e}")

    errs += _validate_tasks(cfg.get("tasks", {"kind": "synthetic-classification"}), source)
    diag = cfg.get("diagnostics", {})
    if not isinstance(diag, dict):
        errs.append("diagnostics: must be an object")
    else:
        for k in diag:
            if k not in ("histogram_bins", "top_k", "correlation"):
                errs.append(f"diagnostics.{k}: unknown field")
        if "histogram_bins" in diag and not (isinstance(diag["histogram_bins"], int) and diag["histogram_bins"] >= 2):
            errs.append("diagnostics.histogram_bins: must be an integer >= 2")
        if "top_k" in diag and not (isinstance(diag["top_k"], int) and diag["top_k"] >= 1):
            errs.append("diagnostics.top_k: must be a positive integer")
    return errs


def _validate_tasks(tasks, source: str) -> list[str]:
    if not isinstance(tasks, dict):
        return ["tasks: must be an object"]
    kind = tasks.get("kind")
    if kind not in TASK_KINDS:
        return [f"tasks.kind: must be one of {list(TASK_KINDS)}, got {kind!r}"]
    errs = []
    allowed = TASK_DEFAULTS[kind]
    for k, v in tasks.items():
        if k == "kind":
            continue
        if k not in allowed:
            errs.append(f"tasks.{k}: unknown field for {kind}; valid: {sorted(allowed)}")
    opts = {**allowed, **tasks}
    counts = {"permuted-mnist": ("n_tasks", "n_train", "n_eval"),
              "synthetic-classification": ("n_tasks", "classes", "dim", "per_class"),
              "synthetic-embedding": ("n_tasks", "dim_in", "dim_out", "n")}[kind]
    for k in counts:
        v = opts[k]
        if not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
            errs.append(f"tasks.{k}: must be a positive integer, got {v!r}")
    for k in ("spread", "noise", "shift"):
        if k in opts and not (_is_number(opts[k]) and opts[k] >= 0):
            errs.append(f"tasks.{k}: must be a number >= 0, got {opts[k]!r}")
    if kind == "synthetic-classification" and isinstance(opts["classes"], int) and opts["classes"] < 2:
        errs.append("tasks.classes: need at least 2 classes")
    if kind == "synthetic-classification" and opts["subset_labels"] is not None:
        sub = opts["subset_labels"]
        if not isinstance(sub, list) or not sub or not all(isinstance(c, int) for c in sub):
            errs.append("tasks.subset_labels: must be a non-empty list of class ids")
        elif isinstance(opts["classes"], int) and (min(sub) < 0 or max(sub) >= opts["classes"]):
            errs.append("tasks.subset_labels: class id out of range")
        elif isinstance(opts["classes"], int) and len(set(sub)) >= opts["classes"]:
            errs.append("tasks.subset_labels: subset must leave a non-empty complement")
    if source == "custom-subset" and not (kind == "synthetic-classification" and opts.get("subset_labels")):
        errs.append("importance_source: custom-subset needs tasks.subset_labels (synthetic-classification)")
    return errs


def load_config(raw: dict, preset: str | None = None, data_dir: str | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    errs = validate(raw, preset)
    if errs:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
    cfg = resolve(raw, preset)
    if data_dir is not None:
        cfg["data_dir"] = data_dir
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    cfg["train"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.get("train", {}).items()}
    return ExperimentConfig(**cfg)


def read_config(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e


# -- task construction ---------------------------------------------------------------

def build_tasks(cfg: ExperimentConfig, seed: int) -> tuple[list[TaskSpec], dict[str, tuple[int, Dataset]]]:
    """Tasks for one seed, plus named probe sets ``{name: (task index, dataset)}``."""
    kind = cfg.tasks["kind"]
    o = cfg.task_options()
    probes: dict[str, tuple[int, Dataset]] = {}
    if kind == "permuted-mnist":
        if cfg.data_dir is None:
            raise ConfigError("permuted-mnist tasks need a data directory (--data-dir)")
        tasks = mnist_desk_tasks(cfg.data_dir, o["n_tasks"], seed, o["n_train"], o["n_eval"],
                                 o["full"], o["identity_first"], o["multi_head"])
    elif kind == "synthetic-embedding":
        tasks = [synth_embedding(seed * 100 + i, o["dim_in"], o["dim_out"], o["n"], o["noise"], name=f"embed-{i}",
                                 shift=o["shift"])
                 for i in range(o["n_tasks"])]
    else:
        tasks = []
        for i in range(o["n_tasks"]):
            tasks.append(synth_classification(
                seed * 100 + i, o["classes"], o["dim"], o["per_class"], o["spread"], o["noise"],
                head=f"t{i}" if o["multi_head"] else None, name=f"synth-{i}",
                split_support=o["split_support"] and i == 0))
        if o["subset_labels"]:
            a = sorted(set(o["subset_labels"]))
            b = [c for c in range(o["classes"]) if c not in a]
            first = tasks[0]
            probes = {"A": (0, select_subset(first.eval, labels=a, name="A")),
                      "B": (0, select_subset(first.eval, labels=b, name="B"))}
            tasks[0] = with_importance_set(first, select_subset(first.train, labels=a).unlabeled())
            tasks[1:] = [with_importance_set(t, t.train.unlabeled()) for t in tasks[1:]]
    return tasks, probes


# -- running ------------------------------------------------------------------------------

@dataclass
class CellResult:
    method: str
    lam: float
    seed: int
    report: SequenceReport
    histogram: object | None = None
    correlation: dict | None = None
    logs: list = field(default_factory=list)

    @property
    def key(self) -> str:
        return cell_key(self.method, self.lam, self.seed)


def cell_key(method: str, lam: float, seed: int) -> str:
    return f"{method}_lam{lam:g}_seed{seed}"


def run_cell(cfg: ExperimentConfig, method: str, lam: float, seed: int) -> CellResult:
    tasks, probes = build_tasks(cfg, seed)
    tc = cfg.train_config(FINETUNE if method == JOINT else method, lam, seed)
    if method == JOINT:
        _, report = joint_train(tasks, tc)
        return CellResult(method, lam, seed, report, logs=report.state.logs)
    report = run_sequence(tasks, tc, probes or None)
    hist = corr = None
    diag = cfg.diagnostics
    state = report.state
    if state.importance is not None:
        hist = omega_histogram(state.importance.omega, diag.get("histogram_bins", 50), diag.get("top_k", 1000))
    if diag.get("correlation") and method in CORRELATION_METHODS:
        last = tasks[-1]
        a = estimate_importance_phase(state.network, last, replace(tc, importance_source="train"))
        b = estimate_importance_phase(state.network, last, replace(tc, importance_source="test"))
        k = min(diag.get("top_k", 1000), a.omega.layout.trunk_size)
        corr = omega_correlation(a, b, k)
        corr["top_k"] = k
    return CellResult(method, lam, seed, report, hist, corr, state.logs)


def _run_cell_args(args) -> CellResult:
    cfg, method, lam, seed = args
    result = run_cell(cfg, method, lam, seed)
    result.report.state = None  # live networks are not sent back across processes
    return result


def run_experiment(cfg: ExperimentConfig, parallel: int = 1) -> list[CellResult]:
    """Run every cell (serially unless ``parallel`` > 1), in config order."""
    cells = cfg.cells()
    if parallel > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_cell_args, [(cfg, *c) for c in cells]))
    out = []
    for method, lam, seed in cells:
        log.info("cell %s", cell_key(method, lam, seed))
        out.append(run_cell(cfg, method, lam, seed))
    return out


def write_outputs(cfg: ExperimentConfig, results: list[CellResult], out_dir) -> None:
    """Per-cell JSON and training logs plus the summary CSVs. Content is deterministic."""
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    reports = [r.report for r in results]
    for r in results:
        (out / "cells" / f"{r.key}.json").write_text(r.report.to_json() + "\n")
        write_csv(out / "logs" / f"{r.key}.csv", LOG_COLUMNS, [asdict(e) for e in r.logs])
    write_csv(out / "report.csv", REPORT_COLUMNS, [row for rep in reports for row in report_rows(rep)])
    write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, aggregate(reports))
    hist_rows = []
    for r in results:
        if r.histogram is not None:
            hist_rows += [{"cell": r.key, "bin_left": a, "bin_right": b, "count": c} for a, b, c in r.histogram.rows()]
    if hist_rows:
        write_csv(out / "histogram.csv", ["cell", "bin_left", "bin_right", "count"], hist_rows)
    corr_rows = [{"cell": r.key, "set_a": "train", "set_b": "test", "top_k": r.correlation["top_k"],
                  "spearman_all": r.correlation["spearman_all"],
                  "spearman_top_k": r.correlation["spearman_top_k_of_a"],
                  "overlap_at_k": r.correlation["overlap_at_k"]}
                 for r in results if r.correlation is not None]
    if corr_rows:
        write_csv(out / "correlation.csv", ["cell"] + CORRELATION_COLUMNS, corr_rows)
    probe_rows = [{"method": r.method, "lam": r.lam, "seed": r.seed, "probe": name,
                   "after": p["after"], "end": p["end"], "forgetting": p["after"] - p["end"]}
                  for r in results for name, p in sorted(r.report.probes.items())]
    if probe_rows:
        write_csv(out / "probes.csv", PROBE_COLUMNS, probe_rows)


__all__ = ["ExperimentConfig", "PRESETS", "CellResult", "validate", "resolve", "load_config",
           "read_config", "build_tasks", "run_cell", "run_experiment", "write_outputs", "cell_key"]
