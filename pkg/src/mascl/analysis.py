"""Sequence metrics, memory accounting and importance diagnostics.

CSV schemas (header row always written, column order fixed):

* ``report.csv``: method, lam, seed, task_index, task, acc_after_training, acc_at_end, forgetting
* ``aggregate.csv``: method, lam, n_seeds, avg_acc_mean, avg_acc_std, avg_forgetting_mean, avg_forgetting_std
* ``histogram.csv``: bin_left, bin_right, count
* ``correlation.csv``: set_a, set_b, top_k, spearman_all, spearman_top_k, overlap_at_k
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, StateError
from .nn import FlatParams, Layout

REPORT_COLUMNS = ["method", "lam", "seed", "task_index", "task",
                  "acc_after_training", "acc_at_end", "forgetting"]
AGGREGATE_COLUMNS = ["method", "lam", "n_seeds", "avg_acc_mean", "avg_acc_std",
                     "avg_forgetting_mean", "avg_forgetting_std"]
HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "count"]
CORRELATION_COLUMNS = ["set_a", "set_b", "top_k", "spearman_all", "spearman_top_k", "overlap_at_k"]


@dataclass
class MemoryLedger:
    """Float counts. ``storage`` persists between tasks; ``training_only``
    exists only while a task is being trained."""

    storage: dict[str, int]
    training_only: dict[str, int] = field(default_factory=dict)

    @property
    def storage_floats(self) -> int:
        return sum(self.storage.values())

    @property
    def training_floats(self) -> int:
        return self.storage_floats + sum(self.training_only.values())

    def to_dict(self) -> dict:
        return {"storage": dict(self.storage), "training_only": dict(self.training_only),
                "storage_floats": self.storage_floats, "training_floats": self.training_floats}


@dataclass
class SequenceReport:
    method: str
    seed: int
    lam: float
    task_names: list[str]
    acc_matrix: list[list[float]]
    loss_matrix: list[list[float]]
    acc_after_training: list[float]
    acc_at_end: list[float]
    forgetting: list[float] | None = None
    avg_acc: float | None = None
    avg_forgetting: float | None = None
    memory: MemoryLedger | None = None
    omega_stats: dict | None = None
    probes: dict[str, dict[str, float]] = field(default_factory=dict)
    state: Any = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("state", "memory")}
        d["memory"] = self.memory.to_dict() if self.memory else None
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def compute_forgetting(report: SequenceReport) -> SequenceReport:
    """Fill per-task forgetting (signed: negative is backward transfer) and averages.

    Average forgetting runs over all tasks but the last, whose forgetting is 0
    by construction; a single-task report averages to 0.
    """
    after, end = report.acc_after_training, report.acc_at_end
    if not after or len(after) != len(end):
        raise StateError("accuracy vectors missing or of different length")
    if any(v is None or not np.isfinite(v) for v in list(after) + list(end)):
        raise StateError("accuracy vectors have missing entries")
    report.forgetting = [float(a - e) for a, e in zip(after, end)]
    report.avg_acc = float(np.mean(end))
    report.avg_forgetting = float(np.mean(report.forgetting[:-1])) if len(after) > 1 else 0.0
    return report


# -- memory ---------------------------------------------------------------------

REGULARIZED = ("mas-global", "mas-vector", "l-mas", "ewc", "si")


def memory_account(method: str, layout: Layout, n_tasks: int | None = None) -> MemoryLedger:
    """Closed-form float counts for ``method`` on a network with ``layout``.

    ``n_tasks`` rescales the head block when it differs from the number of
    heads in ``layout`` (one head per task). Regularizer state is a single
    merged map plus one snapshot, so it does not grow with the task count.
    """
    trunk = layout.trunk_size
    head_ids = layout.head_ids
    heads = layout.size - trunk
    if n_tasks is not None and head_ids:
        heads = heads // len(head_ids) * n_tasks
    storage = {"trunk": trunk, "heads": heads}
    training = {}
    if method in ("finetune", "joint"):
        pass
    elif method in REGULARIZED:
        storage["omega"] = trunk
        storage["theta_star"] = trunk
        if method == "si":
            training["si_path"] = trunk
            training["si_theta_start"] = trunk
    elif method == "l2":
        storage["theta_star"] = trunk
    else:
        raise ValueError(f"unknown method {method!r}")
    return MemoryLedger(storage, training)


def live_memory(state, method: str) -> MemoryLedger:
    """Count floats in the serialized live structures of a finished run.

    Stored regularizer state is restricted to the trunk before serializing,
    since head entries of omega and the anchor are never used.
    """
    from .nn import flat_to_dict

    def n_floats(flat: FlatParams) -> int:
        return len(flat_to_dict(flat)["values"])

    params = state.network.flatten()
    storage = {"trunk": n_floats(params.trunk()), "heads": n_floats(params) - n_floats(params.trunk())}
    training = {}
    if state.penalty is not None:
        if method != "l2":
            storage["omega"] = n_floats(state.penalty.omega.trunk())
        storage["theta_star"] = n_floats(state.penalty.theta_star.trunk())
    if state.si is not None:
        training["si_path"] = n_floats(state.si.path_omega.trunk())
        training["si_theta_start"] = n_floats(state.si.theta_start.trunk())
    return MemoryLedger(storage, training)


# -- importance diagnostics ----------------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    median: float
    mean: float
    top_k: int
    top_k_threshold: float

    def rows(self) -> list[tuple[float, float, int]]:
        return [(float(a), float(b), int(c)) for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def _values(x) -> np.ndarray:
    if isinstance(x, FlatParams):
        return x.trunk_values()
    if hasattr(x, "omega"):
        return x.omega.trunk_values()
    return np.asarray(x, dtype=np.float64).ravel()


def omega_histogram(omega, bins: int = 50, top_k: int = 1000) -> Histogram:
    """Histogram of importance values plus median, mean and the top-k cutoff."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    v = _values(omega)
    if v.size == 0:
        raise ValueError("empty importance map")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        edges, counts = np.array([lo, hi]), np.array([v.size])
    else:
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    k = min(top_k, v.size)
    thresh = float(np.sort(v)[::-1][k - 1])
    return Histogram(edges, counts, float(np.median(v)), float(v.mean()), k, thresh)


def omega_summary(values) -> dict:
    v = _values(values)
    med = float(np.median(v))
    return {
        "n": int(v.size), "median": med, "mean": float(v.mean()), "max": float(v.max()),
        "frac_above_10x_median": float(np.mean(v > 10.0 * med)),
    }


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation with average ranks for ties; nan if either side is constant."""
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    da = ra - ra.mean()
    db = rb - rb.mean()
    den = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if den == 0:
        return float("nan")
    return float(np.clip(np.dot(da, db) / den, -1.0, 1.0))


def top_k_indices(v: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-v, kind="stable")[:k]


def omega_correlation(map_a, map_b, top_k: int = 1000) -> dict[str, float]:
    if isinstance(map_a, FlatParams) and isinstance(map_b, FlatParams):
        map_a.check_layout(map_b)
    elif hasattr(map_a, "layout") and hasattr(map_b, "layout") and map_a.layout != map_b.layout:
        raise ShapeError("importance map layouts differ")
    a, b = _values(map_a), _values(map_b)
    if a.shape != b.shape:
        raise ShapeError(f"importance maps differ in size: {a.size} vs {b.size}")
    if not 1 <= top_k <= a.size:
        raise ValueError(f"top_k must be in [1, {a.size}]")
    ia, ib = top_k_indices(a, top_k), top_k_indices(b, top_k)
    return {
        "spearman_all": spearman(a, b),
        "spearman_top_k_of_a": spearman(a[ia], b[ia]),
        "overlap_at_k": len(np.intersect1d(ia, ib)) / top_k,
    }


# -- aggregation and CSV --------------------------------------------------------

def aggregate(reports: Sequence[SequenceReport]) -> list[dict]:
    """Mean and (population) std of average accuracy / forgetting per (method, lam)."""
    groups: dict[tuple[str, float], list[SequenceReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.lam), []).append(r)
    rows = []
    for (method, lam), rs in groups.items():
        acc = np.array([r.avg_acc for r in rs])
        fgt = np.array([r.avg_forgetting for r in rs])
        rows.append({"method": method, "lam": lam, "n_seeds": len(rs),
                     "avg_acc_mean": float(acc.mean()), "avg_acc_std": float(acc.std()),
                     "avg_forgetting_mean": float(fgt.mean()), "avg_forgetting_std": float(fgt.std())})
    return rows


def report_rows(report: SequenceReport) -> list[dict]:
    return [{"method": report.method, "lam": report.lam, "seed": report.seed, "task_index": i,
             "task": name, "acc_after_training": report.acc_after_training[i],
             "acc_at_end": report.acc_at_end[i], "forgetting": report.forgetting[i]}
            for i, name in enumerate(report.task_names)]


def write_csv(path, columns: list[str], rows: Iterable[dict | Sequence]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns] if isinstance(row, dict) else [_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_histogram_csv(path, hist: Histogram) -> None:
    write_csv(path, HISTOGRAM_COLUMNS, hist.rows())
