import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mascl import importance as imp
from mascl.analysis import (AGGREGATE_COLUMNS, REPORT_COLUMNS, SequenceReport, aggregate,
                            compute_forgetting, live_memory, memory_account, omega_correlation,
                            omega_histogram, omega_summary, report_rows, spearman, write_csv,
                            write_histogram_csv)
from mascl.continual import TrainConfig, run_sequence
from mascl.errors import ShapeError, StateError
from mascl.nn import FlatParams, init_network
from mascl.tasks import synth_classification

from conftest import random_net


def report(after, end, method="mas-global", seed=0, lam=1.0):
    return SequenceReport(method=method, seed=seed, lam=lam, task_names=[f"t{i}" for i in range(len(after))],
                          acc_matrix=[], loss_matrix=[], acc_after_training=list(after), acc_at_end=list(end))


# -- forgetting ------------------------------------------------------------------------

@pytest.mark.parametrize("after,end,expected", [(0.9, 0.9, 0.0), (0.9, 0.7, 0.2), (0.8, 0.85, -0.05)])
def test_forgetting_examples(after, end, expected):
    r = compute_forgetting(report([after, 0.5], [end, 0.5]))
    assert r.forgetting[0] == pytest.approx(expected, abs=1e-15)
    assert r.avg_forgetting == pytest.approx(expected, abs=1e-15)


def test_forgetting_missing_entries():
    with pytest.raises(StateError):
        compute_forgetting(report([0.9, float("nan")], [0.8, 0.7]))
    with pytest.raises(StateError):
        compute_forgetting(report([0.9], [0.8, 0.7]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=8))
def test_forgetting_identity_and_averages(pairs):
    after, end = zip(*pairs)
    r = compute_forgetting(report(after, end))
    for a, e, f in zip(after, end, r.forgetting):
        assert f == a - e
    assert r.avg_acc == pytest.approx(np.mean(end))
    expected = np.mean(r.forgetting[:-1]) if len(pairs) > 1 else 0.0
    assert r.avg_forgetting == pytest.approx(expected)


def test_report_json_round_trip():
    import json
    r = compute_forgetting(report([0.9, 0.8], [0.7, 0.8]))
    doc = json.loads(r.to_json())
    assert doc["forgetting"] == r.forgetting and "state" not in doc


# -- memory ----------------------------------------------------------------------------

def test_memory_closed_forms():
    net = init_network([10, 8], {"a": [3], "b": [3]}, seed=0)
    layout = net.layout
    total, trunk = layout.size, layout.trunk_size
    ft = memory_account("finetune", layout)
    assert ft.storage_floats == total and ft.training_floats == total
    mas = memory_account("mas-global", layout)
    assert mas.storage_floats == total + 2 * trunk
    assert memory_account("ewc", layout).storage_floats == mas.storage_floats
    si = memory_account("si", layout)
    assert si.storage_floats == mas.storage_floats
    assert si.training_floats - mas.training_floats == 2 * trunk
    with pytest.raises(ValueError):
        memory_account("nope", layout)


def test_memory_constant_in_task_count():
    layout = init_network([10, 8], {"a": [3]}, seed=0).layout
    for method in ("finetune", "mas-global", "ewc", "si", "l2"):
        extra = [memory_account(method, layout, n).storage_floats - memory_account("finetune", layout, n).storage_floats
                 for n in (1, 5, 20)]
        assert len(set(extra)) == 1


def test_live_memory_matches_ledger():
    tasks = [synth_classification(i, 3, 6, 20, 3.0, head=f"t{i}", name=f"s{i}") for i in range(2)]
    for method in ("finetune", "mas-global", "ewc", "si", "l2"):
        rep = run_sequence(tasks, TrainConfig(epochs=1, batch_size=10, hidden=(8,), method=method))
        live = live_memory(rep.state, method)
        assert live.storage == rep.memory.storage, method
        assert live.training_floats == rep.memory.training_floats, method


# -- histogram / summary --------------------------------------------------------------------

def test_constant_map_histogram():
    h = omega_histogram(np.full(20, 3.0), bins=2)
    assert h.counts.tolist() == [20] and h.median == h.mean == 3.0


def test_histogram_counts_and_top_k():
    v = np.arange(100.0)
    h = omega_histogram(v, bins=10, top_k=5)
    assert h.counts.sum() == 100 and len(h.counts) == 10
    assert h.top_k_threshold == 95.0


def test_histogram_errors(tmp_path):
    with pytest.raises(ValueError):
        omega_histogram(np.ones(3), bins=1)
    with pytest.raises(ValueError):
        omega_histogram(np.array([]))
    write_histogram_csv(tmp_path / "h.csv", omega_histogram(np.arange(4.0), bins=2))
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["bin_left", "bin_right", "count"] and len(rows) == 3


def test_summary_of_skewed_values():
    s = omega_summary(np.array([1.0, 1.0, 1.0, 100.0]))
    assert s["median"] < s["mean"] and s["frac_above_10x_median"] == 0.25


# -- rank correlation --------------------------------------------------------------------------

def test_spearman_self_and_reversed():
    rng = np.random.default_rng(0)
    v = rng.random(50)
    assert spearman(v, v) == 1.0
    assert spearman(v, -v) == -1.0


def test_spearman_matches_scipy_with_ties():
    from scipy.stats import spearmanr
    rng = np.random.default_rng(1)
    a, b = rng.integers(0, 5, 40).astype(float), rng.integers(0, 5, 40).astype(float)
    assert spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=30, unique=True))
def test_spearman_antisymmetric(values):
    a = np.array(values)
    b = np.roll(a, 1)
    assert spearman(a, -b) == pytest.approx(-spearman(a, b), abs=1e-12)


def test_omega_correlation_self():
    net = random_net([4, 6, 3], seed=0)
    m = imp.mas_update(imp.ImportanceMap.empty(net.layout, imp.MAS_GLOBAL), net,
                       np.random.default_rng(0).normal(size=(10, 4)))
    c = omega_correlation(m, m, top_k=10)
    assert c["spearman_all"] == 1.0 and c["overlap_at_k"] == 1.0 and c["spearman_top_k_of_a"] == 1.0


def test_omega_correlation_layout_mismatch():
    a = init_network([3, 4], seed=0).flatten()
    b = init_network([4, 3], seed=0).flatten()
    with pytest.raises(ShapeError):
        omega_correlation(FlatParams(a.values, a.layout), FlatParams(b.values[:a.values.size], b.layout))


# -- CSV ------------------------------------------------------------------------------------------

def test_report_and_aggregate_csv(tmp_path):
    rs = [compute_forgetting(report([0.9, 0.8], [0.7, 0.8], seed=s)) for s in (1, 2)]
    write_csv(tmp_path / "r.csv", REPORT_COLUMNS, [row for r in rs for row in report_rows(r)])
    write_csv(tmp_path / "a.csv", AGGREGATE_COLUMNS, aggregate(rs))
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 4 and float(rows[0]["forgetting"]) == pytest.approx(0.2)
    agg = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert agg[0]["n_seeds"] == "2" and float(agg[0]["avg_forgetting_std"]) == 0.0
