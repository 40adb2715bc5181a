import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mascl.errors import ShapeError, StateError
from mascl.nn import (CROSS_ENTROPY, IDENTITY, L2_REGRESSION, LOG_PROB, OBJECTIVES,
                      OUTPUT_COMPONENT, RELU, SQUARED_L2, DenseLayer, FlatParams, Network,
                      backprop, fd_check, forward, grad_scalar, init_network, load_flat,
                      load_network, loss_and_grad, save_flat, save_network, sgd_step)

from conftest import away_from_kinks, random_net


def aux_for(objective, rng, n, k):
    if objective in (CROSS_ENTROPY, LOG_PROB):
        return rng.integers(0, k, size=n)
    if objective == L2_REGRESSION:
        return rng.normal(size=(n, k))
    if objective == OUTPUT_COMPONENT:
        return k - 1
    return None


# -- forward ------------------------------------------------------------------

def test_forward_identity_layer(linear_unit):
    assert forward(linear_unit, [[3.0]]).tolist() == [[6.0]]


def test_forward_relu_clamps_negative():
    net = Network([DenseLayer([[1.0], [-1.0]], [0.0, 0.0], RELU)])
    assert forward(net, [[2.0]]).tolist() == [[2.0, 0.0]]


def test_forward_zero_input_propagates_biases():
    net = random_net([4, 3, 2], seed=7)
    l1, l2 = net.trunk
    hand = l2.weights @ np.maximum(l1.bias, 0.0) + l2.bias
    hand = np.maximum(hand, 0.0)
    np.testing.assert_array_equal(forward(net, np.zeros((1, 4)))[0], hand)


def test_forward_caches_layers():
    net = random_net([4, 3, 2], seed=7, heads={"a": [5]})
    out = forward(net, np.ones((2, 4)), "a")
    assert len(net.cache.outputs) == 3
    assert net.cache.outputs[-1] is out
    assert net.cache.head == "a"


def test_forward_errors():
    net = random_net([4, 3], seed=1, heads={"a": [2]})
    with pytest.raises(ShapeError):
        forward(net, np.ones((2, 5)))
    with pytest.raises(KeyError):
        forward(net, np.ones((2, 4)), "nope")


def test_layer_chain_checked():
    with pytest.raises(ShapeError):
        Network([DenseLayer(np.ones((3, 2)), np.zeros(3)), DenseLayer(np.ones((2, 4)), np.zeros(2))])


def test_headless_network_is_valid():
    net = init_network([3, 4, 2], seed=0)
    assert net.heads == {}
    assert forward(net, np.ones((1, 3))).shape == (1, 2)


def test_backprop_before_forward():
    net = init_network([3, 2], seed=0)
    with pytest.raises(StateError):
        backprop(net, np.ones((1, 2)))


# -- gradients ----------------------------------------------------------------

def test_grad_linear_squared_norm(linear_unit):
    g = grad_scalar(linear_unit, [[3.0]], SQUARED_L2)
    assert g.block("trunk/0/weights")[0, 0] == pytest.approx(36.0, rel=1e-15)


def test_cross_entropy_gradient_vanishes_at_saturation():
    net = Network([DenseLayer([[50.0], [-50.0]], [0.0, 0.0], IDENTITY)])
    g = grad_scalar(net, [[1.0]], CROSS_ENTROPY, [0])
    assert np.linalg.norm(g.values) < 1e-40


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_gradient_matches_finite_differences(objective):
    rng = np.random.default_rng(5)
    net = random_net([5, 4, 3], seed=5)
    x = away_from_kinks(net, rng, 6)
    assert fd_check(net, x, objective, aux_for(objective, rng, 6, 3), step=1e-5) <= 1e-6


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_gradient_matches_fd_through_head(objective):
    rng = np.random.default_rng(8)
    net = random_net([5, 4], seed=8, heads={"a": [3], "b": [2]})
    x = away_from_kinks(net, rng, 4, head="a")
    assert fd_check(net, x, objective, aux_for(objective, rng, 4, 3), step=1e-5, head="a") <= 1e-6


def test_inactive_head_gets_zero_gradient():
    net = random_net([5, 4], seed=8, heads={"a": [3], "b": [2]})
    g = grad_scalar(net, np.ones((2, 5)), SQUARED_L2, head="a")
    assert not np.any(g.block("head/b/0/weights"))
    assert np.any(g.block("head/a/0/weights"))


def test_fd_check_exact_for_quadratic(linear_unit):
    assert fd_check(linear_unit, [[3.0]], SQUARED_L2, step=1e-5) <= 1e-9


def test_fd_error_shrinks_quadratically_with_step():
    # smooth net so truncation, not round-off, dominates at these steps
    rng = np.random.default_rng(3)
    net = init_network([4, 3, 3], seed=3, trunk_activation=IDENTITY)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    e1 = fd_check(net, x, CROSS_ENTROPY, y, step=2e-2)
    e2 = fd_check(net, x, CROSS_ENTROPY, y, step=1e-2)
    assert 3.0 <= e1 / e2 <= 5.0


def test_missing_aux_is_rejected():
    net = init_network([3, 2], seed=0)
    for objective in (CROSS_ENTROPY, LOG_PROB, L2_REGRESSION, OUTPUT_COMPONENT):
        with pytest.raises(ValueError):
            grad_scalar(net, np.ones((1, 3)), objective)


def test_log_prob_is_negated_cross_entropy():
    rng = np.random.default_rng(2)
    net = random_net([5, 4, 3], seed=2)
    x, y = rng.normal(size=(7, 5)), rng.integers(0, 3, size=7)
    np.testing.assert_array_equal(grad_scalar(net, x, LOG_PROB, y).values,
                                  -grad_scalar(net, x, CROSS_ENTROPY, y).values)


def test_batch_gradient_is_mean():
    rng = np.random.default_rng(4)
    net = random_net([5, 4, 3], seed=4)
    x = rng.normal(size=(3, 5))
    g1 = grad_scalar(net, x, SQUARED_L2).values
    g2 = grad_scalar(net, np.vstack([x, x]), SQUARED_L2).values
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


# -- SGD ------------------------------------------------------------------------

def _flat(values):
    net = Network([DenseLayer([[0.0, 0.0]], [0.0], IDENTITY)])
    layout = net.flatten().layout
    return FlatParams(np.asarray(values, dtype=float), layout)


def test_sgd_step_arithmetic():
    p = _flat([1.0, 2.0, 0.0])
    g = _flat([1.0, -1.0, 0.0])
    assert sgd_step(p, g, 0.5).values.tolist() == [0.5, 2.5, 0.0]
    np.testing.assert_array_equal(sgd_step(p, g, 0.0).values, p.values)


def test_sgd_layout_mismatch():
    p = _flat([1.0, 2.0, 0.0])
    other = init_network([2, 2], seed=0).flatten()
    with pytest.raises(ShapeError):
        sgd_step(p, other, 0.1)


def test_sgd_converges_to_least_squares_minimizer():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3 + 0.1 * rng.normal(size=(40, 1))
    net = Network([DenseLayer(np.zeros((1, 3)), [0.0], IDENTITY)])
    theta = net.flatten()
    for _ in range(3000):
        _, g = loss_and_grad(net, x, L2_REGRESSION, y)
        theta = sgd_step(theta, g, 0.05)
        net.load_flat(theta)
    design = np.hstack([x, np.ones((40, 1))])
    closed, *_ = np.linalg.lstsq(design, y, rcond=None)
    np.testing.assert_allclose(theta.values, closed.ravel(), atol=1e-8)


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(9)
        net = init_network([6, 5, 3], seed=9)
        x, y = rng.normal(size=(20, 6)), rng.integers(0, 3, size=20)
        theta = net.flatten()
        for _ in range(50):
            _, g = loss_and_grad(net, x, CROSS_ENTROPY, y)
            theta = sgd_step(theta, g, 0.1)
            net.load_flat(theta)
        return theta.values
    assert run().tobytes() == run().tobytes()


# -- flattening and files ---------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(widths=st.lists(st.integers(1, 6), min_size=2, max_size=4),
       n_heads=st.integers(0, 3), seed=st.integers(0, 2**31 - 1))
def test_flatten_round_trip(widths, n_heads, seed):
    heads = {f"h{i}": [i + 1] for i in range(n_heads)}
    net = random_net(widths, seed=seed % 1000, heads=heads)
    flat = net.flatten()
    back = Network.from_flat(flat)
    assert back.layout == net.layout
    assert back.flatten().values.tobytes() == flat.values.tobytes()
    for (_, a, _), (_, b, _) in zip(net.named_layers(), back.named_layers()):
        assert a.activation == b.activation
    segs = flat.layout.segments
    assert sum(s.length for s in segs) == flat.values.size
    assert flat.trunk_mask.sum() == sum(l.weights.size + l.bias.size for l in net.trunk)


def test_weight_file_round_trip(tmp_path):
    net = random_net([5, 4, 3], seed=1, heads={"t0": [2]})
    save_network(tmp_path / "w.json", net, note="x")
    back = load_network(tmp_path / "w.json")
    assert back.flatten().values.tobytes() == net.flatten().values.tobytes()
    doc = json.loads((tmp_path / "w.json").read_text())
    assert doc["format"] == "mascl.flat" and doc["version"] == 1 and doc["kind"] == "params"
    assert doc["meta"] == {"note": "x"}


def test_weight_file_rejects_other_versions(tmp_path):
    net = init_network([2, 2], seed=0)
    save_flat(tmp_path / "w.json", net.flatten())
    doc = json.loads((tmp_path / "w.json").read_text())
    doc["version"] = 99
    (tmp_path / "w.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_flat(tmp_path / "w.json")
