import numpy as np
import pytest

from mascl.nn import DenseLayer, IDENTITY, Network, RELU, init_network, near_kink


def random_net(sizes, seed, heads=None, bias_scale=0.5):
    """Seeded net with nonzero biases (the default init zeroes them)."""
    net = init_network(sizes, heads, seed=seed)
    rng = np.random.default_rng(seed + 10_000)
    for _, layer, _ in net.named_layers():
        layer.bias[:] = rng.normal(scale=bias_scale, size=layer.bias.shape)
    return net


def away_from_kinks(net, rng, n, head=None, tol=1e-4, tries=100):
    for _ in range(tries):
        x = rng.normal(size=(n, net.input_dim))
        if not near_kink(net, x, head, tol):
            return x
    raise RuntimeError("could not sample inputs away from ReLU kinks")


@pytest.fixture
def linear_unit():
    """F(x) = theta * x with theta = 2 and no bias."""
    return Network([DenseLayer([[2.0]], [0.0], IDENTITY)])


@pytest.fixture
def small_relu_net():
    return random_net([5, 4, 3], seed=11)
