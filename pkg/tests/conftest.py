"""Shared fixtures and independent oracles used across the test suite.

The oracles deliberately avoid the package's own vectorized code paths:
gradients come from central finite differences, layer maps from scalar
loops, and least-squares fits from dense numpy solves.
"""

import math

import numpy as np
import pytest

from macqp.model import (
    Dataset,
    LayerKind,
    LayerSpec,
    flatten_weights,
    init_weights,
    nested_objective,
    unflatten_weights,
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradient(net, data, h_scale=1e-5):
    """Central finite differences of nested_objective, entry by entry."""
    w0 = flatten_weights(net)
    grad = np.empty_like(w0)
    for i in range(w0.size):
        h = h_scale * (1.0 + abs(w0[i]))
        wp = w0.copy()
        wp[i] += h
        wm = w0.copy()
        wm[i] -= h
        fp = nested_objective(unflatten_weights(net, wp), data)
        fm = nested_objective(unflatten_weights(net, wm), data)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def slow_layer_map(layer, x):
    """One layer's output at a single input, computed with scalar loops."""
    spec = layer.spec
    W = layer.weights.matrix
    out = np.zeros(spec.out_dim)
    if spec.kind == LayerKind.GAUSSIAN_RBF:
        for h in range(spec.out_dim):
            s = sum((x[k] - W[h, k]) ** 2 for k in range(spec.in_dim))
            out[h] = math.exp(-s / spec.rbf_width**2)
        return out
    for h in range(spec.out_dim):
        t = sum(W[h, k] * x[k] for k in range(spec.in_dim))
        if spec.bias:
            t += W[h, spec.in_dim]
        out[h] = 1.0 / (1.0 + math.exp(-t)) if spec.kind == LayerKind.SIGMOID_DENSE else t
    return out


def slow_forward(net, x):
    cur = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        cur = slow_layer_map(layer, cur)
    return cur


def random_mixed_net(rng, ridge=0.0):
    """Small random net exercising all three layer kinds."""
    d_in = int(rng.integers(2, 5))
    d_mid = int(rng.integers(2, 5))
    m = int(rng.integers(2, 6))
    d_out = int(rng.integers(1, 4))
    specs = [
        LayerSpec(LayerKind.SIGMOID_DENSE, d_in, d_mid, ridge=ridge),
        LayerSpec(LayerKind.GAUSSIAN_RBF, d_mid, m, rbf_width=1.0 + rng.uniform()),
        LayerSpec(LayerKind.LINEAR_DENSE, m, d_out, ridge=ridge),
    ]
    net = init_weights(specs, int(rng.integers(1 << 30)))
    return net


def random_dataset(rng, net, n=12):
    X = rng.normal(size=(n, net.in_dim))
    Y = rng.normal(size=(n, net.out_dim))
    return Dataset(X, Y)


def sigmoid_autoencoder(widths, seed=0, ridge=0.0, placement=None):
    """Sigmoid hidden layers with a linear readout, e.g. widths (16, 8, 3, 8, 16)."""
    specs = []
    for a, b in zip(widths[:-2], widths[1:-1]):
        specs.append(LayerSpec(LayerKind.SIGMOID_DENSE, a, b, ridge=ridge))
    specs.append(LayerSpec(LayerKind.LINEAR_DENSE, widths[-2], widths[-1], ridge=ridge))
    return init_weights(specs, seed, placement=placement)


def rbf_autoencoder(d, m1, code, m3, width1=2.0, width3=2.0, ridge=1e-6, seed=0):
    """RBF encoder + linear code + RBF decoder + linear output, coding placement."""
    specs = [
        LayerSpec(LayerKind.GAUSSIAN_RBF, d, m1, rbf_width=width1),
        LayerSpec(LayerKind.LINEAR_DENSE, m1, code, ridge=ridge, bias=False),
        LayerSpec(LayerKind.GAUSSIAN_RBF, code, m3, rbf_width=width3),
        LayerSpec(LayerKind.LINEAR_DENSE, m3, d, ridge=ridge, bias=False),
    ]
    return init_weights(specs, seed, placement=[2])
