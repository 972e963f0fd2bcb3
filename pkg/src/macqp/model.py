"""Layers, nested networks, forward propagation and exact derivatives.

A network is an ordered stack of layers (sigmoid-dense, linear-dense or
Gaussian-RBF), composed left to right.  Dense layers carry an implicit
bias, implemented as a trailing weight column applied to a constant-1
input component; RBF center layers have no bias.  All operations here are
pure: they never mutate a net, and updated nets are returned as new
values.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .kernels import rbf_design, sigmoid


class MacqpError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatchError(MacqpError):
    pass


class NonFiniteError(MacqpError):
    pass


class LayerKind(str, Enum):
    SIGMOID_DENSE = "sigmoid_dense"
    LINEAR_DENSE = "linear_dense"
    GAUSSIAN_RBF = "gaussian_rbf"


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one processing stage.

    ``rbf_width`` is the Gaussian width (only for GAUSSIAN_RBF, where
    ``out_dim`` is the number of centers).  ``ridge`` is the coefficient
    of a quadratic weight penalty added to the objective.  ``bias``
    controls the constant-1 input component of dense layers.
    """

    kind: LayerKind
    in_dim: int
    out_dim: int
    rbf_width: float = 0.0
    ridge: float = 0.0
    bias: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionMismatchError(
                f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}"
            )
        if self.kind == LayerKind.GAUSSIAN_RBF:
            if self.rbf_width <= 0:
                raise ValueError("rbf_width must be positive for RBF layers")
            object.__setattr__(self, "bias", False)
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    @property
    def weight_cols(self):
        if self.kind == LayerKind.GAUSSIAN_RBF or not self.bias:
            return self.in_dim
        return self.in_dim + 1

    @property
    def weight_shape(self):
        return (self.out_dim, self.weight_cols)


@dataclass
class LayerWeights:
    """Weight matrix of a layer; row h is the parameter vector of unit h.

    For RBF layers the rows are the basis-function centers.
    """

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if not np.all(np.isfinite(self.matrix)):
            raise NonFiniteError("layer weights contain non-finite entries")


@dataclass
class Layer:
    spec: LayerSpec
    weights: LayerWeights

    def __post_init__(self):
        if self.weights.matrix.shape != self.spec.weight_shape:
            raise DimensionMismatchError(
                f"weight shape {self.weights.matrix.shape} does not match "
                f"spec {self.spec.weight_shape}"
            )


@dataclass
class NestedNet:
    """Ordered layer stack plus auxiliary-coordinate placement.

    ``placement`` lists the layer boundaries (1-based, boundary k sits
    after layer k) that carry auxiliary coordinates.
    """

    layers: list
    placement: list = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.spec.out_dim != b.spec.in_dim:
                raise DimensionMismatchError(
                    f"layer widths do not chain: {a.spec.out_dim} -> {b.spec.in_dim}"
                )
        k_max = len(self.layers) - 1
        prev = 0
        for p in self.placement:
            if not (1 <= p <= k_max):
                raise DimensionMismatchError(
                    f"placement index {p} outside 1..{k_max}"
                )
            if p <= prev:
                raise DimensionMismatchError("placement must be strictly increasing")
            prev = p

    @property
    def in_dim(self):
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self):
        return self.layers[-1].spec.out_dim

    def copy(self):
        return NestedNet(
            [Layer(l.spec, LayerWeights(l.weights.matrix.copy())) for l in self.layers],
            list(self.placement),
        )

    def num_params(self):
        return sum(l.weights.matrix.size for l in self.layers)


@dataclass
class Dataset:
    """Inputs X (N x D) and targets Y (N x D'), with an optional validation split."""

    X: np.ndarray
    Y: np.ndarray
    val_X: np.ndarray = None
    val_Y: np.ndarray = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionMismatchError("X and Y row counts differ")
        if self.X.shape[0] < 1:
            raise DimensionMismatchError("dataset must have at least one row")
        for name, arr in (("X", self.X), ("Y", self.Y)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"dataset {name} contains non-finite entries")
        if self.val_X is not None:
            self.val_X = np.atleast_2d(np.asarray(self.val_X, dtype=np.float64))
            self.val_Y = np.atleast_2d(np.asarray(self.val_Y, dtype=np.float64))
            if self.val_X.shape[1] != self.X.shape[1] or self.val_Y.shape[1] != self.Y.shape[1]:
                raise DimensionMismatchError("validation widths differ from training")

    @property
    def n(self):
        return self.X.shape[0]


def add_bias_col(Z):
    return np.hstack([Z, np.ones((Z.shape[0], 1))])


def layer_apply(layer, Z_in, index=None):
    """Map a batch of inputs (N x in_dim) through one layer."""
    spec = layer.spec
    Z_in = np.atleast_2d(Z_in)
    if Z_in.shape[1] != spec.in_dim:
        raise DimensionMismatchError(
            f"layer {index if index is not None else '?'} expects width "
            f"{spec.in_dim}, got {Z_in.shape[1]}"
        )
    W = layer.weights.matrix
    if spec.kind == LayerKind.GAUSSIAN_RBF:
        out = rbf_design(Z_in, W, spec.rbf_width)
    else:
        pre = Z_in @ W[:, : spec.in_dim].T
        if spec.bias:
            pre += W[:, spec.in_dim]
        out = sigmoid(pre) if spec.kind == LayerKind.SIGMOID_DENSE else pre
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(
            f"non-finite activation in layer {index} ({spec.kind.value})"
        )
    return out


def forward_all(net, X):
    """Per-layer activation matrices [A_1, ..., A_{K+1}] for a batch X."""
    acts = []
    cur = np.atleast_2d(X)
    for i, layer in enumerate(net.layers):
        cur = layer_apply(layer, cur, index=i + 1)
        acts.append(cur)
    return acts


def forward(net, x):
    """Per-layer activation vectors for a single input; last entry is f(x; W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError("forward expects a single input vector")
    return [a[0] for a in forward_all(net, x[None, :])]


def ridge_penalty(net):
    return sum(
        l.spec.ridge * float(np.sum(l.weights.matrix**2))
        for l in net.layers
        if l.spec.ridge > 0
    )


def nested_objective(net, data):
    """Squared-error loss over the dataset plus the quadratic weight penalties.

    Per-point contributions are combined with an exactly rounded sum, so
    the value is invariant to row permutations bit for bit.
    """
    X, Y = data.X, data.Y
    if Y.shape[1] != net.out_dim:
        raise DimensionMismatchError("target width does not match net output")
    F = forward_all(net, X)[-1]
    per_point = np.sum((Y - F) ** 2, axis=1)
    val = 0.5 * math.fsum(per_point) + ridge_penalty(net)
    if not np.isfinite(val):
        raise NonFiniteError("nested objective is non-finite")
    return val


def layer_jacobians(layer, z_in):
    """Exact first derivatives of one layer map at input z_in.

    Returns (J_input, weight_grads): J_input is the out_dim x in_dim
    Jacobian w.r.t. the input; weight_grads[h] is the gradient of output
    unit h w.r.t. its own weight row.
    """
    spec = layer.spec
    z_in = np.asarray(z_in, dtype=np.float64)
    if z_in.shape != (spec.in_dim,):
        raise DimensionMismatchError("layer_jacobians input width mismatch")
    W = layer.weights.matrix
    if spec.kind == LayerKind.GAUSSIAN_RBF:
        a = rbf_design(z_in[None, :], W, spec.rbf_width)[0]
        diff = z_in[None, :] - W
        coef = (2.0 / spec.rbf_width**2) * a
        j_in = -coef[:, None] * diff
        w_grads = coef[:, None] * diff
        return j_in, w_grads
    zt = np.append(z_in, 1.0) if spec.bias else z_in
    if spec.kind == LayerKind.LINEAR_DENSE:
        return W[:, : spec.in_dim].copy(), np.tile(zt, (spec.out_dim, 1))
    a = sigmoid((W @ zt)[None, :])[0]
    s = a * (1.0 - a)
    return s[:, None] * W[:, : spec.in_dim], s[:, None] * zt[None, :]


def _backward_through_layer(layer, A_in, A_out, G):
    """Given dE/dA_out = G, return (dE/dW, dE/dA_in) for one layer."""
    spec = layer.spec
    W = layer.weights.matrix
    if spec.kind == LayerKind.GAUSSIAN_RBF:
        coef = 2.0 / spec.rbf_width**2
        B = G * A_out
        grad_w = coef * (B.T @ A_in - np.sum(B, axis=0)[:, None] * W)
        g_in = -coef * (A_in * np.sum(B, axis=1)[:, None] - B @ W)
        return grad_w, g_in
    if spec.kind == LayerKind.SIGMOID_DENSE:
        G = G * A_out * (1.0 - A_out)
    At = add_bias_col(A_in) if spec.bias else A_in
    grad_w = G.T @ At
    g_in = G @ W[:, : spec.in_dim]
    return grad_w, g_in


def backprop_gradient(net, data):
    """Gradient of nested_objective w.r.t. every weight entry, per layer."""
    X, Y = data.X, data.Y
    acts = forward_all(net, X)
    G = acts[-1] - Y
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        A_in = acts[i - 1] if i > 0 else X
        grad_w, G = _backward_through_layer(net.layers[i], A_in, acts[i], G)
        spec = net.layers[i].spec
        if spec.ridge > 0:
            grad_w = grad_w + 2.0 * spec.ridge * net.layers[i].weights.matrix
        grads[i] = grad_w
    return grads


def init_weights(specs, seed, placement=None):
    """Random net with each entry of layer k uniform on +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        scale = 1.0 / np.sqrt(spec.in_dim)
        mat = rng.uniform(-scale, scale, size=spec.weight_shape)
        layers.append(Layer(spec, LayerWeights(mat)))
    if placement is None:
        placement = list(range(1, len(specs)))
    return NestedNet(layers, placement)


def net_axpy(net, grads, step):
    """New net with W <- W - step * grad, layer by layer."""
    layers = [
        Layer(l.spec, LayerWeights(l.weights.matrix - step * g))
        for l, g in zip(net.layers, grads)
    ]
    return NestedNet(layers, list(net.placement))


def bias_warmup_step(net, data, step=1.0):
    """One gradient-descent step shared by all optimizers as a common start.

    The step size is halved (up to 30 times) until the nested objective
    decreases; if it never does, the net is returned unchanged.
    """
    grads = backprop_gradient(net, data)
    gnorm2 = sum(float(np.sum(g**2)) for g in grads)
    if not np.isfinite(gnorm2):
        raise NonFiniteError("non-finite gradient in warmup step")
    if step == 0.0 or gnorm2 == 0.0:
        return net.copy()
    e0 = nested_objective(net, data)
    t = step
    for _ in range(31):
        cand = net_axpy(net, grads, t)
        if nested_objective(cand, data) < e0:
            return cand
        t *= 0.5
    return net.copy()


def flatten_weights(net):
    return np.concatenate([l.weights.matrix.ravel() for l in net.layers])


def unflatten_weights(net, vec):
    layers = []
    off = 0
    for l in net.layers:
        size = l.weights.matrix.size
        mat = vec[off : off + size].reshape(l.weights.matrix.shape)
        layers.append(Layer(l.spec, LayerWeights(mat.copy())))
        off += size
    return NestedNet(layers, list(net.placement))
