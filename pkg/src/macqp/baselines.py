"""Reference optimizers and shared fitting kernels.

Minibatch SGD and Polak-Ribiere nonlinear conjugate gradients minimize
the nested objective directly through backprop; the alternating scheme
for RBF autoencoders retrains encoder and decoder in turn.  k-means and
ridge least squares are the building blocks reused by the auxiliary-
coordinate weight updates.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .kernels import rbf_design
from .model import (
    Dataset,
    Layer,
    LayerKind,
    LayerWeights,
    MacqpError,
    NestedNet,
    add_bias_col,
    backprop_gradient,
    flatten_weights,
    forward_all,
    nested_objective,
    net_axpy,
    unflatten_weights,
)


@dataclass
class SgdConfig:
    minibatch: int = 20
    learning_rate: float = 1e-6
    epochs: int = 100
    seed: int = 0
    trace_every: int = 20

    def __post_init__(self):
        if self.minibatch < 1 or self.epochs < 1 or self.learning_rate < 0:
            raise ValueError("invalid SGD configuration")


@dataclass
class CgConfig:
    max_iters: int = 200
    restart_every: int = 100
    line_search: str = "backtracking"
    gtol: float = 1e-10
    trace_every: int = 10

    def __post_init__(self):
        if self.restart_every < 1 or self.max_iters < 1:
            raise ValueError("invalid CG configuration")
        if self.line_search not in ("backtracking", "cubic"):
            raise ValueError(f"unknown line search {self.line_search!r}")


def kmeans(points, k, seed=0, iters=20):
    """Lloyd's algorithm from k distinct seeded points.

    When k equals the number of points the centers are the points
    themselves.  An empty cluster is re-seeded from the point farthest
    from its assigned center.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = points.shape[0]
    if k > m:
        raise MacqpError(f"k-means with k={k} > {m} points")
    if k == m:
        return points.copy()
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(m, size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = (
            np.sum(points**2, axis=1)[:, None]
            - 2.0 * points @ centers.T
            + np.sum(centers**2, axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        closest = d2[np.arange(m), assign]
        new_centers = centers.copy()
        for j in range(k):
            mask = assign == j
            if not np.any(mask):
                far = int(np.argmax(closest))
                new_centers[j] = points[far]
                closest[far] = 0.0
            else:
                new_centers[j] = points[mask].mean(axis=0)
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    return centers


def kmeans_objective(points, centers):
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return float(np.sum(np.min(d2, axis=1)))


def ridge_lsq(features, targets, lam):
    """Solve (Phi^T Phi + lam I) W = Phi^T T by Cholesky factorization."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    squeeze = targets.ndim == 1
    targets = np.atleast_2d(targets.T).T if squeeze else targets
    if lam < 0:
        raise ValueError("ridge lambda must be nonnegative")
    A = features.T @ features
    rhs = features.T @ targets
    m = A.shape[0]
    A[np.diag_indices(m)] += lam
    try:
        cf = scipy.linalg.cho_factor(A, lower=True)
        W = scipy.linalg.cho_solve(cf, rhs)
    except np.linalg.LinAlgError:
        if lam > 0:
            raise MacqpError("ridge system is singular") from None
        A[np.diag_indices(m)] += 1e-12
        try:
            cf = scipy.linalg.cho_factor(A, lower=True)
            W = scipy.linalg.cho_solve(cf, rhs)
        except np.linalg.LinAlgError:
            raise MacqpError("least-squares system is singular") from None
    return W[:, 0] if squeeze else W


def sgd_train(net, data, cfg, time_budget=None):
    """Minibatch stochastic gradient descent on the nested objective."""
    from .mac import TrainTrace  # trace type lives with the MAC driver

    if cfg.minibatch > data.n:
        raise MacqpError("minibatch larger than the dataset")
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace()
    t0 = time.perf_counter()
    net = net.copy()
    e1_0 = nested_objective(net, data)
    eval_data = _eval_dataset(data)

    def record(epoch, event):
        e1_train = nested_objective(net, data)
        e1_val = nested_objective(net, eval_data)
        trace.add(
            len(trace.rows) + 1,
            time.perf_counter() - t0,
            0.0,
            e1_train,
            e1_val,
            e1_train,
            0.0,
            event,
        )
        return e1_train

    record(0, "sgd_epoch")
    last_recorded = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        # a full-batch "minibatch" needs no shuffle and then matches one
        # plain gradient-descent step bit for bit
        perm = rng.permutation(data.n) if cfg.minibatch < data.n else np.arange(data.n)
        for start in range(0, data.n, cfg.minibatch):
            idx = perm[start : start + cfg.minibatch]
            batch = Dataset(data.X[idx], data.Y[idx])
            grads = backprop_gradient(net, batch)
            net = net_axpy(net, grads, cfg.learning_rate)
        if epoch % cfg.trace_every == 0 or epoch == cfg.epochs:
            e1 = record(epoch, "sgd_epoch")
            last_recorded = epoch
            if e1 > 1e3 * max(e1_0, 1e-300):
                trace.rows[-1].event = "sgd_diverged"
                return net, trace
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    if last_recorded != epoch:
        record(epoch, "sgd_epoch")
    return net, trace


def _eval_dataset(data):
    if data.val_X is not None:
        return Dataset(data.val_X, data.val_Y)
    return data


def _backtracking_search(f, x, fx, d, g, max_halvings=30):
    """Armijo backtracking from step 1; returns (x_new, f_new) or None."""
    slope = float(np.dot(g, d))
    if slope >= 0:
        return None
    t = 1.0
    for _ in range(max_halvings):
        x_new = x + t * d
        f_new = f(x_new)
        if f_new <= fx + 1e-4 * t * slope:
            return x_new, f_new
        t *= 0.5
    return None


def _cubic_search(f, x, fx, d, g, max_steps=20):
    """Interpolating line search; steps may exceed 1.

    Each trial fits the parabola through (0, fx) with the known slope and
    the last sample, and jumps to its minimizer; on a quadratic objective
    that is the exact line minimizer after one probe.
    """
    slope = float(np.dot(g, d))
    if slope >= 0:
        return None
    t = 1.0
    f_t = f(x + t * d)
    for _ in range(max_steps):
        denom = f_t - fx - slope * t
        if denom > 0:
            t_new = -0.5 * slope * t * t / denom
        else:
            t_new = 2.0 * t  # still below the linear model: expand
        if not np.isfinite(t_new) or t_new <= 0 or t_new > 2**10:
            t_new = 0.5 * t
        f_new = f(x + t_new * d)
        if f_new <= fx + 1e-4 * t_new * slope and f_new <= f_t:
            return x + t_new * d, f_new
        if f_t <= fx + 1e-4 * t * slope and f_t < f_new:
            return x + t * d, f_t
        t, f_t = t_new, f_new
    if f_t < fx:
        return x + t * d, f_t
    return None


def _cg_minimize(value, grad, x0, max_iters, restart_every, line_search, gtol,
                 callback=None, time_budget=None):
    """Polak-Ribiere nonlinear CG; the line search enforces descent."""
    search = _cubic_search if line_search == "cubic" else _backtracking_search
    x = x0.copy()
    fx = value(x)
    g = grad(x)
    d = -g
    failures = 0
    t0 = time.perf_counter()
    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) <= gtol:
            break
        res = search(value, x, fx, d, g)
        if res is None:
            if np.array_equal(d, -g):
                break  # cannot descend along steepest descent either
            d = -g
            failures += 1
            if failures > 2:
                break
            continue
        x_new, f_new = res
        g_new = grad(x_new)
        beta = float(np.dot(g_new, g_new - g)) / max(float(np.dot(g, g)), 1e-300)
        if beta < 0 or it % restart_every == 0:
            beta = 0.0
        d = -g_new + beta * d
        x, fx, g = x_new, f_new, g_new
        failures = 0
        if callback is not None:
            callback(it, x, fx, g)
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    return x, fx, g


def cg_train(net, data, cfg, time_budget=None):
    """Full-batch Polak-Ribiere conjugate-gradient training."""
    from .mac import TrainTrace

    trace = TrainTrace()
    t0 = time.perf_counter()
    eval_data = _eval_dataset(data)
    template = net.copy()

    def value(w):
        return nested_objective(unflatten_weights(template, w), data)

    def grad(w):
        gs = backprop_gradient(unflatten_weights(template, w), data)
        return np.concatenate([g.ravel() for g in gs])

    def callback(it, w, fx, g):
        if it % cfg.trace_every == 0:
            cand = unflatten_weights(template, w)
            trace.add(
                len(trace.rows) + 1,
                time.perf_counter() - t0,
                0.0,
                fx,
                nested_objective(cand, eval_data),
                fx,
                0.0,
                "cg_iter",
            )

    w0 = flatten_weights(net)
    w, fx, _ = _cg_minimize(
        value, grad, w0, cfg.max_iters, cfg.restart_every, cfg.line_search,
        cfg.gtol, callback=callback, time_budget=time_budget,
    )
    out = unflatten_weights(template, w)
    trace.add(
        len(trace.rows) + 1,
        time.perf_counter() - t0,
        0.0,
        fx,
        nested_objective(out, eval_data),
        fx,
        0.0,
        "cg_iter",
    )
    return out, trace


def _check_rbf_autoencoder(net):
    kinds = [l.spec.kind for l in net.layers]
    if kinds != [
        LayerKind.GAUSSIAN_RBF,
        LayerKind.LINEAR_DENSE,
        LayerKind.GAUSSIAN_RBF,
        LayerKind.LINEAR_DENSE,
    ]:
        raise MacqpError("alternating optimization expects an RBF autoencoder")
    if list(net.placement) != [2]:
        raise MacqpError("RBF autoencoder must place coordinates at the coding layer")


def fit_rbf_linear_pair(rbf_layer, lin_layer, A_in, T, weight, seed=0):
    """Two-stage fit of a Gaussian-RBF layer plus its linear readout.

    Centers come from k-means on the inputs (the inputs themselves when
    the center count matches), the readout from ridge least squares.
    ``weight`` scales the squared-error term relative to the ridge.
    """
    m = rbf_layer.spec.out_dim
    centers = A_in.copy() if m == A_in.shape[0] else kmeans(A_in, m, seed=seed)
    phi = rbf_design(A_in, centers, rbf_layer.spec.rbf_width)
    phi_full = add_bias_col(phi) if lin_layer.spec.bias else phi
    lam = 2.0 * lin_layer.spec.ridge / weight if weight > 0 else 0.0
    W_lin = ridge_lsq(phi_full, T, lam).T
    return (
        Layer(rbf_layer.spec, LayerWeights(centers)),
        Layer(lin_layer.spec, LayerWeights(W_lin)),
    )


def alt_opt_rbf_train(net, data, iters, cg_steps=10, seed=0, time_budget=None):
    """Alternating encoder/decoder retraining for an RBF autoencoder.

    Each iteration refits the decoder (k-means + linear solve at the
    current codes) and then the encoder (k-means centers, readout by
    nonlinear CG through the frozen decoder).
    """
    from .mac import TrainTrace

    _check_rbf_autoencoder(net)
    net = net.copy()
    trace = TrainTrace()
    t0 = time.perf_counter()
    eval_data = _eval_dataset(data)

    def record(event):
        e1 = nested_objective(net, data)
        trace.add(
            len(trace.rows) + 1,
            time.perf_counter() - t0,
            0.0,
            e1,
            nested_objective(net, eval_data),
            e1,
            0.0,
            event,
        )

    record("altopt_iter")
    for _ in range(iters):
        codes = forward_all(net, data.X)[1]
        dec_rbf, dec_lin = fit_rbf_linear_pair(
            net.layers[2], net.layers[3], codes, data.Y, weight=1.0, seed=seed
        )
        net = NestedNet([net.layers[0], net.layers[1], dec_rbf, dec_lin], [2])

        m1 = net.layers[0].spec.out_dim
        centers = (
            data.X.copy() if m1 == data.n else kmeans(data.X, m1, seed=seed)
        )
        net.layers[0] = Layer(net.layers[0].spec, LayerWeights(centers))
        net = _refit_encoder_readout(net, data, cg_steps)
        record("altopt_iter")
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    return net, trace


def _refit_encoder_readout(net, data, cg_steps):
    """CG over the encoder readout weights with the rest of the net frozen."""
    phi1 = forward_all(net, data.X)[0]
    sub = NestedNet([net.layers[1], net.layers[2], net.layers[3]], [])
    sub_data = Dataset(phi1, data.Y)
    shape = sub.layers[0].weights.matrix.shape
    size = sub.layers[0].weights.matrix.size

    def assemble(w):
        cand = sub.copy()
        cand.layers[0] = Layer(
            cand.layers[0].spec, LayerWeights(w.reshape(shape).copy())
        )
        return cand

    def value(w):
        return nested_objective(assemble(w), sub_data)

    def grad(w):
        return backprop_gradient(assemble(w), sub_data)[0].ravel()

    w0 = sub.layers[0].weights.matrix.ravel()
    w, _, _ = _cg_minimize(
        value, grad, w0, cg_steps, restart_every=100,
        line_search="backtracking", gtol=1e-12,
    )
    out = net.copy()
    out.layers[1] = Layer(out.layers[1].spec, LayerWeights(w.reshape(shape).copy()))
    return out
