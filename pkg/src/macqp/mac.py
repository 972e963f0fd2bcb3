"""Auxiliary-coordinate training with a quadratic penalty.

The nested problem is rewritten over (weights, per-point coordinates at
the placed boundaries) with equality constraints tying each coordinate
block to its forward-propagated value.  Constraints are enforced by a
growing quadratic penalty mu while alternating exact/Gauss-Newton weight
updates (decoupled per unit or per block) with per-point coordinate
updates.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import fit_rbf_linear_pair, ridge_lsq
from .kernels import sigmoid
from .model import (
    Layer,
    LayerKind,
    LayerWeights,
    MacqpError,
    NestedNet,
    NonFiniteError,
    add_bias_col,
    forward_all,
    layer_apply,
    layer_jacobians,
    nested_objective,
    ridge_penalty,
)
from .parallel import chunk_slices, parallel_map

TRACE_HEADER = "iter,seconds,mu,e1_train,e1_val,eq,constraint_viol,event"


@dataclass
class AuxState:
    """Auxiliary coordinates: one (N x width) matrix per placed boundary."""

    coords: list

    def __post_init__(self):
        self.coords = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in self.coords]
        for c in self.coords:
            if not np.all(np.isfinite(c)):
                raise NonFiniteError("auxiliary coordinates contain non-finite entries")

    def copy(self):
        return AuxState([c.copy() for c in self.coords])

    @property
    def n(self):
        return self.coords[0].shape[0] if self.coords else 0


@dataclass
class PenaltySchedule:
    mu0: float = 1.0
    growth: float = 10.0
    stage_tolerance: float = 1e-2
    max_stages: int = 9
    reg_drop_threshold: float = 1e4
    transient_reg: float = 1e-4
    max_iters_per_stage: int = 50

    def __post_init__(self):
        if self.mu0 <= 0 or self.growth <= 1 or self.stage_tolerance <= 0:
            raise ValueError("invalid penalty schedule")
        if self.max_stages < 0 or self.transient_reg < 0:
            raise ValueError("invalid penalty schedule")


@dataclass
class StepConfig:
    w_gn_iters: int = 3
    z_gn_iters: int = 1
    backtrack_factor: float = 0.5
    max_backtracks: int = 20
    gn_damping: float = 1e-8

    def __post_init__(self):
        if self.w_gn_iters < 1 or self.z_gn_iters < 1:
            raise ValueError("Gauss-Newton iteration counts must be positive")
        if not (0 < self.backtrack_factor < 1):
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclass
class TraceRow:
    iteration: int
    seconds: float
    mu: float
    e1_train: float
    e1_val: float
    eq: float
    constraint_viol: float
    event: str


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)
    selection_events: list = field(default_factory=list)

    def add(self, iteration, seconds, mu, e1_train, e1_val, eq, viol, event):
        if self.rows:
            if iteration <= self.rows[-1].iteration:
                raise MacqpError("trace iteration indices must increase")
            seconds = max(seconds, self.rows[-1].seconds)
        self.rows.append(
            TraceRow(iteration, seconds, mu, e1_train, e1_val, eq, viol, event)
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER.split(","))
            for r in self.rows:
                writer.writerow(
                    [
                        r.iteration,
                        repr(r.seconds),
                        repr(r.mu),
                        repr(r.e1_train),
                        repr(r.e1_val),
                        repr(r.eq),
                        repr(r.constraint_viol),
                        r.event,
                    ]
                )


def block_slices(net):
    """Layer index ranges [(start, end), ...] delimited by the placement."""
    bounds = [0] + list(net.placement) + [len(net.layers)]
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def block_apply(net, sl, Z_in):
    cur = Z_in
    for i in range(sl[0], sl[1]):
        cur = layer_apply(net.layers[i], cur, index=i + 1)
    return cur


def block_input_jacobian(net, sl, z_in):
    """Jacobian of a block map w.r.t. its input, at one point."""
    cur = np.asarray(z_in, dtype=np.float64)
    jac = None
    for i in range(sl[0], sl[1]):
        j_layer, _ = layer_jacobians(net.layers[i], cur)
        jac = j_layer if jac is None else j_layer @ jac
        cur = layer_apply(net.layers[i], cur[None, :], index=i + 1)[0]
    return jac, cur


def lift_to_feasible(net, X):
    """Coordinates set by forward propagation; constraint residuals are zero."""
    acts = forward_all(net, X)
    return AuxState([acts[p - 1].copy() for p in net.placement])


def _block_inputs(net, Z, X):
    return [X] + list(Z.coords)


def transient_penalty(net, transient_reg):
    if transient_reg <= 0:
        return 0.0
    return transient_reg * sum(
        float(np.sum(l.weights.matrix**2))
        for l in net.layers
        if l.spec.kind != LayerKind.GAUSSIAN_RBF
    )


def qp_objective(net, Z, data, mu, transient_reg=0.0):
    """Penalized objective: last-block loss + (mu/2) constraint violations."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    slices = block_slices(net)
    if len(Z.coords) != len(slices) - 1:
        raise MacqpError("auxiliary state does not match net placement")
    ins = _block_inputs(net, Z, data.X)
    total = 0.5 * float(np.sum((data.Y - block_apply(net, slices[-1], ins[-1])) ** 2))
    for j in range(len(slices) - 1):
        diff = Z.coords[j] - block_apply(net, slices[j], ins[j])
        total += 0.5 * mu * float(np.sum(diff**2))
    total += ridge_penalty(net) + transient_penalty(net, transient_reg)
    if not np.isfinite(total):
        raise NonFiniteError("penalized objective is non-finite")
    return total


def constraint_residual_vectors(net, Z, X):
    """Per-point stacked constraint residuals z_j - g_j(z_{j-1}), shape (N, sum widths)."""
    slices = block_slices(net)
    ins = _block_inputs(net, Z, X)
    parts = [
        Z.coords[j] - block_apply(net, slices[j], ins[j])
        for j in range(len(slices) - 1)
    ]
    if not parts:
        return np.zeros((np.atleast_2d(X).shape[0], 0))
    return np.hstack(parts)


def constraint_residuals(net, Z, X):
    """Euclidean norm of each point's stacked constraint residual."""
    return np.linalg.norm(constraint_residual_vectors(net, Z, X), axis=1)


def multiplier_estimates(net, Z, X, mu):
    """Lagrange multiplier estimates -mu * (z_n - F(z_n, W; x_n))."""
    return -mu * constraint_residual_vectors(net, Z, X)


# ---------------------------------------------------------------------------
# W-step


def _damped_solve(H, g, base_damping):
    """Solve H d = -g, escalating Levenberg damping until it is a descent step."""
    m = H.shape[0]
    damp = 0.0
    scale = 1.0 + np.trace(H) / m
    for _ in range(12):
        try:
            d = np.linalg.solve(H + damp * scale * np.eye(m), -g)
        except np.linalg.LinAlgError:
            d = None
        if d is not None and np.all(np.isfinite(d)) and float(np.dot(g, d)) < 0:
            return d
        damp = base_damping if damp == 0.0 else damp * 10.0
        if damp == 0.0:
            damp = 1e-8
    return None


def _gn_sigmoid_unit(phi, target, w0, weight, lam, cfg):
    """Damped Gauss-Newton on one sigmoid unit's least-squares subproblem."""

    def obj(w):
        r = target - sigmoid(phi @ w)
        return 0.5 * weight * float(np.dot(r, r)) + lam * float(np.dot(w, w))

    w = w0.copy()
    f_cur = obj(w)
    for _ in range(cfg.w_gn_iters):
        p = sigmoid(phi @ w)
        r = target - p
        s = p * (1.0 - p)
        jac = s[:, None] * phi
        g = -weight * (jac.T @ r) + 2.0 * lam * w
        H = weight * (jac.T @ jac) + 2.0 * lam * np.eye(w.shape[0])
        d = _damped_solve(H, g, cfg.gn_damping)
        if d is None:
            break
        step = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            w_new = w + step * d
            f_new = obj(w_new)
            if f_new < f_cur:
                w, f_cur = w_new, f_new
                accepted = True
                break
            step *= cfg.backtrack_factor
        if not accepted:
            break
    return w


def _fit_sigmoid_layer(layer, A_in, T, weight, lam, cfg, workers):
    phi = add_bias_col(A_in) if layer.spec.bias else A_in
    W = layer.weights.matrix
    n_units = W.shape[0]

    def unit_task(rng):
        lo, hi = rng
        rows = np.empty((hi - lo, W.shape[1]))
        for h in range(lo, hi):
            rows[h - lo] = _gn_sigmoid_unit(phi, T[:, h], W[h], weight, lam, cfg)
        return rows

    chunks = chunk_slices(n_units, workers)
    parts = parallel_map([lambda r=rng: unit_task(r) for rng in chunks], workers)
    return Layer(layer.spec, LayerWeights(np.vstack(parts)))


def _fit_linear_layer(layer, A_in, T, weight, lam):
    phi = add_bias_col(A_in) if layer.spec.bias else A_in
    W = ridge_lsq(phi, T, 2.0 * lam / weight).T
    return Layer(layer.spec, LayerWeights(W))


def _block_objective(net, sl, A_in, T, weight, transient_reg):
    out = block_apply(net, sl, A_in)
    val = 0.5 * weight * float(np.sum((T - out) ** 2))
    for i in range(sl[0], sl[1]):
        spec = net.layers[i].spec
        lam = spec.ridge
        if spec.kind != LayerKind.GAUSSIAN_RBF:
            lam += transient_reg
        if lam > 0:
            val += lam * float(np.sum(net.layers[i].weights.matrix**2))
    return val


def fit_block(net, sl, A_in, T, weight, cfg, workers=1, transient_reg=0.0,
              kmeans_seed=0):
    """Refit one inter-boundary block to targets T at fixed inputs.

    Returns replacement layers; the caller is responsible for rejecting a
    refit that increases its part of the objective (possible only for the
    k-means-based RBF path).
    """
    layers = net.layers[sl[0] : sl[1]]
    kinds = [l.spec.kind for l in layers]
    if kinds == [LayerKind.SIGMOID_DENSE]:
        lam = layers[0].spec.ridge + transient_reg
        return [_fit_sigmoid_layer(layers[0], A_in, T, weight, lam, cfg, workers)]
    if kinds == [LayerKind.LINEAR_DENSE]:
        lam = layers[0].spec.ridge + transient_reg
        return [_fit_linear_layer(layers[0], A_in, T, weight, lam)]
    if kinds == [LayerKind.GAUSSIAN_RBF, LayerKind.LINEAR_DENSE]:
        return list(
            fit_rbf_linear_pair(layers[0], layers[1], A_in, T, weight, seed=kmeans_seed)
        )
    raise MacqpError(
        f"no block solver for layer structure {[k.value for k in kinds]}"
    )


def w_step(net, Z, data, mu, cfg, workers=1, transient_reg=0.0):
    """Independent refit of every block at fixed coordinates; never increases E_Q."""
    slices = block_slices(net)
    ins = _block_inputs(net, Z, data.X)
    targets = list(Z.coords) + [data.Y]
    new_layers = [Layer(l.spec, LayerWeights(l.weights.matrix.copy())) for l in net.layers]
    for j, sl in enumerate(slices):
        weight = 1.0 if j == len(slices) - 1 else mu
        fitted = fit_block(
            net, sl, ins[j], targets[j], weight, cfg,
            workers=workers, transient_reg=transient_reg,
        )
        cand = net.copy()
        cand.layers[sl[0] : sl[1]] = fitted
        before = _block_objective(net, sl, ins[j], targets[j], weight, transient_reg)
        after = _block_objective(cand, sl, ins[j], targets[j], weight, transient_reg)
        if after <= before:
            new_layers[sl[0] : sl[1]] = fitted
    return NestedNet(new_layers, list(net.placement))


# ---------------------------------------------------------------------------
# Z-step


def _z_point_objective(net, slices, x, y, zs, mu):
    ins = [x] + zs[:-1] if zs else [x]
    val = 0.0
    for j in range(len(slices) - 1):
        g = block_apply(net, slices[j], ins[j][None, :])[0]
        val += 0.5 * mu * float(np.sum((zs[j] - g) ** 2))
    out = block_apply(net, slices[-1], (zs[-1] if zs else x)[None, :])[0]
    val += 0.5 * float(np.sum((y - out) ** 2))
    return val


def _z_residual_and_jacobian(net, slices, x, y, zs, mu, widths):
    """Stacked residual r(z) and its Jacobian for one point's subproblem."""
    sqrt_mu = math.sqrt(mu)
    total = sum(widths)
    offs = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    d_out = y.shape[0]
    n_rows = d_out + total
    r = np.empty(n_rows)
    J = np.zeros((n_rows, total))
    ins = [x] + zs[:-1]
    # constraint rows, in boundary order, after the output rows
    row = d_out
    for j in range(len(slices) - 1):
        jac_in, g = block_input_jacobian(net, slices[j], ins[j])
        w = widths[j]
        r[row : row + w] = sqrt_mu * (zs[j] - g)
        J[row : row + w, offs[j] : offs[j + 1]] = sqrt_mu * np.eye(w)
        if j > 0:
            J[row : row + w, offs[j - 1] : offs[j]] = -sqrt_mu * jac_in
        row += w
    jac_out, g_out = block_input_jacobian(net, slices[-1], zs[-1])
    r[:d_out] = y - g_out
    J[:d_out, offs[-2] : offs[-1]] = -jac_out
    return r, J


def _z_point_update(net, slices, x, y, zs0, mu, cfg, widths):
    zs = [z.copy() for z in zs0]
    f_cur = _z_point_objective(net, slices, x, y, zs, mu)
    flat = np.concatenate(zs)
    offs = np.concatenate([[0], np.cumsum(widths)]).astype(int)

    def split(v):
        return [v[offs[j] : offs[j + 1]] for j in range(len(widths))]

    for _ in range(cfg.z_gn_iters):
        r, J = _z_residual_and_jacobian(net, slices, x, y, split(flat), mu, widths)
        g = J.T @ r
        H = J.T @ J
        d = _damped_solve(H, g, cfg.gn_damping)
        if d is None:
            break
        step = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = flat + step * d
            f_new = _z_point_objective(net, slices, x, y, split(cand), mu)
            if f_new < f_cur:
                flat, f_cur = cand, f_new
                accepted = True
                break
            step *= cfg.backtrack_factor
        if not accepted:
            break
    return split(flat)


def z_step(net, Z, data, mu, cfg, workers=1):
    """Per-point coordinate update by damped Gauss-Newton; never increases E_Q."""
    slices = block_slices(net)
    if len(slices) < 2:
        return Z.copy()
    widths = [c.shape[1] for c in Z.coords]
    X, Y = data.X, data.Y

    def point_task(rng):
        lo, hi = rng
        out = [np.empty((hi - lo, w)) for w in widths]
        for n in range(lo, hi):
            zs0 = [c[n] for c in Z.coords]
            zs = _z_point_update(net, slices, X[n], Y[n], zs0, mu, cfg, widths)
            for j in range(len(widths)):
                out[j][n - lo] = zs[j]
        return out

    chunks = chunk_slices(data.n, workers)
    parts = parallel_map([lambda r=rng: point_task(r) for rng in chunks], workers)
    coords = [np.vstack([p[j] for p in parts]) for j in range(len(widths))]
    return AuxState(coords)


# ---------------------------------------------------------------------------
# Driver


def postprocess(net, Z, data, cfg=None, workers=1):
    """Forward-substitute the coordinates and refit the last block.

    Keeps every block but the last; the refit is rejected if a solver
    failure would increase the nested error.
    """
    cfg = cfg or StepConfig()
    slices = block_slices(net)
    feats = data.X
    for sl in slices[:-1]:
        feats = block_apply(net, sl, feats)
    e1_before = nested_objective(net, data)
    try:
        fitted = fit_block(net, slices[-1], feats, data.Y, 1.0, cfg, workers=workers)
    except MacqpError:
        return net.copy()
    cand = net.copy()
    cand.layers[slices[-1][0] : slices[-1][1]] = fitted
    if nested_objective(cand, data) <= e1_before:
        return cand
    return net.copy()


def _eval_net(net, data):
    if data.val_X is not None:
        from .model import Dataset

        return nested_objective(net, Dataset(data.val_X, data.val_Y))
    return nested_objective(net, data)


def mac_train(net, data, schedule, cfg, workers=1, time_budget=None, z_init=None,
              sel_cfg=None, iteration_callback=None):
    """Alternating W/Z optimization along the growing-penalty path.

    With a validation split, iterations within each mu stage run until
    the validation nested error increases or changes by less than the
    stage tolerance, and the best iterate seen in the stage is kept.
    Without one, each stage runs until the penalty objective stalls;
    the nested error is expected to rise transiently while feasibility
    is enforced, so it is not used as an exit signal.  With ``sel_cfg``
    given, a per-block architecture-selection step runs every
    ``sel_cfg.cadence`` iterations.
    """
    net = net.copy()
    Z = z_init.copy() if z_init is not None else lift_to_feasible(net, data.X)
    trace = TrainTrace()
    if schedule.max_stages == 0:
        return net, Z, trace

    if sel_cfg is not None:
        from .selection import aic_cost, selection_step

    t0 = time.perf_counter()
    mu = schedule.mu0
    transient = schedule.transient_reg
    it = 0
    iters_since_selection = 0
    stop = False

    def record(event):
        e1_train = nested_objective(net, data)
        trace.add(
            it,
            time.perf_counter() - t0,
            mu,
            e1_train,
            _eval_net(net, data),
            qp_objective(net, Z, data, mu, transient),
            float(np.max(constraint_residuals(net, Z, data.X))),
            event,
        )

    track_val = data.val_X is not None
    for stage in range(schedule.max_stages):
        if track_val:
            prev = _eval_net(net, data)
            best = (net.copy(), Z.copy(), prev)
        else:
            prev = qp_objective(net, Z, data, mu, transient)
        for _ in range(schedule.max_iters_per_stage):
            net = w_step(net, Z, data, mu, cfg, workers=workers, transient_reg=transient)
            it += 1
            record("wstep")
            Z = z_step(net, Z, data, mu, cfg, workers=workers)
            it += 1
            record("zstep")
            if iteration_callback is not None:
                iteration_callback(net, Z)

            if sel_cfg is not None:
                iters_since_selection += 1
                if iters_since_selection >= sel_cfg.cadence:
                    iters_since_selection = 0
                    before_total = (
                        qp_objective(net, Z, data, mu, transient) + aic_cost(net, sel_cfg.epsilon_sq)
                    )
                    net = selection_step(
                        net, Z, data, mu, sel_cfg, step_cfg=cfg,
                        workers=workers, transient_reg=transient,
                    )
                    after_total = (
                        qp_objective(net, Z, data, mu, transient) + aic_cost(net, sel_cfg.epsilon_sq)
                    )
                    trace.selection_events.append(
                        {
                            "iteration": it,
                            "before": before_total,
                            "after": after_total,
                            "sizes": [l.spec.out_dim for l in net.layers],
                        }
                    )
                    it += 1
                    record("model_select")

            if track_val:
                cur = _eval_net(net, data)
                if cur < best[2]:
                    best = (net.copy(), Z.copy(), cur)
            else:
                cur = qp_objective(net, Z, data, mu, transient)
            if time_budget is not None and time.perf_counter() - t0 > time_budget:
                stop = True
                break
            if track_val and cur > prev:
                break
            if abs(cur - prev) / max(1.0, abs(cur)) < schedule.stage_tolerance:
                prev = cur
                break
            prev = cur
        if track_val:
            net, Z = best[0], best[1]
        if stop or stage == schedule.max_stages - 1:
            break
        mu *= schedule.growth
        if mu > schedule.reg_drop_threshold:
            transient = 0.0
        it += 1
        record("mu_increase")
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    return net, Z, trace
