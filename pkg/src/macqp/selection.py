"""Architecture cost (AIC) and per-block model selection during training.

The selection criterion adds 2*eps^2 times the free-parameter count to
the fit error.  Because the penalized objective separates over blocks at
fixed coordinates, each block's size can be chosen independently by
refitting it at every candidate size and scoring fit + cost.
"""

from dataclasses import dataclass, replace

import numpy as np

from .baselines import fit_rbf_linear_pair
from .mac import _block_inputs, block_slices, mac_train
from .model import Layer, LayerKind, LayerWeights, MacqpError, NestedNet


@dataclass
class SelectionConfig:
    candidates_per_block: list
    epsilon_sq: float
    cadence: int = 10

    def __post_init__(self):
        if self.epsilon_sq <= 0:
            raise ValueError("epsilon_sq must be positive")
        if self.cadence < 1:
            raise ValueError("cadence must be positive")
        for cands in self.candidates_per_block:
            if not cands or list(cands) != sorted(cands):
                raise ValueError("candidate lists must be nonempty and ascending")


def aic_cost(net, epsilon_sq):
    """Model cost 2 * eps^2 * (free parameter count), additive over layers."""
    return 2.0 * epsilon_sq * sum(l.weights.matrix.size for l in net.layers)


def selectable_blocks(net):
    """Indices of blocks whose internal size can vary: RBF + linear pairs.

    Only blocks whose output boundary carries no auxiliary coordinates of
    changing width qualify; an RBF+linear pair varies its internal basis
    count while keeping its output width fixed, so it always does.
    """
    out = []
    for j, sl in enumerate(block_slices(net)):
        kinds = [net.layers[i].spec.kind for i in range(sl[0], sl[1])]
        if kinds == [LayerKind.GAUSSIAN_RBF, LayerKind.LINEAR_DENSE]:
            out.append(j)
    return out


def _pair_objective(rbf_layer, lin_layer, A_in, T, weight, transient_reg):
    from .kernels import rbf_design
    from .model import add_bias_col

    phi = rbf_design(A_in, rbf_layer.weights.matrix, rbf_layer.spec.rbf_width)
    phi_full = add_bias_col(phi) if lin_layer.spec.bias else phi
    out = phi_full @ lin_layer.weights.matrix.T
    val = 0.5 * weight * float(np.sum((T - out) ** 2))
    lam = lin_layer.spec.ridge + transient_reg
    if lam > 0:
        val += lam * float(np.sum(lin_layer.weights.matrix**2))
    return val


def _pair_param_count(rbf_layer, lin_layer):
    return rbf_layer.weights.matrix.size + lin_layer.weights.matrix.size


def _candidate_pair(rbf_spec, lin_spec, m):
    rbf_s = replace(rbf_spec, out_dim=m)
    lin_s = replace(lin_spec, in_dim=m)
    return (
        Layer(rbf_s, LayerWeights(np.zeros(rbf_s.weight_shape))),
        Layer(lin_s, LayerWeights(np.zeros(lin_s.weight_shape))),
    )


def selection_step(net, Z, data, mu, cfg, step_cfg=None, workers=1,
                   transient_reg=0.0, kmeans_seed=0):
    """Choose each selectable block's size by refit-and-score at fixed Z.

    Keeps the current block unless some candidate scores at least as
    well; candidate fits that fail are skipped.  The combined fit + cost
    objective never increases.
    """
    slices = block_slices(net)
    ins = _block_inputs(net, Z, data.X)
    targets = list(Z.coords) + [data.Y]
    sel = selectable_blocks(net)
    if len(cfg.candidates_per_block) != len(sel):
        raise MacqpError(
            f"{len(sel)} selectable blocks but "
            f"{len(cfg.candidates_per_block)} candidate lists"
        )
    new_layers = list(net.copy().layers)
    for cands, j in zip(cfg.candidates_per_block, sel):
        sl = slices[j]
        weight = 1.0 if j == len(slices) - 1 else mu
        rbf_cur, lin_cur = net.layers[sl[0]], net.layers[sl[0] + 1]
        best_score = (
            _pair_objective(rbf_cur, lin_cur, ins[j], targets[j], weight, transient_reg)
            + 2.0 * cfg.epsilon_sq * _pair_param_count(rbf_cur, lin_cur)
        )
        best_pair = None
        for m in cands:
            try:
                tmpl_rbf, tmpl_lin = _candidate_pair(rbf_cur.spec, lin_cur.spec, m)
                fit_rbf, fit_lin = fit_rbf_linear_pair(
                    tmpl_rbf, tmpl_lin, ins[j], targets[j], weight, seed=kmeans_seed
                )
            except MacqpError:
                continue
            score = (
                _pair_objective(fit_rbf, fit_lin, ins[j], targets[j], weight, transient_reg)
                + 2.0 * cfg.epsilon_sq * _pair_param_count(fit_rbf, fit_lin)
            )
            if score < best_score:
                best_score = score
                best_pair = (fit_rbf, fit_lin)
        if best_pair is not None:
            new_layers[sl[0]] = best_pair[0]
            new_layers[sl[0] + 1] = best_pair[1]
    return NestedNet(new_layers, list(net.placement))


def mac_train_with_selection(net, data, schedule, step_cfg, sel_cfg, workers=1,
                             time_budget=None, z_init=None):
    """Penalty-path training with a selection step every ``cadence`` iterations."""
    return mac_train(
        net, data, schedule, step_cfg, workers=workers,
        time_budget=time_budget, z_init=z_init, sel_cfg=sel_cfg,
    )
