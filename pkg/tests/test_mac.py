"""Penalized objective, alternating W/Z steps and the penalty-path driver."""

import numpy as np
import pytest

from conftest import random_dataset, random_mixed_net, sigmoid_autoencoder, slow_forward
from macqp.mac import (
    AuxState,
    PenaltySchedule,
    StepConfig,
    block_slices,
    constraint_residual_vectors,
    constraint_residuals,
    lift_to_feasible,
    mac_train,
    multiplier_estimates,
    postprocess,
    qp_objective,
    w_step,
    z_step,
)
from macqp.model import (
    Dataset,
    Layer,
    LayerKind,
    LayerSpec,
    LayerWeights,
    NestedNet,
    add_bias_col,
    forward_all,
    init_weights,
    nested_objective,
)


def _slow_qp(net, Z, data, mu):
    """Scalar-loop evaluation of the penalized objective."""
    bounds = [0] + list(net.placement) + [len(net.layers)]
    total = 0.0
    for n in range(data.n):
        cur = data.X[n]
        for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            out = cur
            for i in range(a, b):
                out = slow_forward(NestedNet([net.layers[i]]), out)
            if j < len(bounds) - 2:
                z = Z.coords[j][n]
                total += 0.5 * mu * float(np.sum((z - out) ** 2))
                cur = z
            else:
                total += 0.5 * float(np.sum((data.Y[n] - out) ** 2))
    for layer in net.layers:
        total += layer.spec.ridge * float(np.sum(layer.weights.matrix**2))
    return total


def _identity_linear_layer(d):
    spec = LayerSpec(LayerKind.LINEAR_DENSE, d, d, bias=False)
    return Layer(spec, LayerWeights(np.eye(d)))


class TestLiftAndQp:
    def test_lifted_residuals_are_zero(self, rng):
        net = random_mixed_net(rng)
        X = rng.normal(size=(9, net.in_dim))
        Z = lift_to_feasible(net, X)
        np.testing.assert_array_equal(constraint_residuals(net, Z, X), np.zeros(9))

    def test_qp_at_lifted_state_equals_nested(self, rng):
        for mu in (0.5, 1.0, 37.0, 1e6):
            net = random_mixed_net(rng, ridge=1e-3)
            data = random_dataset(rng, net)
            Z = lift_to_feasible(net, data.X)
            e1 = nested_objective(net, data)
            assert abs(qp_objective(net, Z, data, mu) - e1) <= 1e-12 * (1.0 + e1)

    def test_single_placement_lift_is_coding_activations(self, rng):
        net = sigmoid_autoencoder((6, 4, 2, 4, 6), seed=1, placement=[2])
        X = rng.normal(size=(5, 6))
        Z = lift_to_feasible(net, X)
        want = np.vstack([
            slow_forward(NestedNet(net.layers[:2]), x) for x in X
        ])
        np.testing.assert_allclose(Z.coords[0], want, rtol=1e-12)

    def test_mu_zero_is_last_block_loss_only(self, rng):
        net = random_mixed_net(rng)
        data = random_dataset(rng, net)
        Z = AuxState([rng.normal(size=c.shape) for c in lift_to_feasible(net, data.X).coords])
        slices = block_slices(net)
        feats = Z.coords[-1]
        for i in range(slices[-1][0], slices[-1][1]):
            feats = forward_all(NestedNet([net.layers[i]]), feats)[-1]
        want = 0.5 * float(np.sum((data.Y - feats) ** 2))
        np.testing.assert_allclose(qp_objective(net, Z, data, 0.0), want, rtol=1e-12)

    def test_qp_matches_scalar_loop(self, rng):
        for _ in range(10):
            net = random_mixed_net(rng, ridge=1e-3)
            data = random_dataset(rng, net, n=7)
            lifted = lift_to_feasible(net, data.X)
            Z = AuxState([c + rng.normal(size=c.shape) for c in lifted.coords])
            mu = float(rng.uniform(0.1, 100.0))
            np.testing.assert_allclose(
                qp_objective(net, Z, data, mu), _slow_qp(net, Z, data, mu), rtol=1e-11
            )


class TestWStep:
    def test_linear_block_matches_normal_equations(self, rng):
        specs = [
            LayerSpec(LayerKind.LINEAR_DENSE, 4, 3, ridge=0.01),
            LayerSpec(LayerKind.LINEAR_DENSE, 3, 2, ridge=0.001),
        ]
        net = init_weights(specs, 5, placement=[1])
        data = Dataset(rng.normal(size=(20, 4)), rng.normal(size=(20, 2)))
        Z = AuxState([rng.normal(size=(20, 3))])
        mu = 3.0
        out = w_step(net, Z, data, mu, StepConfig())

        # block 0: weight mu, ridge 0.01; block 1: weight 1, ridge 0.001
        for (phi_raw, T, weight, lam, idx) in (
            (data.X, Z.coords[0], mu, 0.01, 0),
            (Z.coords[0], data.Y, 1.0, 0.001, 1),
        ):
            phi = add_bias_col(phi_raw)
            A = phi.T @ phi + (2.0 * lam / weight) * np.eye(phi.shape[1])
            want = np.linalg.solve(A, phi.T @ T).T
            np.testing.assert_allclose(out.layers[idx].weights.matrix, want, rtol=1e-9)

    def test_stationary_sigmoid_block_unchanged(self, rng):
        spec = LayerSpec(LayerKind.SIGMOID_DENSE, 3, 4)
        net = init_weights([spec, LayerSpec(LayerKind.LINEAR_DENSE, 4, 2)], 2,
                           placement=[1])
        X = rng.normal(size=(15, 3))
        targets = forward_all(NestedNet([net.layers[0]]), X)[-1]
        Z = AuxState([targets])
        data = Dataset(X, rng.normal(size=(15, 2)))
        out = w_step(net, Z, data, 2.0, StepConfig())
        np.testing.assert_allclose(
            out.layers[0].weights.matrix, net.layers[0].weights.matrix,
            rtol=0, atol=1e-9,
        )

    def test_rbf_block_with_all_centers_uses_inputs(self, rng):
        n = 10
        specs = [
            LayerSpec(LayerKind.GAUSSIAN_RBF, 3, n, rbf_width=1.5),
            LayerSpec(LayerKind.LINEAR_DENSE, n, 2, ridge=1e-8, bias=False),
        ]
        net = init_weights(specs, 0, placement=[])
        data = Dataset(rng.normal(size=(n, 3)), rng.normal(size=(n, 2)))
        Z = AuxState([])
        out = w_step(net, Z, data, 1.0, StepConfig())
        np.testing.assert_array_equal(out.layers[0].weights.matrix, data.X)

    def test_never_increases_qp(self, rng):
        for _ in range(5):
            net = sigmoid_autoencoder((6, 4, 2, 4, 6), seed=int(rng.integers(1000)))
            data = Dataset(rng.uniform(size=(25, 6)), rng.uniform(size=(25, 6)))
            Z = AuxState(
                [c + 0.1 * rng.normal(size=c.shape)
                 for c in lift_to_feasible(net, data.X).coords]
            )
            mu = float(rng.uniform(0.5, 20.0))
            before = qp_objective(net, Z, data, mu)
            after = qp_objective(w_step(net, Z, data, mu, StepConfig()), Z, data, mu)
            assert after <= before * (1 + 1e-10)


class TestZStep:
    def test_identity_last_block_closed_form(self, rng):
        d, m = 4, 3
        specs = [LayerSpec(LayerKind.LINEAR_DENSE, d, m)]
        first = init_weights(specs, 3).layers[0]
        net = NestedNet([first, _identity_linear_layer(m)], [1])
        X = rng.normal(size=(12, d))
        Y = rng.normal(size=(12, m))
        data = Dataset(X, Y)
        C = forward_all(NestedNet([first]), X)[-1]
        Z = AuxState([rng.normal(size=(12, m))])
        for mu in (0.1, 1.0, 50.0):
            out = z_step(net, Z, data, mu, StepConfig())
            want = (Y + mu * C) / (1.0 + mu)
            np.testing.assert_allclose(out.coords[0], want, rtol=0, atol=1e-8)

    def test_huge_mu_keeps_feasible_point(self, rng):
        net = sigmoid_autoencoder((5, 4, 3, 5), seed=9)
        data = Dataset(rng.uniform(size=(10, 5)), rng.uniform(size=(10, 5)))
        Z = lift_to_feasible(net, data.X)
        out = z_step(net, Z, data, 1e12, StepConfig())
        for z0, z1 in zip(Z.coords, out.coords):
            assert np.linalg.norm(z1 - z0) <= 1e-6 * max(np.linalg.norm(z0), 1e-30)

    def test_point_order_independence(self, rng):
        net = sigmoid_autoencoder((5, 3, 5), seed=4)
        data = Dataset(rng.uniform(size=(11, 5)), rng.uniform(size=(11, 5)))
        Z = AuxState([rng.normal(size=(11, 3))])
        out = z_step(net, Z, data, 2.0, StepConfig())
        perm = rng.permutation(11)
        out_p = z_step(
            net, AuxState([Z.coords[0][perm]]),
            Dataset(data.X[perm], data.Y[perm]), 2.0, StepConfig(),
        )
        np.testing.assert_array_equal(out_p.coords[0], out.coords[0][perm])

    def test_never_increases_qp(self, rng):
        net = sigmoid_autoencoder((6, 4, 2, 4, 6), seed=11)
        data = Dataset(rng.uniform(size=(20, 6)), rng.uniform(size=(20, 6)))
        Z = AuxState(
            [c + 0.2 * rng.normal(size=c.shape)
             for c in lift_to_feasible(net, data.X).coords]
        )
        for mu in (0.3, 3.0, 300.0):
            before = qp_objective(net, Z, data, mu)
            after = qp_objective(net, z_step(net, Z, data, mu, StepConfig()), data, mu)
            assert after <= before * (1 + 1e-10)


class TestResidualsAndMultipliers:
    def test_single_coordinate_perturbation(self, rng):
        net = sigmoid_autoencoder((5, 3, 5), seed=2)
        X = rng.uniform(size=(8, 5))
        Z = lift_to_feasible(net, X)
        delta = 0.37
        Z.coords[0][4, 1] += delta
        res = constraint_residuals(net, Z, X)
        assert res[4] == pytest.approx(delta, rel=1e-12)
        assert np.all(res[np.arange(8) != 4] == 0.0)

    def test_residuals_match_scalar_loop(self, rng):
        net = random_mixed_net(rng)
        data = random_dataset(rng, net, n=6)
        Z = AuxState(
            [c + rng.normal(size=c.shape)
             for c in lift_to_feasible(net, data.X).coords]
        )
        bounds = [0] + list(net.placement)
        got = constraint_residuals(net, Z, data.X)
        for n in range(6):
            acc = 0.0
            cur = data.X[n]
            for j, a in enumerate(bounds[:-1]):
                out = cur
                for i in range(a, bounds[j + 1]):
                    out = slow_forward(NestedNet([net.layers[i]]), out)
                acc += float(np.sum((Z.coords[j][n] - out) ** 2))
                cur = Z.coords[j][n]
            np.testing.assert_allclose(got[n], np.sqrt(acc), rtol=1e-11)

    def test_multiplier_identity_and_linearity(self, rng):
        net = random_mixed_net(rng)
        X = rng.normal(size=(7, net.in_dim))
        Z = AuxState(
            [c + rng.normal(size=c.shape) for c in lift_to_feasible(net, X).coords]
        )
        res = constraint_residual_vectors(net, Z, X)
        np.testing.assert_array_equal(multiplier_estimates(net, Z, X, 5.0), -5.0 * res)
        np.testing.assert_allclose(
            multiplier_estimates(net, Z, X, 15.0),
            3.0 * multiplier_estimates(net, Z, X, 5.0),
            rtol=1e-15,
        )
        feas = lift_to_feasible(net, X)
        assert np.all(multiplier_estimates(net, feas, X, 1e8) == 0.0)


class TestMacTrain:
    def test_zero_stages_returns_inputs(self, rng):
        net = sigmoid_autoencoder((5, 3, 5), seed=1)
        data = Dataset(rng.uniform(size=(10, 5)), rng.uniform(size=(10, 5)))
        out, Z, trace = mac_train(
            net, data, PenaltySchedule(max_stages=0), StepConfig()
        )
        assert trace.rows == []
        for a, b in zip(net.layers, out.layers):
            np.testing.assert_array_equal(a.weights.matrix, b.weights.matrix)

    def test_default_schedule_mu_markers(self, rng):
        net = sigmoid_autoencoder((6, 4, 2, 4, 6), seed=3)
        X = rng.uniform(size=(40, 6))
        data = Dataset(X, X)
        schedule = PenaltySchedule(max_stages=4, max_iters_per_stage=2)
        _, _, trace = mac_train(net, data, schedule, StepConfig())
        mus = sorted({r.mu for r in trace.rows})
        assert mus == [1.0, 10.0, 100.0, 1000.0]

    def test_stage_end_residual_nonincreasing_and_descent(self, rng):
        net = sigmoid_autoencoder((8, 5, 2, 5, 8), seed=6)
        X = rng.uniform(size=(50, 8))
        data = Dataset(X, X)
        schedule = PenaltySchedule(max_stages=5, max_iters_per_stage=8)
        _, _, trace = mac_train(net, data, schedule, StepConfig())

        ends = [r.constraint_viol for r in trace.rows if r.event == "mu_increase"]
        assert len(ends) == 4
        assert all(b <= a * (1 + 1e-9) for a, b in zip(ends, ends[1:]))

        # within a stage, every accepted step leaves the penalized objective
        # no higher than the previous trace row's value
        for prev, cur in zip(trace.rows, trace.rows[1:]):
            if cur.event in ("wstep", "zstep") and prev.mu == cur.mu:
                assert cur.eq <= prev.eq * (1 + 1e-10)

    def test_reduces_nested_error(self, rng):
        from macqp.data import synth_manifold_dataset

        net = sigmoid_autoencoder((8, 5, 2, 5, 8), seed=6)
        data = synth_manifold_dataset(50, 8, 1, 0.01, seed=4)
        out, Z, trace = mac_train(
            net, data, PenaltySchedule(max_stages=6, stage_tolerance=1e-4), StepConfig()
        )
        assert nested_objective(out, data) < 0.2 * nested_objective(net, data)


class TestPostprocess:
    def test_linear_last_block_matches_ridge_oracle(self, rng):
        net = sigmoid_autoencoder((6, 4, 2, 4, 6), seed=8, ridge=1e-3)
        X = rng.uniform(size=(30, 6))
        data = Dataset(X, X)
        Z = lift_to_feasible(net, X)
        out = postprocess(net, Z, data)
        feats = forward_all(net, X)[-2]
        phi = add_bias_col(feats)
        A = phi.T @ phi + 2e-3 * np.eye(phi.shape[1])
        want = np.linalg.solve(A, phi.T @ X).T
        np.testing.assert_allclose(out.layers[-1].weights.matrix, want, rtol=1e-8)

    def test_already_optimal_is_unchanged(self, rng):
        net = sigmoid_autoencoder((6, 3, 6), seed=5)
        X = rng.uniform(size=(25, 6))
        data = Dataset(X, X)
        Z = lift_to_feasible(net, X)
        once = postprocess(net, Z, data)
        twice = postprocess(once, lift_to_feasible(once, X), data)
        np.testing.assert_array_equal(
            once.layers[-1].weights.matrix, twice.layers[-1].weights.matrix
        )

    def test_never_increases_e1(self, rng):
        for _ in range(10):
            net = sigmoid_autoencoder((6, 4, 2, 4, 6), seed=int(rng.integers(1000)))
            X = rng.uniform(size=(20, 6))
            data = Dataset(X, X)
            Z = AuxState(
                [c + 0.3 * rng.normal(size=c.shape)
                 for c in lift_to_feasible(net, X).coords]
            )
            assert nested_objective(postprocess(net, Z, data), data) <= (
                nested_objective(net, data) + 1e-10
            )
