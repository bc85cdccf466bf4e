"""Euler-Lagrange residuals and the a-posteriori certificate."""

import numpy as np
import pytest

from mfgprice.estimator import ResidualReport, adjoint_states, posterior_estimate, residuals
from mfgprice.model import (
    CONSTANT_MEAN,
    QUADRATIC,
    QUARTIC,
    CostSpec,
    SupplySpec,
    TimeGrid,
    supply_on_grid,
)
from mfgprice.networks import init_params
from mfgprice.oracle import lq_coefficients, lq_feedback, lq_price_fn
from mfgprice.rollout import TrajectoryBatch, rollout

QUAD = CostSpec(kind=QUADRATIC, eta=1.0, kappa=1.0, c=1.0, gamma=np.exp(-1.0), zeta=1.0)
QUART = CostSpec(kind=QUARTIC, eta=1.0, kappa=1.0, c=1.0, gamma=np.exp(-1.0), zeta=1.0)
SUPPLY = SupplySpec(kind=CONSTANT_MEAN, q0=0.1)


def _flat_batch(n=3, steps=6, x=0.0, v=0.0, price=0.0, q=0.0, horizon=1.0):
    grid = TimeGrid(horizon=horizon, steps=steps)
    return TrajectoryBatch(
        grid=grid,
        X=np.full((n, steps + 1), x),
        v=np.full((n, steps + 1), v),
        price=np.full(steps + 1, price),
        supply=np.full(steps + 1, q),
    )


def _random_batch(cost_kind, seed, n=5, steps=12):
    tv = init_params("mlp_control", seed)
    tw = init_params("mlp_price", seed + 1)
    grid = TimeGrid(horizon=1.0, steps=steps)
    x0 = np.random.default_rng(seed).normal(-0.25, 0.4, size=n)
    return rollout(tv, tw, x0, grid, SUPPLY)


class TestAdjoint:
    def test_zero_case(self):
        batch = _flat_batch()
        assert np.array_equal(adjoint_states(batch, QUAD), np.zeros((3, 7)))

    def test_direct_formula(self):
        batch = _flat_batch(v=2.0, price=1.0)
        p = adjoint_states(batch, QUAD)
        assert np.array_equal(p, np.full((3, 7), -3.0))

    @pytest.mark.parametrize("cost", [QUAD, QUART])
    def test_slope_identity(self, cost):
        # P + price = -l'(v), a rearrangement of the definition
        batch = _random_batch(cost.kind, seed=2)
        p = adjoint_states(batch, cost)
        from mfgprice.model import lagrangian_grads

        _, lv = lagrangian_grads(cost, batch.X, batch.v)
        assert p + batch.price[None, :] == pytest.approx(-lv, abs=1e-15)


class TestTrivialGame:
    def test_stationary_solution_has_zero_residuals(self):
        cost = CostSpec(kind=QUADRATIC, eta=1.0, kappa=0.0, c=1.0, gamma=1.0, zeta=0.0)
        rep = residuals(_flat_batch(), cost)
        assert rep.estimate == 0.0
        assert rep.eps_run_sq == 0.0 and rep.eps_t_sq == 0.0 and rep.eps_q_sq == 0.0
        assert not np.any(rep.eps_run) and not np.any(rep.eps_t) and not np.any(rep.eps_q)
        assert not np.any(rep.eps_run0) and rep.eps_q0 == 0.0


class TestShapesAndAggregate:
    def test_index_ranges(self):
        rep = residuals(_random_batch(QUADRATIC, seed=3, n=4, steps=10), QUAD)
        assert rep.eps_run.shape == (4, 9)
        assert rep.eps_run0.shape == (4,)
        assert rep.eps_t.shape == (4,)
        assert rep.eps_q.shape == (9,)

    def test_additivity_exact(self):
        rep = residuals(_random_batch(QUADRATIC, seed=4), QUAD)
        assert rep.estimate == rep.eps_run_sq + rep.eps_t_sq + rep.eps_q_sq
        assert posterior_estimate(rep) == rep.estimate

    def test_norms_are_square_roots(self):
        rep = residuals(_random_batch(QUADRATIC, seed=5), QUAD)
        assert rep.eps_run_norm == np.sqrt(rep.eps_run_sq)
        assert rep.eps_t_norm == np.sqrt(rep.eps_t_sq)
        assert rep.eps_q_norm == np.sqrt(rep.eps_q_sq)
        assert rep.eps_run_sq >= 0 and rep.eps_t_sq >= 0 and rep.eps_q_sq >= 0

    def test_hand_set_report_sums(self):
        rep = ResidualReport(
            eps_run=np.zeros((1, 1)),
            eps_run0=np.zeros(1),
            eps_t=np.zeros(1),
            eps_q=np.zeros(1),
            eps_q0=0.0,
            eps_run_sq=0.25,
            eps_t_sq=0.5,
            eps_q_sq=0.125,
            estimate=0.875,
        )
        assert posterior_estimate(rep) == 0.875

    def test_dt_weight_in_time_norms(self):
        # residual values identical, horizon doubled: time norms scale by
        # sqrt(2) through dt, the terminal norm does not
        a = _flat_batch(v=1.0, horizon=1.0, steps=10)
        b = _flat_batch(v=1.0, horizon=2.0, steps=10)
        cost = CostSpec(kind=QUADRATIC, eta=0.0, kappa=0.0, c=1.0, gamma=0.0, zeta=0.0)
        ra, rb = residuals(a, cost), residuals(b, cost)
        assert rb.eps_q_sq == pytest.approx(2.0 * ra.eps_q_sq, rel=1e-12)
        assert rb.eps_t_sq == ra.eps_t_sq

    def test_k0_defects_excluded_from_aggregate(self):
        batch = _random_batch(QUADRATIC, seed=6)
        rep = residuals(batch, QUAD)
        batch.v[:, 0] += 50.0  # only P_0 changes, so only the k=0 defects move
        rep2 = residuals(batch, QUAD)
        assert rep2.estimate == rep.estimate
        assert not np.allclose(rep2.eps_run0, rep.eps_run0)
        assert rep2.eps_q0 != rep.eps_q0


class TestDualityIdentity:
    @pytest.mark.parametrize("cost,tol", [(QUAD, 1e-12), (QUART, 1e-9)])
    def test_clearing_residual_equals_mean_imbalance(self, cost, tol):
        for seed in (7, 8, 9):
            batch = _random_batch(cost.kind, seed)
            rep = residuals(batch, cost)
            m = batch.grid.steps
            want = batch.v.mean(axis=0)[1:m] - batch.supply[1:m]
            assert np.max(np.abs(rep.eps_q - want)) < tol


def _lq_optimum_batch(x0, steps):
    grid = TimeGrid(horizon=1.0, steps=steps)
    fn = lq_price_fn(QUAD, SUPPLY, grid, mbar0=float(x0.mean()))
    price = fn(grid.nodes)
    coeffs = lq_coefficients(QUAD, fn, grid)
    X = np.empty((x0.size, steps + 1))
    V = np.empty_like(X)
    X[:, 0] = x0
    for k in range(steps + 1):
        V[:, k] = lq_feedback(coeffs, price, k, X[:, k])
        if k < steps:
            X[:, k + 1] = X[:, k] + grid.dt * V[:, k]
    return TrajectoryBatch(
        grid=grid, X=X, v=V, price=price, supply=supply_on_grid(SUPPLY, grid)
    )


class TestAnalyticOptimum:
    x0 = np.random.default_rng(3).normal(-0.25, 0.4, size=8)

    def test_order_dt_magnitudes(self):
        rep = residuals(_lq_optimum_batch(self.x0, 30), QUAD)
        dt = 1.0 / 30.0
        # Euler against the exact flow leaves O(dt) defects, nothing worse
        assert rep.eps_run_norm < 5.0 * dt
        assert rep.eps_q_norm < 1.0 * dt
        # the terminal identity P_M = u_T'(X_M) holds exactly here
        assert rep.eps_t_norm < 1e-12

    def test_richardson_halving(self):
        r30 = residuals(_lq_optimum_batch(self.x0, 30), QUAD)
        r60 = residuals(_lq_optimum_batch(self.x0, 60), QUAD)
        for name in ("eps_run_norm", "eps_t_norm", "eps_q_norm"):
            coarse = getattr(r30, name)
            fine = getattr(r60, name)
            if coarse < 1e-12 and fine < 1e-12:
                continue  # identically-satisfied family, nothing to halve
            assert coarse / fine == pytest.approx(2.0, rel=0.25), name

    def test_estimate_shrinks_with_refinement(self):
        r30 = residuals(_lq_optimum_batch(self.x0, 30), QUAD)
        r60 = residuals(_lq_optimum_batch(self.x0, 60), QUAD)
        assert r60.estimate < r30.estimate
