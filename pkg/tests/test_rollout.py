"""Trajectory generation under both architecture pairs."""

import numpy as np
import pytest
from scipy.special import expit

from mfgprice.autodiff import Tape
from mfgprice.model import (
    CONSTANT_MEAN,
    OSCILLATING_MEAN,
    SupplySpec,
    TimeGrid,
    supply_on_grid,
)
from mfgprice.networks import (
    MLP_CONTROL,
    MLP_PRICE,
    RNN_CONTROL,
    RNN_PRICE,
    fold_constant_hidden_output,
    init_params,
    mlp_eval,
    rnn_hidden_step_eval,
)
from mfgprice.rollout import (
    NonFiniteError,
    batch_from_csv,
    batch_to_csv,
    input_scales,
    price_curve,
    rollout,
    rollout_mlp,
    rollout_rnn,
)

GRID = TimeGrid(horizon=1.0, steps=30)
SUPPLY = SupplySpec(kind=CONSTANT_MEAN, q0=0.1)


def _mlp_pair(seed=0):
    return init_params(MLP_CONTROL, seed), init_params(MLP_PRICE, seed + 1000)


def _rnn_pair(seed=0):
    return init_params(RNN_CONTROL, seed), init_params(RNN_PRICE, seed + 1000)


def _constant_control(value):
    ps = init_params(MLP_CONTROL, seed=77)
    w, b = ps.layers[-1]
    w[:] = 0.0
    b[:] = value
    return ps


class TestShapesAndInvariants:
    def test_batch_shapes(self):
        tv, tw = _mlp_pair()
        x0 = np.array([-0.3, 0.1, 0.5])
        batch = rollout_mlp(tv, tw, x0, GRID, SUPPLY)
        assert batch.X.shape == (3, 31)
        assert batch.v.shape == (3, 31)
        assert batch.price.shape == (31,)
        assert batch.supply.shape == (31,)
        assert np.array_equal(batch.X[:, 0], x0)

    @pytest.mark.parametrize("pair", [_mlp_pair, _rnn_pair])
    def test_euler_chain_exact_as_stored(self, pair):
        tv, tw = pair(3)
        grid = TimeGrid(horizon=1.0, steps=5)
        x0 = np.random.default_rng(1).normal(size=3)
        batch = rollout(tv, tw, x0, grid, SUPPLY)
        for k in range(grid.steps):
            want = batch.X[:, k] + grid.dt * batch.v[:, k]
            assert np.array_equal(batch.X[:, k + 1], want)

    def test_frozen_dynamics_under_zero_control(self):
        tv = _constant_control(0.0)
        _, tw = _mlp_pair()
        x0 = np.array([0.2, -0.7])
        batch = rollout_mlp(tv, tw, x0, GRID, SUPPLY)
        assert np.array_equal(batch.X, np.tile(x0[:, None], (1, 31)))

    def test_linear_drift_exact(self):
        # dt = 1/4 and w = 1/2 are dyadic, so every partial sum is exact
        tv = _constant_control(0.5)
        _, tw = _mlp_pair()
        grid = TimeGrid(horizon=1.0, steps=4)
        x0 = np.array([0.375])
        batch = rollout_mlp(tv, tw, x0, grid, SUPPLY)
        assert batch.X[0, -1] == 0.375 + 1.0 * 0.5

    def test_price_ignores_agents(self):
        tv, tw = _mlp_pair(9)
        rng = np.random.default_rng(2)
        b1 = rollout_mlp(tv, tw, rng.normal(size=4), GRID, SUPPLY)
        b2 = rollout_mlp(tv, tw, rng.normal(size=11) + 5.0, GRID, SUPPLY)
        assert np.array_equal(b1.price, b2.price)

    def test_rejects_swapped_architectures(self):
        tv, tw = _mlp_pair()
        with pytest.raises(ValueError):
            rollout_mlp(tw, tv, np.zeros(2), GRID, SUPPLY)
        rv, rw = _rnn_pair()
        with pytest.raises(ValueError):
            rollout_rnn(tv, rw, np.zeros(2), GRID, SUPPLY)


class TestPriceCurve:
    def test_zero_network_flat_curve(self):
        tw = init_params(MLP_PRICE, seed=0)
        tw.from_vector(np.zeros(tw.to_vector().size))
        curve = price_curve(tw, "mlp", GRID, SUPPLY)
        assert np.array_equal(curve, np.zeros(31))

    def test_node_count(self):
        tw = init_params(MLP_PRICE, seed=1)
        assert price_curve(tw, "mlp", GRID, SUPPLY).shape == (31,)

    @pytest.mark.parametrize("family", ["mlp", "rnn"])
    def test_matches_rollout_price(self, family):
        tv, tw = (_mlp_pair(5) if family == "mlp" else _rnn_pair(5))
        batch = rollout(tv, tw, np.array([0.0, 1.0]), GRID, SUPPLY)
        curve = price_curve(tw, family, GRID, SUPPLY)
        assert np.array_equal(curve, batch.price)

    def test_arch_mismatch(self):
        tw = init_params(MLP_PRICE, seed=2)
        with pytest.raises(ValueError):
            price_curve(tw, "rnn", GRID, SUPPLY)


class TestRecurrentChain:
    def test_two_step_hand_rolled(self):
        tv, tw = _rnn_pair(13)
        grid = TimeGrid(horizon=1.0, steps=2)
        q = supply_on_grid(SUPPLY, grid)
        x0 = np.array([0.25])
        batch = rollout_rnn(tv, tw, x0, grid, SUPPLY)

        # price chain by explicit algebra
        hb = tw.hidden
        h = np.zeros((32, 1))
        a_w = []
        for k in range(3):
            y = np.vstack([[[q[k]]], h])
            h = expit(hb.w1 @ y + hb.b1[:, None])
            a_w.append(expit(hb.w2 @ h + hb.b2[:, None])[0, 0])
        price = mlp_eval(tw, np.vstack([grid.nodes, np.array(a_w)]))[0]
        assert batch.price == pytest.approx(price, abs=1e-15)

        # agent chain
        hv = np.zeros((32, 1))
        x = x0[0]
        for k in range(3):
            a, hv = rnn_hidden_step_eval(tv, q[k], hv)
            inp = np.array([[grid.nodes[k]], [x], [price[k]], [a[0, 0]]])
            v = mlp_eval(tv, inp)[0, 0]
            assert batch.X[0, k] == pytest.approx(x, abs=1e-15)
            assert batch.v[0, k] == pytest.approx(v, abs=1e-15)
            x = x + grid.dt * v

    def test_hidden_chain_contracts_under_constant_supply(self):
        # with ||W_h1|| < 4 the map h -> sigmoid(W [q; h] + b) contracts at
        # rate ||W_h1[:, 1:]|| / 4 (sigmoid slope <= 1/4)
        ps = init_params(RNN_PRICE, seed=14)
        ps.hidden.w1 *= 0.5 / np.linalg.norm(ps.hidden.w1[:, 1:], 2)
        rate = np.linalg.norm(ps.hidden.w1[:, 1:], 2) / 4.0
        assert rate < 1.0
        h = np.zeros((32, 1))
        diffs = []
        prev = h
        for _ in range(12):
            _, h = rnn_hidden_step_eval(ps, 0.7, prev)
            diffs.append(np.linalg.norm(h - prev))
            prev = h
        for d_next, d in zip(diffs[2:], diffs[1:]):
            assert d_next <= rate * d + 1e-15

    def test_reduction_to_feedforward(self):
        tv, tw = _rnn_pair(15)
        for ps in (tv, tw):
            ps.hidden.w1[:] = 0.0
            ps.hidden.b1[:] = 0.0
            ps.hidden.w2[:] = 0.0
        fv = fold_constant_hidden_output(tv)
        fw = fold_constant_hidden_output(tw)
        x0 = np.random.default_rng(3).normal(size=5)
        rb = rollout_rnn(tv, tw, x0, GRID, SUPPLY)
        mb = rollout_mlp(fv, fw, x0, GRID, SUPPLY)
        assert np.max(np.abs(rb.price - mb.price)) < 1e-12
        assert np.max(np.abs(rb.X - mb.X)) < 1e-12
        assert np.max(np.abs(rb.v - mb.v)) < 1e-12


class TestTapedPath:
    @pytest.mark.parametrize("pair", [_mlp_pair, _rnn_pair])
    def test_taped_matches_plain_bitwise(self, pair):
        tv, tw = pair(21)
        x0 = np.random.default_rng(4).normal(size=4)
        plain = rollout(tv, tw, x0, GRID, SUPPLY)
        taped = rollout(tv, tw, x0, GRID, SUPPLY, tape=Tape())
        assert np.array_equal(plain.X, taped.X)
        assert np.array_equal(plain.v, taped.v)
        assert np.array_equal(plain.price, taped.price)

    def test_taped_batch_carries_nodes(self):
        tv, tw = _mlp_pair(22)
        batch = rollout_mlp(tv, tw, np.zeros(2), GRID, SUPPLY, tape=Tape())
        assert len(batch.x_nodes) == 31
        assert len(batch.v_nodes) == 31
        assert len(batch.price_nodes) == 31
        assert batch.taped_params is not None

    def test_plain_batch_has_no_nodes(self):
        tv, tw = _mlp_pair(23)
        batch = rollout_mlp(tv, tw, np.zeros(2), GRID, SUPPLY)
        assert batch.tape is None and batch.x_nodes is None


class TestScalingAndSupply:
    def test_scales_off_means_identity(self):
        q = supply_on_grid(SUPPLY, GRID)
        assert input_scales(GRID, q, False) == (1.0, 1.0)

    def test_scales_on(self):
        grid = TimeGrid(horizon=2.0, steps=10)
        q = np.array([0.5, -3.0, 1.0])
        st, sq = input_scales(grid, q, True)
        assert st == 0.5
        assert sq == 1.0 / 3.0
        # small supply is not inflated
        assert input_scales(grid, np.array([0.2]), True)[1] == 1.0

    def test_scaled_rollout_matches_manual_scaling(self):
        tv, tw = _mlp_pair(31)
        q = supply_on_grid(SUPPLY, GRID)
        batch = rollout_mlp(tv, tw, np.array([0.1]), GRID, SUPPLY, input_scaling=True)
        st, sq = input_scales(GRID, q, True)
        want = mlp_eval(tw, np.vstack([GRID.nodes * st, q * sq]))[0]
        assert np.array_equal(batch.price, want)

    def test_supply_array_passthrough(self):
        tv, tw = _mlp_pair(32)
        q = supply_on_grid(SUPPLY, GRID)
        b1 = rollout_mlp(tv, tw, np.array([0.3]), GRID, SUPPLY)
        b2 = rollout_mlp(tv, tw, np.array([0.3]), GRID, q)
        assert np.array_equal(b1.price, b2.price)
        assert np.array_equal(b1.X, b2.X)

    def test_oscillating_supply_runs(self):
        tv, tw = _rnn_pair(33)
        supply = SupplySpec(kind=OSCILLATING_MEAN, q0=0.0)
        batch = rollout_rnn(tv, tw, np.array([0.0]), GRID, supply)
        assert np.all(np.isfinite(batch.X))


class TestNonFinite:
    def test_diverging_state_aborts(self):
        tv = _constant_control(np.inf)
        _, tw = _mlp_pair()
        with pytest.raises(NonFiniteError):
            rollout_mlp(tv, tw, np.zeros(2), GRID, SUPPLY)

    def test_bad_price_aborts_before_stepping(self):
        tv, tw = _mlp_pair()
        tw.layers[-1][1][:] = np.nan
        with pytest.raises(NonFiniteError, match="price"):
            rollout_mlp(tv, tw, np.zeros(2), GRID, SUPPLY)


class TestCsv:
    def test_round_trip_bitwise(self, tmp_path):
        tv, tw = _mlp_pair(41)
        x0 = np.random.default_rng(5).normal(size=3)
        batch = rollout_mlp(tv, tw, x0, GRID, SUPPLY)
        path = tmp_path / "batch.csv"
        batch_to_csv(batch, path)
        back = batch_from_csv(path)
        assert back.grid.steps == batch.grid.steps
        assert back.grid.horizon == batch.grid.horizon
        assert np.array_equal(back.X, batch.X)
        assert np.array_equal(back.v, batch.v)
        assert np.array_equal(back.price, batch.price)
        assert np.array_equal(back.supply, batch.supply)

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            batch_from_csv(path)
