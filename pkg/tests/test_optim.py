"""Adam update semantics."""

import numpy as np
import pytest

from mfgprice.autodiff import ShapeMismatchError
from mfgprice.networks import MLP_PRICE, RNN_CONTROL, init_params
from mfgprice.optim import AdamState, adam_step


def _zero_grads(params):
    return {name: np.zeros_like(a) for name, a in params.items()}


def _unit_grads(params, rng):
    return {name: rng.choice([-1.0, 1.0], size=a.shape) for name, a in params.items()}


class TestAdam:
    def test_state_mirrors_param_shapes(self):
        ps = init_params(RNN_CONTROL, seed=0)
        st = AdamState.for_params(ps)
        for name, a in ps.items():
            assert st.m[name].shape == a.shape
            assert st.v[name].shape == a.shape
            assert not np.any(st.m[name]) and not np.any(st.v[name])

    def test_zero_gradient_is_a_no_op(self):
        ps = init_params(MLP_PRICE, seed=1)
        before = ps.to_vector()
        st = AdamState.for_params(ps)
        adam_step(st, ps, _zero_grads(ps))
        assert np.array_equal(ps.to_vector(), before)
        assert st.t == 1

    def test_first_step_magnitude_is_lr_times_sign(self):
        # with zero moments, the bias-corrected first update is
        # lr * g / (|g| + eps'), i.e. lr * sign(g) up to the stabilizer
        ps = init_params(MLP_PRICE, seed=2)
        before = ps.to_vector()
        st = AdamState.for_params(ps, lr=1e-3)
        rng = np.random.default_rng(0)
        grads = {name: rng.normal(size=a.shape) for name, a in ps.items()}
        adam_step(st, ps, grads)
        flat_g = np.concatenate([grads[name].ravel() for name, _ in ps.items()])
        delta = ps.to_vector() - before
        assert delta == pytest.approx(-1e-3 * np.sign(flat_g), rel=1e-4)

    def test_descent_reduces_quadratic(self):
        ps = init_params(MLP_PRICE, seed=3)
        st = AdamState.for_params(ps, lr=1e-2)
        # f = 1/2 |theta|^2, gradient = theta
        for _ in range(200):
            grads = {name: a.copy() for name, a in ps.items()}
            adam_step(st, ps, grads)
        assert np.linalg.norm(ps.to_vector()) < np.linalg.norm(init_params(MLP_PRICE, seed=3).to_vector())

    def test_ascent_negates_descent_exactly(self):
        # mirrored updates from a zero start stay exact negations of each
        # other step by step (IEEE rounding is sign-symmetric)
        rng = np.random.default_rng(4)
        ps_d = init_params(MLP_PRICE, seed=5)
        ps_d.from_vector(np.zeros(ps_d.to_vector().size))
        ps_a = ps_d.copy()
        st_d = AdamState.for_params(ps_d)
        st_a = AdamState.for_params(ps_a)
        for _ in range(3):
            grads = {name: rng.normal(size=a.shape) for name, a in ps_d.items()}
            adam_step(st_d, ps_d, grads, direction="descent")
            adam_step(st_a, ps_a, grads, direction="ascent")
        assert np.array_equal(ps_d.to_vector(), -ps_a.to_vector())

    def test_ascent_climbs_concave_objective(self):
        # f(theta) = -theta^2 has gradient -2 theta; ascent moves toward 0
        ps = init_params(MLP_PRICE, seed=6)
        st = AdamState.for_params(ps, lr=1e-2)
        for _ in range(300):
            grads = {name: -2.0 * a for name, a in ps.items()}
            adam_step(st, ps, grads, direction="ascent")
        assert np.linalg.norm(ps.to_vector()) < 1e-1 * np.linalg.norm(init_params(MLP_PRICE, seed=6).to_vector())

    def test_shape_guard(self):
        ps = init_params(MLP_PRICE, seed=7)
        st = AdamState.for_params(ps)
        grads = _zero_grads(ps)
        grads["layer0.w"] = np.zeros((2, 32))
        with pytest.raises(ShapeMismatchError):
            adam_step(st, ps, grads)

    def test_direction_validated(self):
        ps = init_params(MLP_PRICE, seed=8)
        st = AdamState.for_params(ps)
        with pytest.raises(ValueError):
            adam_step(st, ps, _zero_grads(ps), direction="sideways")

    def test_two_runs_identical(self):
        rng = np.random.default_rng(9)
        gs = [_unit_grads(init_params(MLP_PRICE, seed=10), rng) for _ in range(5)]
        outs = []
        for _ in range(2):
            ps = init_params(MLP_PRICE, seed=10)
            st = AdamState.for_params(ps)
            for g in gs:
                adam_step(st, ps, g)
            outs.append(ps.to_vector())
        assert np.array_equal(outs[0], outs[1])
