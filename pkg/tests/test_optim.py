"""Optimizer closed forms and schedule endpoints."""

import numpy as np
import pytest

from changedet import optim
from changedet.errors import ConfigError, ShapeError
from changedet.tensor import Tensor


def one_param(value, grad=None):
    p = Tensor(np.full((1, 1, 1, 1), value, np.float32))
    if grad is not None:
        p.grad = np.full((1, 1, 1, 1), grad, np.float32)
    return {"w": p}


class TestLrSchedule:
    def test_endpoints_exact(self):
        assert optim.lr_at(0, 1000, 3e-4) == 3e-4
        assert optim.lr_at(1000, 1000, 3e-4) == 0.0

    def test_midpoint(self):
        assert optim.lr_at(500, 1000, 3e-4) == pytest.approx(1.5e-4, rel=1e-12)

    def test_monotone_nonincreasing_and_clamped(self):
        vals = [optim.lr_at(s, 100, 1e-3) for s in range(0, 130, 7)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert optim.lr_at(150, 100, 1e-3) == 0.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            optim.lr_at(0, 0, 1e-3)
        with pytest.raises(ConfigError):
            optim.lr_at(0, 10, 0.0)


class TestAdamW:
    def test_first_step_closed_form_no_decay(self):
        params = one_param(1.0, grad=1.0)
        state = optim.init_state(params)
        optim.adamw_step(params, state, lr=0.1, weight_decay=0.0)
        # m_hat = v_hat = 1 exactly at step 1, so w = 1 - 0.1/(1 + eps)
        assert params["w"].data.reshape(()) == pytest.approx(0.9, abs=1e-6)

    def test_first_step_closed_form_with_decay(self):
        params = one_param(1.0, grad=1.0)
        state = optim.init_state(params)
        optim.adamw_step(params, state, lr=0.1, weight_decay=0.01)
        assert params["w"].data.reshape(()) == pytest.approx(0.899, abs=1e-6)

    def test_zero_grad_no_decay_is_identity(self):
        params = one_param(0.73, grad=0.0)
        state = optim.init_state(params)
        for _ in range(5):
            optim.adamw_step(params, state, lr=0.1, weight_decay=0.0)
        assert params["w"].data.reshape(()) == pytest.approx(0.73, abs=1e-7)

    def test_missing_grad_still_decays(self):
        params = one_param(1.0)  # .grad stays None
        state = optim.init_state(params)
        before = float(params["w"].data.reshape(()))
        optim.adamw_step(params, state, lr=0.1, weight_decay=0.01)
        after = float(params["w"].data.reshape(()))
        assert after < before
        assert after == pytest.approx(before * (1 - 0.1 * 0.01), rel=1e-6)

    def test_decay_strictly_shrinks_magnitude(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        params = {"w": p}
        state = optim.init_state(params)
        norm0 = float(np.abs(p.data).sum())
        optim.adamw_step(params, state, lr=0.05, weight_decay=0.1)
        assert float(np.abs(p.data).sum()) < norm0

    def test_moments_follow_recurrence(self):
        params = one_param(0.0, grad=2.0)
        state = optim.init_state(params)
        optim.adamw_step(params, state, lr=0.0, weight_decay=0.0)
        assert state.m["w"].reshape(()) == pytest.approx(0.2, rel=1e-6)
        assert state.v["w"].reshape(()) == pytest.approx(0.004, rel=1e-5)
        params["w"].grad = np.full((1, 1, 1, 1), 1.0, np.float32)
        optim.adamw_step(params, state, lr=0.0, weight_decay=0.0)
        assert state.m["w"].reshape(()) == pytest.approx(0.9 * 0.2 + 0.1 * 1.0, rel=1e-6)
        assert state.step == 2

    def test_descends_a_quadratic(self):
        # minimize (w - 3)^2 by feeding its gradient manually
        params = one_param(0.0)
        state = optim.init_state(params)
        for step in range(300):
            w = float(params["w"].data.reshape(()))
            params["w"].grad = np.full((1, 1, 1, 1), 2 * (w - 3.0), np.float32)
            optim.adamw_step(params, state, lr=0.05, weight_decay=0.0)
        assert float(params["w"].data.reshape(())) == pytest.approx(3.0, abs=0.05)

    def test_state_name_mismatch_rejected(self):
        params = one_param(1.0, grad=1.0)
        state = optim.OptimizerState(m={"other": np.zeros((1, 1, 1, 1))}, v={"other": np.zeros((1, 1, 1, 1))})
        with pytest.raises(ShapeError):
            optim.adamw_step(params, state, lr=0.1)

    def test_state_shape_mismatch_rejected(self):
        params = one_param(1.0, grad=1.0)
        state = optim.OptimizerState(
            m={"w": np.zeros((1, 2, 1, 1), np.float32)}, v={"w": np.zeros((1, 2, 1, 1), np.float32)}
        )
        with pytest.raises(ShapeError):
            optim.adamw_step(params, state, lr=0.1)

    def test_bad_betas_rejected(self):
        params = one_param(1.0, grad=1.0)
        state = optim.init_state(params)
        with pytest.raises(ConfigError):
            optim.adamw_step(params, state, lr=0.1, beta1=1.0)

    def test_zero_grads_helper(self):
        params = one_param(1.0, grad=1.0)
        optim.zero_grads(params)
        assert params["w"].grad is None
