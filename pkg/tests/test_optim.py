import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tlens.optim import OptimConfig, OptimState, expose_scaling, optim_step


def run(cfg, grads, theta0):
    state, theta, deltas = OptimState.zeros(theta0.size), theta0.copy(), []
    for g in grads:
        delta, state = optim_step(state, cfg, g, theta)
        theta = theta + delta
        deltas.append(delta)
    return theta, deltas, state


@pytest.fixture
def history():
    rng = np.random.default_rng(0)
    return [rng.normal(size=6) for _ in range(12)], rng.normal(size=6)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(kind="nadam"), dict(beta1=1.0), dict(beta2=-0.1), dict(weight_decay=-1), dict(eps=0), dict(gamma=0),
         dict(warmup_steps=-1)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OptimConfig(**kw)

    def test_warmup_and_decay(self):
        cfg = OptimConfig(gamma=1.0, warmup_steps=4, decay_steps=(10, 20), decay_factor=0.1)
        assert [cfg.lr(t) for t in (1, 2, 4, 10)] == [0.25, 0.5, 1.0, 1.0]
        assert cfg.lr(11) == pytest.approx(0.1)
        assert cfg.lr(21) == pytest.approx(0.01)

    def test_decay_only_where_used(self):
        assert OptimConfig("sgd", weight_decay=0.3).decay == 0.0
        assert OptimConfig("adamw", weight_decay=0.3).decay == 0.3


class TestDegenerations:
    def test_momentum_beta_zero_is_sgd(self, history):
        grads, theta0 = history
        a = run(OptimConfig("sgd", gamma=0.1), grads, theta0)[1]
        b = run(OptimConfig("momentum", gamma=0.1, beta1=0.0), grads, theta0)[1]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_weight_decay_zero_is_sgd(self, history):
        grads, theta0 = history
        a = run(OptimConfig("sgd", gamma=0.1), grads, theta0)[1]
        b = run(OptimConfig("weight_decay", gamma=0.1, weight_decay=0.0), grads, theta0)[1]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_first_momentum_step_equals_sgd(self, history):
        grads, theta0 = history
        a = run(OptimConfig("sgd", gamma=0.1), grads[:1], theta0)[1][0]
        b = run(OptimConfig("momentum", gamma=0.1, beta1=0.9), grads[:1], theta0)[1][0]
        np.testing.assert_allclose(a, b, rtol=1e-15, atol=0)


class TestClosedForms:
    def test_constant_gradient_sgd(self):
        g, theta0 = np.array([1.0, -2.0]), np.array([0.5, 0.5])
        theta = run(OptimConfig("sgd", gamma=0.01), [g] * 25, theta0)[0]
        np.testing.assert_allclose(theta, theta0 - 25 * 0.01 * g, atol=1e-14)

    def test_weight_decay_closed_form(self, history):
        grads, theta0 = history
        gamma, lam = 0.05, 0.3
        theta = run(OptimConfig("weight_decay", gamma=gamma, weight_decay=lam), grads, theta0)[0]
        t = len(grads)
        closed = (1 - lam * gamma) ** t * theta0 - gamma * sum(
            (1 - lam * gamma) ** (t - k) * g for k, g in enumerate(grads, start=1)
        )
        np.testing.assert_allclose(theta, closed, rtol=0, atol=1e-12)

    def test_momentum_matches_weighted_history(self, history):
        grads, theta0 = history
        b1, gamma = 0.8, 0.1
        deltas = run(OptimConfig("momentum", gamma=gamma, beta1=b1), grads, theta0)[1]
        for t in range(1, len(grads) + 1):
            avg = sum(b1 ** (t - k) * grads[k - 1] for k in range(1, t + 1))
            expected = -gamma * (1 - b1) / (1 - b1**t) * avg
            np.testing.assert_allclose(deltas[t - 1], expected, atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 0.95), st.floats(0.5, 0.999), st.floats(0.0, 0.5), st.integers(0, 1000))
    def test_adamw_against_replay(self, b1, b2, lam, seed):
        rng = np.random.default_rng(seed)
        grads = [rng.normal(size=4) for _ in range(6)]
        theta0 = rng.normal(size=4)
        cfg = OptimConfig("adamw", gamma=0.01, beta1=b1, beta2=b2, weight_decay=lam, eps=1e-8)
        state, theta = OptimState.zeros(4), theta0.copy()
        for t, g in enumerate(grads, start=1):
            delta, state = optim_step(state, cfg, g, theta)
            m = sum((1 - b1) * b1 ** (t - k) * grads[k - 1] for k in range(1, t + 1)) / (1 - b1**t)
            phi = np.sqrt((1 - b2) / (1 - b2**t) * sum(b2 ** (t - k) * grads[k - 1] ** 2 for k in range(1, t + 1))) + 1e-8
            np.testing.assert_allclose(expose_scaling(state), phi, rtol=1e-12)
            np.testing.assert_allclose(delta, -0.01 * (m / phi + lam * theta), rtol=1e-10, atol=1e-15)
            theta = theta + delta


class TestScaling:
    def test_first_step_phi(self):
        g = np.array([0.3, -2.0, 0.0])
        _, state = optim_step(OptimState.zeros(3), OptimConfig("adamw", eps=1e-8), g, np.zeros(3))
        np.testing.assert_allclose(expose_scaling(state), np.abs(g) + 1e-8, rtol=1e-15)

    def test_zero_gradient_phi_is_eps(self):
        cfg = OptimConfig("adamw", eps=1e-6)
        state = OptimState.zeros(2)
        for _ in range(3):
            _, state = optim_step(state, cfg, np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(expose_scaling(state), np.full(2, 1e-6))

    def test_query_before_step(self):
        with pytest.raises(RuntimeError):
            expose_scaling(OptimState.zeros(2))

    def test_step_sizes_logged(self):
        cfg = OptimConfig("sgd", gamma=1.0, warmup_steps=2)
        _, _, state = run(cfg, [np.zeros(1)] * 3, np.zeros(1))
        assert state.gammas == [0.5, 1.0, 1.0]
