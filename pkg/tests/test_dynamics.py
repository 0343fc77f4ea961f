from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from promptloop.dynamics import (
    ProximalConfig,
    estimate_jacobian,
    prompt_to_vector,
    proximal_update,
    regularized_jacobian,
    simulate_trajectory,
    spectral_radius,
    vector_to_prompt,
)
from promptloop.errors import InvalidInputError, JacobianEvaluationError, NumericalFailure
from promptloop.grid import Prompt
from promptloop.synth import linear_loop


def constructed(rng, spectrum):
    """J = V D V^-1 with a well-conditioned random V."""
    n = len(spectrum)
    while True:
        v = rng.normal(size=(n, n))
        if np.linalg.cond(v) < 50:
            break
    return v @ np.diag(spectrum) @ np.linalg.inv(v)


class TestProximal:
    def test_fixed_point(self):
        p = np.array([0.3, 0.4, 0.2, 0.3, 0.5, 0.6])
        np.testing.assert_allclose(proximal_update(p, p, p), p)

    def test_scalar(self):
        assert proximal_update([1.7], [0.0], [0.0])[0] == pytest.approx(1.0)

    def test_unregularized(self):
        p = np.array([0.1, 0.2, 0.0, 0.1, 0.3, 0.4])
        np.testing.assert_array_equal(proximal_update(p, p * 0, p * 3, ProximalConfig(0, 0)), p)

    def test_box_reordered(self):
        p_hat = np.array([0.5, 0.5, 0.6, 0.6, 0.4, 0.4])  # x1 > x2 after blending
        out = proximal_update(p_hat, p_hat, p_hat)
        assert out[2] <= out[4] and out[3] <= out[5]

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidInputError):
            ProximalConfig(-0.1, 0.3)

    @given(arrays(np.float64, 6, elements=st.floats(0, 1)),
           arrays(np.float64, 6, elements=st.floats(0, 1)),
           arrays(np.float64, 6, elements=st.floats(0, 1)),
           st.floats(0, 2), st.floats(0, 2))
    def test_convex_combination(self, a, b, c, la, ls):
        a[[2, 4]] = np.sort(a[[2, 4]]); a[[3, 5]] = np.sort(a[[3, 5]])
        b[[2, 4]] = np.sort(b[[2, 4]]); b[[3, 5]] = np.sort(b[[3, 5]])
        c[[2, 4]] = np.sort(c[[2, 4]]); c[[3, 5]] = np.sort(c[[3, 5]])
        out = proximal_update(a, b, c, ProximalConfig(la, ls))
        stack = np.vstack([a, b, c])
        assert np.all(out >= stack.min(axis=0) - 1e-12) and np.all(out <= stack.max(axis=0) + 1e-12)

    def test_vector_roundtrip(self):
        p = Prompt((40.0, 30.0), (30.0, 20.0, 50.0, 45.0), 100.0)
        v = prompt_to_vector(p, (60, 80))
        assert v[0] == 0.5 and v[1] == 0.5
        back = vector_to_prompt(v, (60, 80))
        np.testing.assert_allclose(back.as_array(), p.as_array())
        assert back.image_diag == pytest.approx(100.0)


class TestJacobian:
    @pytest.mark.parametrize("h", [1e-5, 1e-4, 1e-3, 1e-2])
    def test_affine_exact(self, h, rng):
        a = rng.normal(size=(6, 6))
        b = rng.normal(size=6)
        est = estimate_jacobian(linear_loop(a, b), 0, rng.random(6), h)
        np.testing.assert_allclose(est.matrix, a, atol=1e-6)
        assert est.h == h and est.t == 0

    def test_constant(self):
        est = estimate_jacobian(lambda t, p: np.ones(6), 0, np.zeros(6))
        np.testing.assert_array_equal(est.matrix, 0)

    def test_quadratic(self):
        h = 1e-3
        est = estimate_jacobian(lambda t, p: p ** 2, 0, np.array([1.0]), h)
        assert est.matrix[0, 0] == pytest.approx(2.0, abs=10 * h * h)

    def test_failure_names_coordinate(self):
        def loop(t, p):
            if p[3] > 0.5:
                raise RuntimeError("off image")
            return p

        with pytest.raises(JacobianEvaluationError) as info:
            estimate_jacobian(loop, 0, np.full(6, 0.5), 1e-3)
        assert info.value.coordinate == 3 and info.value.sign == 1

    def test_bad_step(self):
        with pytest.raises(InvalidInputError):
            estimate_jacobian(lambda t, p: p, 0, np.zeros(2), 0.0)

    def test_nonfinite(self):
        with pytest.raises(NumericalFailure):
            estimate_jacobian(lambda t, p: np.full(2, np.inf), 0, np.ones(2), 1e-3)


class TestSpectral:
    def test_diagonal(self):
        assert spectral_radius(np.diag([0.9, 1.1, 0, 0, 0, 0])) == pytest.approx(1.1)

    def test_rotation_block(self):
        j = np.zeros((6, 6)); j[:2, :2] = [[0, 1], [-0.25, 0]]
        assert spectral_radius(j) == pytest.approx(0.5, abs=1e-12)

    def test_similarity_construction(self, rng):
        for _ in range(20):
            d = rng.uniform(-2, 2, 6)
            assert spectral_radius(constructed(rng, d)) == pytest.approx(np.abs(d).max(), abs=1e-6)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            spectral_radius(np.zeros((2, 3)))
        with pytest.raises(NumericalFailure):
            spectral_radius(np.array([[np.inf, 0], [0, 1]]))

    def test_regularized_examples(self):
        j, bound = regularized_jacobian(np.array([[1.0]]))
        assert bound == pytest.approx(1.3 / 1.7)
        assert round(bound, 2) == 0.76
        j, bound = regularized_jacobian(np.array([[1.2]]))
        assert spectral_radius(j) == pytest.approx(1.5 / 1.7)
        a = np.arange(36.0).reshape(6, 6)
        j, _ = regularized_jacobian(a, ProximalConfig(0, 0))
        np.testing.assert_array_equal(j, a)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 4.0), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
    def test_contraction_when_rho_at_least_one(self, seed, target, la, ls):
        r = np.random.default_rng(seed)
        j = r.normal(size=(6, 6))
        j *= target / spectral_radius(j)
        cfg = ProximalConfig(la, ls)
        j_reg, bound = regularized_jacobian(j, cfg)
        assert spectral_radius(j_reg) < spectral_radius(j)
        assert spectral_radius(j_reg) <= bound + 1e-8


class TestTrajectory:
    def test_geometric_growth(self):
        loop = linear_loop([[1.2]], [0.0])
        tr = simulate_trajectory(loop, [0.01], [0.0], 10)
        np.testing.assert_allclose(tr.errors, 0.01 * 1.2 ** np.arange(11), atol=1e-9)

    def test_regularized_rate(self):
        loop = linear_loop([[1.2]], [0.0])
        tr = simulate_trajectory(loop, [0.01], [0.0], 10, ProximalConfig(), anchor=[0.0])
        np.testing.assert_allclose(tr.errors, 0.01 * (1.5 / 1.7) ** np.arange(11), atol=1e-9)

    def test_gain_zero(self):
        p_star = np.full(6, 0.5)
        tr = simulate_trajectory(linear_loop(np.zeros((6, 6)), p_star), p_star + 0.1, p_star, 5)
        assert np.all(tr.errors[1:] == 0)

    def test_failure_truncates(self):
        def loop(t, p):
            if t == 3:
                raise RuntimeError("lost")
            return p * 2

        tr = simulate_trajectory(loop, [1.0], [0.0], 10)
        assert tr.failure_index == 3 and len(tr.errors) == 4 and "lost" in tr.failure

    def test_needs_targets(self):
        with pytest.raises(InvalidInputError):
            simulate_trajectory(linear_loop([[1.0]]), [0.0], [[0.0], [0.0]], 5)
        with pytest.raises(InvalidInputError):
            simulate_trajectory(linear_loop([[1.0]]), [0.0], [0.0], 0)

    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1))
    def test_stabilized_envelope(self, seed):
        r = np.random.default_rng(seed)
        a = r.normal(size=(6, 6)) * 0.5
        a = (a + a.T) / 2  # normal matrix: the step norm equals the radius
        p_star = np.array([0.5, 0.5, 0.3, 0.3, 0.7, 0.7])  # box well ordered
        loop = linear_loop(a, p_star - a @ p_star)
        cfg = ProximalConfig()
        rho = spectral_radius(regularized_jacobian(a, cfg)[0])
        tr = simulate_trajectory(loop, p_star + r.normal(size=6) * 0.01, p_star, 10, cfg, anchor=p_star)
        env = tr.errors[0] * max(1.0, rho) ** np.arange(11) * (1 + 1e-6)
        assert np.all(tr.errors <= env + 1e-15)
