import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flashdistill.distill import DivergenceSpec
from flashdistill.oracle import (
    ExactRatioDisc,
    GaussianMixture,
    GaussianTeacher,
    LinearGenerator,
    ScriptedNoise,
    analytic_dmd_grad,
    bridge_grad,
    cubature_noise,
    diffused_log_density,
    diffused_score,
    mc_dmd_grad,
    oracle_convergence,
    quadrature_dmd_grad,
    single_node_batch,
)
from flashdistill.schedule import BaseSchedule

BASE = BaseSchedule()
TEACHER = GaussianTeacher(np.array([1.0, -2.0]), 1.0)


@pytest.mark.parametrize("mu,scale,t", [((0.0, 0.0), 1.0, 300), ((0.5, 0.3), 0.7, 50), ((-1.0, 2.0), 1.6, 900)])
def test_closed_form_agrees_with_monte_carlo(mu, scale, t):
    gen = LinearGenerator.create(mu, scale)
    mean, se = mc_dmd_grad(TEACHER, gen, t, BASE, n=400_000, seed=1)
    exact = analytic_dmd_grad(TEACHER, gen, t, BASE)
    assert np.all(np.abs(mean - exact) <= 4 * se + 1e-10)


@settings(max_examples=25, deadline=None)
@given(
    st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 3.0), st.integers(1, 1000),
)
def test_neural_path_matches_closed_form(m0, m1, scale, t):
    gen = LinearGenerator.create((m0, m1), scale)
    got = bridge_grad(TEACHER, gen, t, BASE)
    exact = analytic_dmd_grad(TEACHER, gen, t, BASE)
    assert np.abs(got - exact).max() <= 1e-6 * max(np.abs(exact).max(), 1e-12)


def test_quadrature_matches_closed_form_and_vectorises():
    gen = LinearGenerator.create((0.3, -0.4), 1.3)
    ts = np.array([20.0, 500.0, 980.0])
    rows = quadrature_dmd_grad(TEACHER, gen, ts, BASE)
    for t, row in zip(ts, rows):
        exact = analytic_dmd_grad(TEACHER, gen, t, BASE)
        assert np.abs(row - exact).max() <= 1e-9 * np.abs(exact).max()
        assert np.array_equal(quadrature_dmd_grad(TEACHER, gen, t, BASE), row)


def test_matched_generator_has_zero_gradient():
    gen = LinearGenerator.create(TEACHER.mu_star, 1.0)
    for kind in ("reverse_kl", "forward_kl", "js"):
        g = quadrature_dmd_grad(TEACHER, gen, 400, BASE, DivergenceSpec(kind, lambda_js=0.0), nodes=12)
        assert np.abs(g).max() <= 1e-12
    assert np.abs(analytic_dmd_grad(TEACHER, gen, 400, BASE)).max() == 0.0


def test_score_is_gradient_of_log_density():
    mix = GaussianMixture([0.3, 0.7], [[1.0, 0.0], [-1.0, 2.0]], 0.4)
    rng = np.random.default_rng(0)
    for model in (TEACHER, mix):
        for t in (10, 400, 990):
            x = rng.standard_normal(2)
            h = 1e-6
            fd = np.array([
                (diffused_log_density(model, x + h * e, t, BASE) - diffused_log_density(model, x - h * e, t, BASE)) / (2 * h)
                for e in np.eye(2)
            ])
            assert np.allclose(diffused_score(model, x, t, BASE), fd, rtol=1e-6, atol=1e-7)


def test_single_component_mixture_equals_gaussian():
    mix = GaussianMixture([1.0], [[1.0, -2.0]], 1.0)
    x = np.random.default_rng(1).standard_normal((5, 2))
    assert np.allclose(diffused_score(mix, x, 321, BASE), diffused_score(TEACHER, x, 321, BASE), atol=1e-13)
    assert np.allclose(diffused_log_density(mix, x, 321, BASE), diffused_log_density(TEACHER, x, 321, BASE), atol=1e-12)


def test_cubature_moments_exact():
    for d in (1, 2, 3):
        z, e = cubature_noise(d)
        joint = np.concatenate([z, e], axis=1)
        assert np.allclose(joint.mean(0), 0, atol=1e-15)
        assert np.allclose(joint.T @ joint / len(joint), np.eye(2 * d), atol=1e-14)


def test_scripted_noise_replays_then_exhausts():
    b = single_node_batch(np.zeros((2, 2)))
    s = ScriptedNoise([np.ones((2, 2))])
    assert torch.equal(s.normal_h(b.mask, 2), torch.ones(2, 1, 2, dtype=torch.float64))
    with pytest.raises(RuntimeError):
        s.normal_h(b.mask, 2)


def test_exact_ratio_disc_is_half_on_identical_laws():
    d = ExactRatioDisc(TEACHER, TEACHER, BASE)
    p = d.prob(single_node_batch(np.random.default_rng(0).standard_normal((4, 2))), 500)
    assert torch.allclose(p, torch.full((4,), 0.5, dtype=torch.float64), atol=1e-15)


def test_reverse_kl_descent_converges_to_teacher():
    final = oracle_convergence(TEACHER, LinearGenerator.create((0.0, 0.0), 1.5), iters=3000, lr=1e-2, base=BASE)
    assert np.linalg.norm(final.mu_g - TEACHER.mu_star) <= 1e-2
    assert abs(final.scale_g - 1.0) <= 1e-2


def test_forward_kl_descent_moves_toward_teacher():
    spec = DivergenceSpec("forward_kl", lambda_js=0.0)
    init = LinearGenerator.create((0.0, 0.0), 1.0)
    final = oracle_convergence(TEACHER, init, iters=300, lr=1e-2, base=BASE, spec=spec)
    assert np.linalg.norm(final.mu_g - TEACHER.mu_star) < np.linalg.norm(init.mu_g - TEACHER.mu_star)


def test_generator_validation():
    with pytest.raises(ValueError):
        LinearGenerator.create((0.0,), 0.0)
    with pytest.raises(ValueError):
        GaussianTeacher(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], 1.0)
