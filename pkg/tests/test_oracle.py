import math

import numpy as np
import pytest
from helpers import central_diff, rel_err

from tintin.diffusion import make_schedule, predict_x0
from tintin.guidance import GuidanceConfig
from tintin.oracle import (
    GmmDenoiser,
    GmmSpec,
    LinearCondition,
    exact_conditional_posterior,
    gmm_log_density,
    gmm_score,
    pairwise_mean,
    run_guided_oracle,
)

SCHED = make_schedule(100)


def _two_component():
    return GmmSpec(
        [0.3, 0.7],
        [[-1.0, 0.5], [1.5, -0.5]],
        [[[0.5, 0.1], [0.1, 0.3]], [[0.2, -0.05], [-0.05, 0.4]]],
    )


@pytest.mark.parametrize("t", [1, 30, 100])
def test_standard_gaussian_score_is_minus_x(t):
    spec = GmmSpec.gaussian([0.0, 0.0], np.eye(2))
    x = np.array([0.3, -1.7])
    score, eps = gmm_score(spec, x, t, SCHED)
    np.testing.assert_allclose(score, -x, rtol=1e-12)
    np.testing.assert_allclose(eps, math.sqrt(1 - SCHED.alpha_bar(t)) * x, rtol=1e-12)


def test_single_gaussian_score_formula_and_fd():
    spec = GmmSpec.gaussian([1.5], [[0.3]])
    t = 40
    ab = SCHED.alpha_bar(t)
    x = np.array([0.7])
    score, _ = gmm_score(spec, x, t, SCHED)
    expected = -(x - math.sqrt(ab) * 1.5) / (ab * 0.3 + 1 - ab)
    np.testing.assert_allclose(score, expected, rtol=1e-12)
    fd = central_diff(lambda z: float(gmm_log_density(spec, z, t, SCHED)), x)
    assert rel_err(score, fd) < 1e-6


@pytest.mark.parametrize("t", [1, 10, 50, 90])
def test_mixture_score_matches_fd(t):
    spec = _two_component()
    rng = np.random.default_rng(t)
    for x in rng.standard_normal((5, 2)):
        score, _ = gmm_score(spec, x, t, SCHED)
        fd = central_diff(lambda z: float(gmm_log_density(spec, z, t, SCHED)), x)
        assert rel_err(score, fd) < 1e-6


def test_denoiser_vjp_matches_fd():
    spec = _two_component()
    den = GmmDenoiser(spec, SCHED)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2))
    v = rng.standard_normal((3, 2))
    t = SCHED.model_t(20)
    got = den.vjp(x, t, v)
    fd = central_diff(lambda z: float(np.sum(v * den.predict(z, t))), x)
    assert rel_err(got, fd) < 1e-6


def test_optimal_eps_gives_posterior_mean():
    spec = GmmSpec.gaussian([0.4, -0.2], [[0.5, 0.2], [0.2, 0.8]])
    t = 35
    ab = SCHED.alpha_bar(t)
    x = np.array([0.9, 0.1])
    _, eps = gmm_score(spec, x, t, SCHED)
    # E[x0 | xt] for a Gaussian prior: mu + S sqrt(ab) C^-1 (xt - sqrt(ab) mu)
    C = ab * spec.covariances[0] + (1 - ab) * np.eye(2)
    mu = spec.means[0]
    expected = mu + spec.covariances[0] @ (math.sqrt(ab) * np.linalg.solve(C, x - math.sqrt(ab) * mu))
    np.testing.assert_allclose(predict_x0(x, eps, t, SCHED), expected, atol=1e-10)


def test_conjugate_posterior_hand_case():
    post = exact_conditional_posterior(GmmSpec.gaussian([0.0], [[1.0]]), LinearCondition([[1.0]], [1.0], 1.0))
    assert post.mean()[0] == pytest.approx(0.5)
    assert post.covariance()[0, 0] == pytest.approx(0.5)


def test_uninformative_and_exact_observation_limits():
    prior = _two_component()
    loose = exact_conditional_posterior(prior, LinearCondition(np.eye(2), [3.0, 3.0], 1e6))
    np.testing.assert_allclose(loose.mean(), prior.mean(), atol=1e-4)
    np.testing.assert_allclose(loose.covariance(), prior.covariance(), atol=1e-4)
    tight = exact_conditional_posterior(prior, LinearCondition(np.eye(2), [0.2, 0.1], 1e-4))
    np.testing.assert_allclose(tight.mean(), [0.2, 0.1], atol=1e-4)
    assert abs(tight.weights.sum() - 1) < 1e-12


def test_spec_validation():
    with pytest.raises(ValueError):
        GmmSpec([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(ValueError):
        GmmSpec.gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        LinearCondition([[1.0, 1.0], [2.0, 2.0]], [0.0, 0.0], 1.0)


def test_pairwise_mean_order_insensitive():
    x = np.random.default_rng(0).standard_normal((1001, 3))
    perm = np.random.default_rng(1).permutation(1001)
    assert np.max(np.abs(pairwise_mean(x) - pairwise_mean(x[perm]))) < 1e-12
    np.testing.assert_allclose(pairwise_mean(x), x.mean(axis=0), atol=1e-14)


def test_zero_scale_reproduces_unconditional_mixture():
    spec = _two_component()
    cond = LinearCondition(np.eye(2)[:1], [1.0], 1.0)
    cfg = GuidanceConfig(cz_low=1, cz_high=1000, repetitions=1, step_policy="constant", step_scale=0.0, sampler="ddpm")
    stats = run_guided_oracle(spec, cond, cfg, 4000, seed=3)
    assert np.all(stats.mean_standard_errors() < 3)


def test_grad_modes_differ_and_gap_is_reported():
    spec = GmmSpec.gaussian([0.0], [[1.0]])
    cond = LinearCondition([[1.0]], [1.0], 1.0)
    base = dict(cz_low=1, cz_high=1000, repetitions=1, step_policy="constant", step_scale=0.002, sampler="ddpm")
    through = run_guided_oracle(spec, cond, GuidanceConfig(**base), 1000, seed=5)
    skip = run_guided_oracle(spec, cond, GuidanceConfig(**base, grad_mode="skip"), 1000, seed=5)
    assert not np.array_equal(through.mean, skip.mean)
    assert "mean_error" in through.to_record()
