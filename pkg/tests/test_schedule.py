import math

import numpy as np
import pytest

from tintin.diffusion import (
    NoiseSchedule,
    clip_eps,
    ddim_step,
    ddpm_step,
    display_x0,
    forward_noise,
    make_schedule,
    predict_x0,
    respace,
    reverse_step,
)
from tintin.oracle import GmmDenoiser, GmmSpec


def _custom(abar_t: float) -> NoiseSchedule:
    """Two-step schedule with alpha_bar(1) == abar_t."""
    return NoiseSchedule.from_betas([1.0 - abar_t, 0.5])


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = make_schedule(100, kind)
    assert s.T == 100
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 0.01


def test_linear_1000_terminal_alpha_bar():
    s = make_schedule(1000)
    assert float(np.prod(1 - s.betas)) == pytest.approx(s.alpha_bar(1000))
    assert s.alpha_bar(1000) < 5e-5


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(1)
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")


def test_respace_keeps_cumulative_products():
    base = make_schedule(1000)
    s = respace(base, 100)
    assert s.T == 100
    np.testing.assert_allclose(s.alpha_bars, base.alpha_bars[9::10], rtol=1e-12)
    np.testing.assert_allclose(np.cumprod(1 - s.betas), s.alpha_bars, rtol=1e-10)
    assert s.model_t(100) == 999 and s.model_t(1) == 9


def test_forward_noise_hand_value():
    s = _custom(0.25)
    assert forward_noise(np.array(1.0), 1, np.array(0.5), s) == pytest.approx(0.5 + math.sqrt(0.75) * 0.5)
    assert forward_noise(np.array(1.0), 1, np.array(0.5), s) == pytest.approx(0.9330, abs=1e-4)


def test_forward_noise_identity_at_zero():
    x0 = np.arange(4.0)
    np.testing.assert_array_equal(forward_noise(x0, 0, np.ones(4), make_schedule(10)), x0)


def test_forward_noise_shape_mismatch():
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 1, np.zeros(4), make_schedule(10))


def test_forward_noise_variance_monte_carlo():
    s = make_schedule(100)
    t = 30
    noise = np.random.default_rng(0).standard_normal(100_000)
    xt = forward_noise(np.full(100_000, 0.7), t, noise, s)
    assert abs(xt.var() / (1 - s.alpha_bar(t)) - 1) < 0.02


def test_predict_x0_inverts_forward():
    s = make_schedule(100)
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((2, 50))
    for t in (1, 10, 50, 100):
        # relative, since 1/sqrt(abar) amplifies round-off at large t
        err = np.max(np.abs(predict_x0(forward_noise(x0, t, eps, s), eps, t, s) - x0))
        assert err < 1e-12 / math.sqrt(s.alpha_bar(t))


def test_predict_x0_hand_value():
    assert predict_x0(np.array(1.0), np.array(0.5), 1, _custom(0.25)) == pytest.approx(
        (1 - math.sqrt(0.75) * 0.5) / 0.5
    )
    assert predict_x0(np.array(1.0), np.array(0.5), 1, _custom(0.25)) == pytest.approx(1.1340, abs=1e-4)
    x = np.array([3.0])
    np.testing.assert_array_equal(predict_x0(x, np.array([1.0]), 0, make_schedule(10)), x)
    np.testing.assert_array_equal(display_x0(np.array([-3.0, 0.2, 2.0])), [-1.0, 0.2, 1.0])


def test_ddpm_last_step_is_deterministic():
    s = make_schedule(10)
    x, eps = np.ones(3), np.full(3, 0.2)
    a = ddpm_step(x, eps, 1, s, np.zeros(3))
    b = ddpm_step(x, eps, 1, s, np.full(3, 5.0))
    np.testing.assert_array_equal(a, b)


def test_ddpm_small_beta_limit():
    s = NoiseSchedule.from_betas([1e-12, 0.3])
    x = np.array([0.3, -1.2])
    np.testing.assert_allclose(ddpm_step(x, np.array([0.5, 0.1]), 1, s, np.zeros(2)), x, atol=1e-5)


def test_ddim_collapses_to_predict_x0():
    s = make_schedule(10)
    rng = np.random.default_rng(2)
    x, eps = rng.standard_normal((2, 5))
    np.testing.assert_allclose(ddim_step(x, eps, 4, 0, s), predict_x0(x, eps, 4, s), rtol=1e-12)
    with pytest.raises(ValueError):
        ddim_step(x, eps, 3, 3, s)


def test_ddim_eta_one_equals_ddpm():
    s = make_schedule(20)
    rng = np.random.default_rng(3)
    x, eps, z = rng.standard_normal((3, 6))
    np.testing.assert_allclose(ddim_step(x, eps, 7, 6, s, 1.0, z), ddpm_step(x, eps, 7, s, z), rtol=1e-10, atol=1e-12)


def _run_chain(spec, sched, n, seed, sampler, record=None):
    den = GmmDenoiser(spec, sched)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, spec.dim))
    for t in range(sched.T, 0, -1):
        eps = den.predict(x, sched.model_t(t))
        z = rng.standard_normal(x.shape)
        x = ddpm_step(x, eps, t, sched, z) if sampler == "ddpm" else ddim_step(x, eps, t, t - 1, sched)
        if record is not None:
            record[t - 1] = x.copy()
    return x


def test_ddpm_with_exact_eps_matches_data_distribution():
    spec = GmmSpec.gaussian([2.0], [[0.25]])
    n = 10_000
    x = _run_chain(spec, make_schedule(1000), n, 0, "ddpm")[:, 0]
    se_mean = math.sqrt(0.25 / n)
    se_var = 0.25 * math.sqrt(2 / (n - 1))
    assert abs(x.mean() - 2.0) < 3 * se_mean
    assert abs(x.var() - 0.25) < 3 * se_var


def test_ddim_deterministic_and_marginals():
    spec = GmmSpec.gaussian([1.0], [[0.5]])
    sched = make_schedule(1000)
    n = 10_000
    rec = {}
    a = _run_chain(spec, sched, n, 4, "ddim", rec)
    b = _run_chain(spec, sched, n, 4, "ddim")
    np.testing.assert_array_equal(a, b)
    for t in (0, 100, 400, 800):
        x = a[:, 0] if t == 0 else rec[t][:, 0]
        ab = sched.alpha_bar(t)
        mean, var = math.sqrt(ab) * 1.0, ab * 0.5 + 1 - ab
        assert abs(x.mean() - mean) < 3 * math.sqrt(var / n)
        assert abs(x.var() - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_clip_eps_is_identity_inside_bound_and_clips_outside():
    sched = make_schedule(100)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-0.9, 0.9, size=(2, 3, 4, 4))
    noise = rng.standard_normal(x0.shape)
    xt = forward_noise(x0, 50, noise, sched)
    np.testing.assert_allclose(clip_eps(xt, noise, 50, sched, 1.0), noise, atol=1e-10)
    big = forward_noise(3 * x0, 50, noise, sched)
    x0c = predict_x0(big, clip_eps(big, noise, 50, sched, 1.0), 50, sched)
    np.testing.assert_allclose(x0c, np.clip(3 * x0, -1, 1), atol=1e-10)


def test_reverse_step_with_clip_uses_clipped_prediction():
    sched = make_schedule(100)
    rng = np.random.default_rng(1)
    xt, eps, noise = rng.standard_normal((3, 5))
    for sampler in ("ddpm", "ddim"):
        got = reverse_step(xt, eps, 80, sched, noise, sampler, clip_x0=1.0)
        want = reverse_step(xt, clip_eps(xt, eps, 80, sched, 1.0), 80, sched, noise, sampler)
        np.testing.assert_array_equal(got, want)
