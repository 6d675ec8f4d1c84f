import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tintin.diffusion import BatchNoise, NoiseStreams, make_schedule, sample
from tintin.guidance import (
    GuidanceConfig,
    GuidanceConfigError,
    GuidanceError,
    GuidanceTrace,
    ZeroCondition,
    energy_step,
    guided_sample,
    step_size,
    step_sizes,
    time_travel,
)
from tintin.oracle import GmmDenoiser, GmmSpec, LinearCondition, NoGradGmmDenoiser

SCHED = make_schedule(100)
SPEC = GmmSpec([0.4, 0.6], [[-1.0, 0.5], [1.0, -0.3]], [np.eye(2) * 0.3, np.eye(2) * 0.5])
DEN = GmmDenoiser(SPEC, SCHED)


def test_color_and_edge_defaults():
    c = GuidanceConfig.color_defaults()
    assert (c.cz_low, c.cz_high, c.repetitions) == (40, 70, 20)
    e = GuidanceConfig.edge_defaults()
    assert (e.cz_low, e.cz_high, e.repetitions) == (90, 95, 50)
    assert c.travel_depth == 1 and c.step_policy == "normalized"


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(cz_low=50, cz_high=40),
        dict(cz_low=0, cz_high=10),
        dict(repetitions=0),
        dict(travel_depth=0),
        dict(step_policy="adaptive"),
        dict(grad_mode="full"),
        dict(step_scale=-1.0),
        dict(step_scale=float("nan")),
    ],
)
def test_invalid_config_rejected(kwargs):
    with pytest.raises(GuidanceConfigError):
        GuidanceConfig(**kwargs)


def test_zone_beyond_schedule_rejected():
    with pytest.raises(GuidanceConfigError, match="exceeds"):
        guided_sample(DEN, SCHED, GuidanceConfig(cz_low=90, cz_high=101), [0], (2,))
    with pytest.raises(GuidanceConfigError, match="travel_depth"):
        guided_sample(DEN, SCHED, GuidanceConfig(cz_low=90, cz_high=100, travel_depth=2), [0], (2,))


def test_through_denoiser_needs_vjp():
    with pytest.raises(GuidanceConfigError, match="vjp"):
        guided_sample(NoGradGmmDenoiser(SPEC, SCHED), SCHED, GuidanceConfig(), [0], (2,))
    # skip mode works without it
    guided_sample(NoGradGmmDenoiser(SPEC, SCHED), SCHED, GuidanceConfig(grad_mode="skip", repetitions=2), [0], (2,))


def test_step_size_examples():
    g = np.ones((4, 4))
    assert step_size("constant", 0.3, g, 10, SCHED) == 0.3
    assert step_size("constant", 0.3, 5 * g, 90, SCHED) == 0.3
    a0 = step_size("normalized", 0.3, np.zeros((4, 4)), 10, SCHED)
    assert math.isfinite(a0) and np.all(a0 * np.zeros((4, 4)) == 0)
    expected = 0.3 * math.sqrt(1 - SCHED.alpha_bar(10))
    assert step_size("normalized", 0.3, g, 10, SCHED) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 100), scale=st.floats(0.01, 10.0))
def test_normalized_update_norm_is_gradient_free(seed, t, scale):
    g = np.random.default_rng(seed).standard_normal((3, 5))
    a1 = step_size("normalized", scale, g, t, SCHED)
    a2 = step_size("normalized", scale, 2 * g, t, SCHED)
    assert a2 == pytest.approx(a1 / 2, rel=1e-9)
    assert np.linalg.norm(a1 * g) == pytest.approx(np.linalg.norm(a2 * 2 * g), rel=1e-9)
    batched = step_sizes("normalized", scale, np.stack([g, 2 * g]), t, SCHED)
    np.testing.assert_allclose(batched, [a1, a2], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 100.0))
def test_energy_step_differs_from_plain_update_by_alpha_g(seed, alpha):
    rng = np.random.default_rng(seed)
    r, g = rng.standard_normal((2, 3, 4))
    out = energy_step(r, g, alpha)
    assert np.array_equal(out, r - alpha * g)
    np.testing.assert_allclose(r - out, alpha * g, rtol=1e-12, atol=1e-12 * (1 + alpha))
    per_row = energy_step(r, g, np.array([alpha, 0.0, 2 * alpha]))
    assert np.array_equal(per_row[1], r[1])


def test_time_travel_depth_zero_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 2))
    assert np.array_equal(time_travel(x, 10, 0, SCHED, np.random.default_rng(1)), x)


def test_time_travel_past_T_raises():
    with pytest.raises(ValueError):
        time_travel(np.zeros((1, 2)), 99, 2, SCHED, np.random.default_rng(0))


def test_time_travel_variance_from_point_mass():
    t, j = 20, 5
    x = time_travel(np.zeros((100_000, 1)), t, j, SCHED, np.random.default_rng(0))
    expected = 1 - np.prod([1 - SCHED.beta(s) for s in range(t + 1, t + j + 1)])
    assert abs(x.var() / expected - 1) < 0.02


@pytest.mark.parametrize("t,j", [(5, 1), (40, 3), (90, 10)])
def test_time_travel_preserves_forward_marginal(t, j):
    n = 100_000
    x0 = 0.7
    rng = np.random.default_rng(t)
    ab_t = SCHED.alpha_bar(t)
    xt = math.sqrt(ab_t) * x0 + math.sqrt(1 - ab_t) * rng.standard_normal((n, 1))
    out = time_travel(xt, t, j, SCHED, rng)[:, 0]
    ab = SCHED.alpha_bar(t + j)
    mean, var = math.sqrt(ab) * x0, 1 - ab
    assert abs(out.mean() - mean) < 3 * math.sqrt(var / n)
    assert abs(out.var() - var) < 3 * var * math.sqrt(2 / (n - 1))


@pytest.mark.parametrize("sampler,eta", [("ddim", 0.0), ("ddpm", 0.0), ("ddim", 1.0)])
def test_zero_guidance_matches_unguided_bitwise(sampler, eta):
    seeds = [3, 11, 4]
    plain = sample(DEN, SCHED, (2,), seeds, sampler=sampler, eta=eta)
    cond = LinearCondition([[1.0, 0.0]], [1.0], 1.0)
    zero_scale = GuidanceConfig(cz_low=1, cz_high=100, repetitions=1, step_scale=0.0, sampler=sampler, eta=eta, condition=cond)
    assert np.array_equal(guided_sample(DEN, SCHED, zero_scale, seeds, (2,)).x, plain)
    empty = GuidanceConfig(cz_low=20, cz_high=60, repetitions=1, sampler=sampler, eta=eta, condition=ZeroCondition())
    assert np.array_equal(guided_sample(DEN, SCHED, empty, seeds, (2,)).x, plain)


def test_trajectories_do_not_depend_on_batch_composition():
    cfg = GuidanceConfig(cz_low=30, cz_high=50, repetitions=3, condition=LinearCondition([[1.0, 0.0]], [1.0], 0.5))
    both = guided_sample(DEN, SCHED, cfg, [7, 8], (2,)).x
    alone = guided_sample(DEN, SCHED, cfg, [8], (2,)).x
    assert np.array_equal(both[1], alone[0])


def test_trace_has_one_record_per_update_and_round_trips():
    cfg = GuidanceConfig(cz_low=10, cz_high=12, repetitions=4, condition=LinearCondition([[1.0, 0.0]], [1.0], 0.5))
    res = guided_sample(DEN, SCHED, cfg, [0, 1], (2,))
    assert len(res.trace.records) == 3 * 4 * 2
    ts = [r.t for r in res.trace.for_seed(0).records]
    assert ts == sorted(ts, reverse=True)
    assert GuidanceTrace.from_jsonl(res.trace.to_jsonl()) == res.trace
    assert guided_sample(DEN, SCHED, cfg, [0, 1], (2,)).trace == res.trace


def test_non_finite_loss_aborts_with_trace():
    calls = []

    def bad(x0):
        calls.append(1)
        v = np.full(len(x0), np.nan if len(calls) > 2 else 1.0)
        return v, np.ones_like(x0)

    cfg = GuidanceConfig(cz_low=50, cz_high=60, repetitions=2, condition=bad)
    with pytest.raises(GuidanceError) as info:
        guided_sample(DEN, SCHED, cfg, [0], (2,))
    assert len(info.value.trace.records) == 2


def test_descent_across_repetitions_on_convex_energy():
    spec = GmmSpec.gaussian([0.0], [[1.0]])
    cond = LinearCondition([[1.0]], [2.0], 1.0)
    cfg = GuidanceConfig(cz_low=40, cz_high=40, repetitions=6, step_policy="constant", step_scale=0.01, condition=cond)
    res = guided_sample(GmmDenoiser(spec, SCHED), SCHED, cfg, (), (1,), noise=BatchNoise(0, 4000))
    losses = np.zeros(6)
    for r in res.trace.records:
        losses[r.repetition] += r.loss
    assert np.all(np.diff(losses) <= 0), losses
