"""Noise schedules, the forward kernel and unguided reverse steps.

Timesteps are 1-based: ``t = 1 .. T`` indexes ``betas[t - 1]``; ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    # Network timestep (0-based index into the training schedule) for each step.
    model_timesteps: np.ndarray
    kind: str = "linear"

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def model_t(self, t: int) -> int:
        return int(self.model_timesteps[t - 1])

    def to_record(self) -> dict:
        return {"kind": self.kind, "T": self.T, "betas": self.betas.tolist(), "model_timesteps": self.model_timesteps.tolist()}

    @classmethod
    def from_betas(cls, betas, kind: str = "custom", model_timesteps=None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        ts = np.arange(len(betas)) if model_timesteps is None else np.asarray(model_timesteps, dtype=np.int64)
        return cls(betas, np.cumprod(1.0 - betas), ts, kind)


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Linear betas in ``[1e-4, 0.02]`` rescaled by ``1000 / T``, or the squared-cosine schedule."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, min(0.02 * scale, 0.999), T)
    elif kind == "cosine":
        s = 0.008
        f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f(i + 1) / f(i), 0.999) for i in range(T)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected 'linear' or 'cosine'")
    return NoiseSchedule.from_betas(betas, kind)


def respace(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Evenly stride ``sched`` down to ``steps`` levels, keeping the cumulative products."""
    if not 2 <= steps <= sched.T:
        raise ValueError(f"cannot respace {sched.T} steps to {steps}")
    picks = np.array([round((k + 1) * sched.T / steps) for k in range(steps)])
    abar = sched.alpha_bars[picks - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    betas = 1.0 - abar / prev
    return NoiseSchedule(betas, abar, sched.model_timesteps[picks - 1], sched.kind)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Sample ``q(x_t | x_0)`` given an externally drawn standard normal ``noise``."""
    _check_shapes(x0, noise)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(noise)


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Clean-sample prediction implied by a noise estimate; never clamped."""
    _check_shapes(x_t, eps_hat)
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def display_x0(x0: np.ndarray) -> np.ndarray:
    return np.clip(x0, -1.0, 1.0)


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """Ancestral DDPM update ``x_t -> x_{t-1}``; the noise term vanishes at ``t = 1``."""
    beta = sched.beta(t)
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
    sigma = math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
    return mean + sigma * noise


def ddim_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    if not t_prev < t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x0 = predict_x0(x_t, eps_hat, t, sched)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise array")
        out = out + sigma * noise
    return out


def clip_eps(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule, bound: float) -> np.ndarray:
    """Noise estimate consistent with ``x_{0|t}`` clipped to ``[-bound, bound]``.

    Small relative errors in ``eps_hat`` are amplified by ``1 / sqrt(abar_t)`` at high noise
    levels; clipping the implied clean sample keeps learned-model trajectories in range.
    """
    ab = sched.alpha_bar(t)
    x0 = np.clip(predict_x0(x_t, eps_hat, t, sched), -bound, bound)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def reverse_step(
    x_t,
    eps_hat,
    t: int,
    sched: NoiseSchedule,
    noise,
    sampler: str = "ddim",
    eta: float = 0.0,
    clip_x0: float | None = None,
):
    """The unguided update ``r_t`` used by both samplers.

    With ``clip_x0`` set, the update goes through the clean prediction clipped to
    ``[-clip_x0, clip_x0]``.
    """
    if clip_x0 is not None:
        eps_hat = clip_eps(x_t, eps_hat, t, sched, clip_x0)
    if sampler == "ddpm":
        return ddpm_step(x_t, eps_hat, t, sched, noise)
    if sampler == "ddim":
        return ddim_step(x_t, eps_hat, t, t - 1, sched, eta, noise)
    raise ValueError(f"unknown sampler {sampler!r}")
