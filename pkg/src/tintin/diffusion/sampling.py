"""Unguided reverse sampling and the per-trajectory noise streams shared with guidance."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import Denoiser
from .schedule import NoiseSchedule, reverse_step


class NoiseStreams:
    """One independent generator per trajectory; draws are stacked along the batch axis.

    Trajectory ``i`` is seeded with ``seeds[i]``, so a sample is reproducible regardless of
    which batch it was generated in.
    """

    def __init__(self, seeds: Sequence[int]):
        self.seeds = [int(s) for s in seeds]
        self._rngs = [np.random.default_rng(s) for s in self.seeds]

    def __len__(self) -> int:
        return len(self._rngs)

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.stack([rng.standard_normal(shape) for rng in self._rngs])


class BatchNoise:
    """A single generator drawing whole batches; cheaper than :class:`NoiseStreams` for large
    Monte Carlo runs where per-trajectory reproducibility is not needed. Trajectories are
    labelled ``0 .. n - 1`` in traces."""

    def __init__(self, seed: int, n: int):
        self.seeds = list(range(n))
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.seeds)

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        return self._rng.standard_normal((len(self.seeds), *shape))


def check_finite(x: np.ndarray, what: str, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what} at t={t}")


def sample(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    seeds: Sequence[int],
    label=None,
    sampler: str = "ddim",
    eta: float = 0.0,
    clip_x0: float | None = None,
) -> np.ndarray:
    """Draw one sample per seed from ``x_T ~ N(0, I)`` down to ``x_0``.

    Each step consumes exactly one noise draw per trajectory, whether or not the update
    uses it; guided sampling follows the same order. ``clip_x0`` bounds the clean
    prediction inside each update (see :func:`clip_eps`).
    """
    streams = NoiseStreams(seeds)
    x = streams.normal(shape)
    for t in range(sched.T, 0, -1):
        eps = denoiser.predict(x, sched.model_t(t), label)
        noise = streams.normal(shape)
        x = reverse_step(x, eps, t, sched, noise, sampler, eta, clip_x0)
        check_finite(x, "sample", t)
    return x


def decode(x: np.ndarray) -> np.ndarray:
    """Model range ``[-1, 1]`` with layout ``(..., C, H, W)`` to ``(..., H, W, C)`` in ``[0, 1]`` (unclamped)."""
    return np.moveaxis((np.asarray(x) + 1.0) * 0.5, -3, -1)


def decode_vjp(g: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.asarray(g) * 0.5, -1, -3)


def to_display(x: np.ndarray) -> np.ndarray:
    return np.clip(decode(x), 0.0, 1.0)
