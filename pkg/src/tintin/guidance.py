"""Energy-guided reverse sampling with a conditioning zone and time-travel repetitions.

Inside the zone each step is ``x_{t-1} = r_t - alpha_t * grad_{x_t} L(x_{0|t}(x_t))`` where
``r_t`` is the unguided update. The step is repeated ``repetitions`` times per timestep; all
but the last repetition re-noise the committed state ``travel_depth`` levels and walk it back
down before trying again.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .diffusion.model import Denoiser
from .diffusion.sampling import BatchNoise, NoiseStreams, check_finite, decode, decode_vjp, to_display
from .diffusion.schedule import NoiseSchedule, predict_x0, reverse_step
from .edges import EDGE_THRESHOLD, EdgeMap, edges_with_vjp, soft_threshold_values
from .losses import ColorLossConfig, loss_color, loss_iou
from .palette import SpatialPalette

POLICIES = ("normalized", "constant")
GRAD_MODES = ("through_denoiser", "skip")


class GuidanceConfigError(ValueError):
    pass


class GuidanceError(FloatingPointError):
    """Guided sampling produced a non-finite loss or gradient; ``trace`` holds the records so far."""

    def __init__(self, msg: str, trace: "GuidanceTrace"):
        super().__init__(msg)
        self.trace = trace


class Condition(Protocol):
    """Maps a batch of clean predictions to per-sample losses and their gradients."""

    def __call__(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class ZeroCondition:
    def __call__(self, x0):
        return np.zeros(len(x0)), np.zeros_like(x0)


@dataclass
class ColorCondition:
    """Colour loss between the decoded prediction and a spatial palette of matching size."""

    spatial: SpatialPalette
    loss_cfg: ColorLossConfig = field(default_factory=ColorLossConfig)

    def __call__(self, x0):
        rgb = decode(x0)
        values = np.empty(len(x0))
        grads = np.empty_like(rgb)
        for i, img in enumerate(rgb):
            values[i], grads[i] = loss_color(img, self.spatial, self.loss_cfg)
        return values, decode_vjp(grads)


@dataclass
class EdgeCondition:
    """``1 - softIoU`` between soft-thresholded edges of the prediction and a reference map."""

    reference: EdgeMap
    tau: float = EDGE_THRESHOLD
    temp: float = 0.01
    smooth_sigma: float = 1.0

    def __call__(self, x0):
        rgb = decode(x0)
        values = np.empty(len(x0))
        grads = np.empty_like(rgb)
        for i, img in enumerate(rgb):
            raw, vjp = edges_with_vjp(img, self.smooth_sigma)
            soft, dsoft = soft_threshold_values(raw, self.tau, self.temp)
            if not np.any(soft) and not np.any(self.reference.values):
                values[i], grads[i] = 1.0, 0.0
                continue
            values[i], g_edges = loss_iou(soft, self.reference)
            grads[i] = vjp(g_edges * dsoft)
        return values, decode_vjp(grads)


@dataclass(frozen=True)
class GuidanceConfig:
    cz_low: int = 40
    cz_high: int = 70
    repetitions: int = 20
    travel_depth: int = 1
    step_policy: str = "normalized"
    step_scale: float = 0.2
    grad_mode: str = "through_denoiser"
    sampler: str = "ddim"
    eta: float = 0.0
    clip_x0: float | None = None
    condition: Condition | None = None

    def __post_init__(self):
        if self.cz_low > self.cz_high:
            raise GuidanceConfigError(f"empty conditioning zone [{self.cz_low}, {self.cz_high}]")
        if self.cz_low < 1:
            raise GuidanceConfigError(f"cz_low must be >= 1, got {self.cz_low}")
        if self.repetitions < 1:
            raise GuidanceConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.travel_depth < 1:
            raise GuidanceConfigError(f"travel_depth must be >= 1, got {self.travel_depth}")
        if self.step_policy not in POLICIES:
            raise GuidanceConfigError(f"step_policy must be one of {POLICIES}, got {self.step_policy!r}")
        if self.grad_mode not in GRAD_MODES:
            raise GuidanceConfigError(f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}")
        if self.clip_x0 is not None and not self.clip_x0 > 0:
            raise GuidanceConfigError(f"clip_x0 must be positive, got {self.clip_x0}")
        if not self.step_scale >= 0 or not math.isfinite(self.step_scale):
            raise GuidanceConfigError(f"step_scale must be a finite non-negative number, got {self.step_scale}")

    @classmethod
    def color_defaults(cls, **overrides) -> "GuidanceConfig":
        """Mid-trajectory zone for colour control; the scale was tuned on the toy model."""
        return cls(**{"cz_low": 40, "cz_high": 70, "repetitions": 20, "step_scale": 0.2, **overrides})

    @classmethod
    def edge_defaults(cls, **overrides) -> "GuidanceConfig":
        """Early zone for layout (edge) control."""
        return cls(**{"cz_low": 90, "cz_high": 95, "repetitions": 50, "step_scale": 0.2, **overrides})

    def in_zone(self, t: int) -> bool:
        return self.cz_low <= t <= self.cz_high

    def validate_for(self, sched: NoiseSchedule, denoiser: Denoiser) -> None:
        if self.cz_high > sched.T:
            raise GuidanceConfigError(f"cz_high={self.cz_high} exceeds the schedule length T={sched.T}")
        if self.repetitions > 1 and self.cz_high - 1 + self.travel_depth > sched.T:
            raise GuidanceConfigError(
                f"travel_depth={self.travel_depth} from t={self.cz_high - 1} would pass T={sched.T}"
            )
        if self.grad_mode == "through_denoiser" and not getattr(denoiser, "supports_grad", False):
            raise GuidanceConfigError("grad_mode='through_denoiser' needs a denoiser with vjp support")

    def to_record(self) -> dict:
        rec = asdict(replace(self, condition=None))
        rec["condition"] = type(self.condition).__name__ if self.condition is not None else None
        return rec


@dataclass(frozen=True)
class TraceRecord:
    seed: int
    t: int
    repetition: int
    loss: float
    grad_norm: float
    step_size: float


@dataclass
class GuidanceTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def for_seed(self, seed: int) -> "GuidanceTrace":
        return GuidanceTrace([r for r in self.records if r.seed == seed])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "GuidanceTrace":
        return cls([TraceRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


@dataclass
class GuidedResult:
    x: np.ndarray
    trace: GuidanceTrace

    @property
    def images(self) -> np.ndarray:
        return to_display(self.x)


def step_size(policy: str, scale: float, grad: np.ndarray, t: int, sched: NoiseSchedule) -> float:
    """Guidance learning rate for one trajectory.

    ``constant`` returns ``scale``. ``normalized`` returns
    ``scale * sqrt(1 - abar_t) / (rms(grad) + 1e-12)`` so that the update has RMS
    ``scale * sqrt(1 - abar_t)`` whatever the gradient magnitude.
    """
    if policy == "constant":
        return float(scale)
    if policy == "normalized":
        rms = float(np.sqrt(np.mean(np.square(grad))))
        return float(scale) * math.sqrt(1.0 - sched.alpha_bar(t)) / (rms + 1e-12)
    raise ValueError(f"unknown step policy {policy!r}")


def step_sizes(policy: str, scale: float, grads: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Batched :func:`step_size`; one learning rate per leading-axis row of ``grads``."""
    if policy == "constant":
        return np.full(len(grads), float(scale))
    if policy == "normalized":
        rms = np.sqrt(np.mean(np.square(grads.reshape(len(grads), -1)), axis=1))
        return float(scale) * math.sqrt(1.0 - sched.alpha_bar(t)) / (rms + 1e-12)
    raise ValueError(f"unknown step policy {policy!r}")


def time_travel(x: np.ndarray, t: int, depth: int, sched: NoiseSchedule, noise_source) -> np.ndarray:
    """Re-noise ``x`` from level ``t`` to ``t + depth`` one forward kernel at a time.

    ``noise_source`` is either a :class:`NoiseStreams` (batched, one stream per row) or a
    numpy ``Generator``.
    """
    if depth < 0 or t + depth > sched.T:
        raise ValueError(f"cannot travel from t={t} by {depth} steps with T={sched.T}")
    for s in range(t + 1, t + depth + 1):
        if isinstance(noise_source, (NoiseStreams, BatchNoise)):
            xi = noise_source.normal(x.shape[1:])
        else:
            xi = noise_source.standard_normal(x.shape)
        beta = sched.beta(s)
        x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * xi
    return x


def energy_step(r_t: np.ndarray, grad: np.ndarray, alpha) -> np.ndarray:
    """Guided update ``r_t - alpha * grad``; ``alpha`` may be per-trajectory."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return r_t - alpha.reshape(alpha.shape + (1,) * (grad.ndim - alpha.ndim)) * grad


def _x0_vjp(denoiser: Denoiser, x, t: int, sched: NoiseSchedule, g_x0, label, grad_mode: str):
    ab = sched.alpha_bar(t)
    if grad_mode == "skip":
        return g_x0 / math.sqrt(ab)
    jt = denoiser.vjp(x, sched.model_t(t), g_x0, label)
    return (g_x0 - math.sqrt(1.0 - ab) * jt) / math.sqrt(ab)


def guided_sample(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    seeds: Sequence[int],
    shape: tuple[int, ...],
    label=None,
    progress: Callable[[int], None] | None = None,
    noise: NoiseStreams | BatchNoise | None = None,
    record_trace: bool = True,
) -> GuidedResult:
    """Run one guided trajectory per seed and return the final states and the update trace.

    Noise draws follow :func:`tintin.diffusion.sample`: ``x_T`` first, then one draw per
    reverse step, then (between repetitions) one draw per travel level. With a single
    repetition and a zero update the result matches unguided sampling bit for bit.
    ``noise`` overrides the per-seed streams (``seeds`` is then ignored); ``record_trace=False``
    skips the per-update records for large Monte Carlo runs.
    """
    cfg.validate_for(sched, denoiser)
    condition = cfg.condition if cfg.condition is not None else ZeroCondition()
    streams = noise if noise is not None else NoiseStreams(seeds)
    trace = GuidanceTrace()
    x = streams.normal(shape)

    def plain_step(x, t):
        eps = denoiser.predict(x, sched.model_t(t), label)
        out = reverse_step(x, eps, t, sched, streams.normal(shape), cfg.sampler, cfg.eta, cfg.clip_x0)
        check_finite(out, "sample", t)
        return out

    for t in range(sched.T, 0, -1):
        if progress is not None:
            progress(t)
        if not cfg.in_zone(t):
            x = plain_step(x, t)
            continue
        for rep in range(cfg.repetitions):
            eps = denoiser.predict(x, sched.model_t(t), label)
            r_t = reverse_step(x, eps, t, sched, streams.normal(shape), cfg.sampler, cfg.eta, cfg.clip_x0)
            x0 = predict_x0(x, eps, t, sched)
            values, g_x0 = condition(x0)
            if not (np.all(np.isfinite(values)) and np.all(np.isfinite(g_x0))):
                raise GuidanceError(f"non-finite condition loss or gradient at t={t}, repetition {rep}", trace)
            g = _x0_vjp(denoiser, x, t, sched, g_x0, label, cfg.grad_mode)
            if not np.all(np.isfinite(g)):
                raise GuidanceError(f"non-finite guidance gradient at t={t}, repetition {rep}", trace)
            alphas = step_sizes(cfg.step_policy, cfg.step_scale, g, t, sched)
            if record_trace:
                norms = np.sqrt(np.sum(np.square(g.reshape(len(g), -1)), axis=1))
                for i, seed in enumerate(streams.seeds):
                    trace.records.append(
                        TraceRecord(seed, t, rep, float(values[i]), float(norms[i]), float(alphas[i]))
                    )
            x = energy_step(r_t, g, alphas)
            check_finite(x, "guided sample", t)
            if rep < cfg.repetitions - 1:
                x = time_travel(x, t - 1, cfg.travel_depth, sched, streams)
                for s in range(t - 1 + cfg.travel_depth, t, -1):
                    x = plain_step(x, s)
    return GuidedResult(x, trace)
