"""Gaussian-mixture diffusion oracle.

For data ``x_0 ~ sum_k w_k N(mu_k, S_k)`` the noised marginal at level ``t`` is the mixture of
``N(sqrt(abar) mu_k, abar S_k + (1 - abar) I)``, so the score, the optimal noise prediction
and its Jacobian are all closed form. Linear-Gaussian observations give exact posteriors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion.sampling import BatchNoise
from .diffusion.schedule import NoiseSchedule, make_schedule
from .guidance import GuidanceConfig, guided_sample


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray  # K x d
    covariances: np.ndarray  # K x d x d

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64).reshape(len(w), -1)
        cov = np.asarray(self.covariances, dtype=np.float64).reshape(len(w), mu.shape[1], mu.shape[1])
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        for k, c in enumerate(cov):
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError(f"covariance {k} is not symmetric positive-definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        dev = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum("k,ki,kj->ij", self.weights, dev, dev)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(len(self.weights), size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        z = rng.standard_normal((n, self.dim))
        return self.means[ks] + np.einsum("nij,nj->ni", chol[ks], z)

    @classmethod
    def gaussian(cls, mean, cov) -> "GmmSpec":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        return cls(np.ones(1), mean[None], cov[None])


@dataclass(frozen=True)
class LinearCondition:
    """Observation ``y = A x_0 + n`` with ``n ~ N(0, sigma^2 I)``; energy ``||A x_0 - y||^2 / (2 sigma^2)``."""

    A: np.ndarray
    y: np.ndarray
    sigma: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if A.shape[0] != len(y) or np.linalg.matrix_rank(A) < A.shape[0]:
            raise ValueError("A must have full row rank and match y")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y", y)

    def __call__(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        resid = x0 @ self.A.T - self.y
        values = 0.5 * np.sum(resid * resid, axis=-1) / self.sigma**2
        return values, resid @ self.A / self.sigma**2


def _noised_components(spec: GmmSpec, abar: float):
    means = math.sqrt(abar) * spec.means
    covs = abar * spec.covariances + (1.0 - abar) * np.eye(spec.dim)
    return means, covs


def _score_parts(spec: GmmSpec, x: np.ndarray, abar: float):
    """Responsibilities, per-component scores and precisions for a batch ``x`` of shape (B, d)."""
    means, covs = _noised_components(spec, abar)
    prec = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    diff = x[:, None, :] - means[None]
    comp_scores = -np.einsum("kij,bkj->bki", prec, diff)
    maha = -np.einsum("bki,bki->bk", diff, comp_scores)
    logp = np.log(spec.weights)[None] - 0.5 * (maha + logdet[None] + spec.dim * math.log(2 * math.pi))
    top = logp.max(axis=1, keepdims=True)
    resp = np.exp(logp - top)
    lse = top[:, 0] + np.log(resp.sum(axis=1))
    resp /= resp.sum(axis=1, keepdims=True)
    return resp, comp_scores, prec, lse


def gmm_log_density(spec: GmmSpec, x: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lse = _score_parts(spec, x2, sched.alpha_bar(t))[3]
    return lse if np.ndim(x) > 1 else lse[0]


def gmm_score(spec: GmmSpec, x: np.ndarray, t: int, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Exact score of the noised mixture at level ``t`` and the implied optimal noise ``eps*``."""
    abar = sched.alpha_bar(t)
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    resp, comp_scores, _, _ = _score_parts(spec, x2, abar)
    score = np.einsum("bk,bki->bi", resp, comp_scores)
    eps = -math.sqrt(1.0 - abar) * score
    if np.ndim(x) == 1:
        return score[0], eps[0]
    return score, eps


def gmm_score_jacobian(spec: GmmSpec, x: np.ndarray, abar: float) -> np.ndarray:
    """``d score / d x`` for a batch, shape (B, d, d); symmetric."""
    resp, comp_scores, prec, _ = _score_parts(spec, np.atleast_2d(x), abar)
    score = np.einsum("bk,bki->bi", resp, comp_scores)
    outer = np.einsum("bki,bkj->bkij", comp_scores, comp_scores)
    jac = np.einsum("bk,bkij->bij", resp, outer - prec[None])
    return jac - np.einsum("bi,bj->bij", score, score)


class GmmDenoiser:
    """Exact posterior-mean noise predictor for a Gaussian mixture.

    Network timesteps are resolved through ``sched.model_timesteps``; the Jacobian used by
    ``vjp`` is analytic.
    """

    supports_grad = True

    def __init__(self, spec: GmmSpec, sched: NoiseSchedule):
        self.spec = spec
        self._abar = {int(m): float(a) for m, a in zip(sched.model_timesteps, sched.alpha_bars)}

    def predict(self, x, t, label=None):
        abar = self._abar[int(t)]
        resp, comp_scores, _, _ = _score_parts(self.spec, x, abar)
        return -math.sqrt(1.0 - abar) * np.einsum("bk,bki->bi", resp, comp_scores)

    def vjp(self, x, t, v, label=None):
        abar = self._abar[int(t)]
        jac = gmm_score_jacobian(self.spec, x, abar)
        return -math.sqrt(1.0 - abar) * np.einsum("bij,bj->bi", jac, v)


class NoGradGmmDenoiser(GmmDenoiser):
    supports_grad = False


def exact_conditional_posterior(spec: GmmSpec, cond: LinearCondition) -> GmmSpec:
    """Conjugate update of every component; weights reweighted by marginal likelihood of ``y``."""
    A, y, s2 = cond.A, cond.y, cond.sigma**2
    means, covs, logw = [], [], []
    for w, mu, cov in zip(spec.weights, spec.means, spec.covariances):
        prec = np.linalg.inv(cov) + A.T @ A / s2
        post_cov = np.linalg.inv(prec)
        post_cov = 0.5 * (post_cov + post_cov.T)
        means.append(post_cov @ (np.linalg.solve(cov, mu) + A.T @ y / s2))
        covs.append(post_cov)
        pred_cov = A @ cov @ A.T + s2 * np.eye(len(y))
        r = y - A @ mu
        _, logdet = np.linalg.slogdet(pred_cov)
        logw.append(math.log(w) - 0.5 * (r @ np.linalg.solve(pred_cov, r) + logdet))
    logw = np.array(logw)
    weights = np.exp(logw - logw.max())
    return GmmSpec(weights / weights.sum(), np.array(means), np.array(covs))


def pairwise_mean(x: np.ndarray) -> np.ndarray:
    """Column means by pairwise summation so the result does not depend on the chunking of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    while len(x) > 1:
        if len(x) % 2:
            x = np.concatenate([x[:-2], (x[-2] + x[-1])[None]])
        x = x[0::2] + x[1::2]
    return x[0] / n


@dataclass
class OracleStats:
    mean: np.ndarray
    cov: np.ndarray
    expected_mean: np.ndarray
    expected_cov: np.ndarray
    n: int
    extra: dict = field(default_factory=dict)

    @property
    def mean_error(self) -> float:
        return float(np.linalg.norm(self.mean - self.expected_mean))

    @property
    def cov_error(self) -> float:
        return float(np.linalg.norm(self.cov - self.expected_cov))

    def mean_standard_errors(self) -> np.ndarray:
        """Per-coordinate |empirical - expected| mean in units of the expected standard error."""
        se = np.sqrt(np.diag(self.expected_cov) / self.n)
        return np.abs(self.mean - self.expected_mean) / se

    def to_record(self) -> dict:
        return {
            "n": self.n,
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "expected_mean": self.expected_mean.tolist(),
            "expected_cov": self.expected_cov.tolist(),
            "mean_error": self.mean_error,
            "cov_error": self.cov_error,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def sample_stats(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pairwise_mean(samples)
    dev = samples - mean
    cov = pairwise_mean(np.einsum("ni,nj->nij", dev, dev))
    return mean, cov


def run_guided_oracle(
    spec: GmmSpec,
    cond: LinearCondition,
    cfg: GuidanceConfig,
    n_samples: int,
    seed: int,
    sched: NoiseSchedule | None = None,
    denoiser=None,
) -> OracleStats:
    """Guided sampling with the exact denoiser and the quadratic energy on ``x_{0|t}``.

    Compares the empirical moments against the exact conditional posterior. With
    ``step_scale == 0`` the reference is the unconditional mixture instead.
    """
    if spec.dim > 4:
        raise ValueError("the oracle is meant for dimensions <= 4")
    sched = sched if sched is not None else make_schedule(1000, "linear")
    denoiser = denoiser if denoiser is not None else GmmDenoiser(spec, sched)
    cfg = GuidanceConfig(**{**cfg.__dict__, "condition": cond})
    result = guided_sample(denoiser, sched, cfg, (), (spec.dim,), noise=BatchNoise(seed, n_samples), record_trace=False)
    mean, cov = sample_stats(result.x)
    target = spec if cfg.step_scale == 0 else exact_conditional_posterior(spec, cond)
    return OracleStats(mean, cov, target.mean(), target.covariance(), n_samples,
                       {"step_scale": cfg.step_scale, "grad_mode": cfg.grad_mode})
