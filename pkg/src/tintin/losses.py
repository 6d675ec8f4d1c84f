"""Conditioning losses with closed-form gradients with respect to the generated image.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the generated input.
The colour losses take sRGB images of shape ``(H, W, 3)``; the IoU loss takes edge maps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .colorspace import rgb_to_lab, rgb_to_lab_vjp
from .palette import Palette, SpatialPalette


class EmptyUnionWarning(RuntimeWarning):
    """Both edge maps were empty; the IoU loss fell back to its convention."""


class LossResult(NamedTuple):
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class ColorLossConfig:
    rho: float = 100.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    epsilon: float = 1e-8
    chunk_size: int | None = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not 0 < self.epsilon <= 1e-4:
            raise ValueError(f"epsilon must lie in (0, 1e-4], got {self.epsilon}")


class ColorDistribution(NamedTuple):
    probs: np.ndarray
    soft_assign: np.ndarray  # N x P row-stochastic matrix
    dist: np.ndarray  # N x P pixel-to-palette distances


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def loss_euclidean(gen: np.ndarray, ref: np.ndarray, strict: bool = False) -> LossResult:
    """Frobenius distance between the LAB images of ``gen`` and ``ref``."""
    gen = np.asarray(gen, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_same_shape(gen, ref)
    diff = rgb_to_lab(gen, strict=strict) - rgb_to_lab(ref, strict=strict)
    value = float(np.sqrt(np.sum(diff * diff)))
    if value == 0.0:
        return LossResult(0.0, np.zeros_like(gen))
    return LossResult(value, rgb_to_lab_vjp(gen, diff / value))


def color_distribution(gen: np.ndarray, p: Palette, rho: float, chunk_size: int | None = None) -> ColorDistribution:
    """Soft colour histogram of ``gen`` over the palette entries.

    Row ``i`` of the soft assignment is ``softmax(-rho * ||x_i - q_j||)`` over ``j``; the
    histogram is its column mean. ``chunk_size`` bounds the rows processed at once.
    """
    x = np.asarray(gen, dtype=np.float64).reshape(-1, 3)
    n = len(x)
    step = n if not chunk_size else chunk_size
    dist = np.empty((n, len(p)))
    soft = np.empty((n, len(p)))
    for lo in range(0, n, step):
        diff = x[lo : lo + step, None, :] - p.colors[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        z = -rho * d
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        dist[lo : lo + step] = d
        soft[lo : lo + step] = e / e.sum(axis=1, keepdims=True)
    probs = soft.sum(axis=0) / n
    return ColorDistribution(probs, soft, dist)


def loss_ds(gen: np.ndarray, p: Palette, cfg: ColorLossConfig = ColorLossConfig()) -> LossResult:
    """Cross-entropy ``-sum_j m_j log max(d_j, eps)`` between palette weights and soft histogram."""
    gen = np.asarray(gen, dtype=np.float64)
    cd = color_distribution(gen, p, cfg.rho, cfg.chunk_size)
    clamped = np.maximum(cd.probs, cfg.epsilon)
    value = float(-np.sum(p.weights * np.log(clamped)))

    n = cd.soft_assign.shape[0]
    g_probs = np.where(cd.probs > cfg.epsilon, -p.weights / clamped, 0.0)
    g_soft = np.broadcast_to(g_probs / n, cd.soft_assign.shape)
    s = cd.soft_assign
    g_logits = s * (g_soft - np.sum(s * g_soft, axis=1, keepdims=True))
    g_dist = -cfg.rho * g_logits
    x = gen.reshape(-1, 3)
    diff = x[:, None, :] - p.colors[None, :, :]
    safe = np.where(cd.dist > 0, cd.dist, 1.0)
    unit = np.where(cd.dist[..., None] > 0, diff / safe[..., None], 0.0)
    grad = np.einsum("np,npc->nc", g_dist, unit)
    return LossResult(value, grad.reshape(gen.shape))


def loss_color(gen: np.ndarray, sp: SpatialPalette, cfg: ColorLossConfig = ColorLossConfig()) -> LossResult:
    """``lambda1 * L_DS + lambda2 * L_Euclidean`` against a spatial palette."""
    value = 0.0
    grad = np.zeros(np.shape(gen))
    if cfg.lambda1 != 0:
        ds = loss_ds(gen, sp.source, cfg)
        value += cfg.lambda1 * ds.value
        grad += cfg.lambda1 * ds.grad
    if cfg.lambda2 != 0:
        eu = loss_euclidean(gen, sp.image)
        value += cfg.lambda2 * eu.value
        grad += cfg.lambda2 * eu.grad
    return LossResult(value, grad)


def soft_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = float(np.sum(a * b))
    union = float(np.sum(a + b - a * b))
    return inter / union if union > 0 else 1.0


def loss_iou(gen_edges, ref_edges) -> LossResult:
    """``1 - softIoU`` with the product/sum relaxation; gradient w.r.t. ``gen_edges``.

    Accepts :class:`~tintin.edges.EdgeMap` instances or plain arrays. When both maps are
    identically zero the value is 1 with a zero gradient and an :class:`EmptyUnionWarning`.
    """
    a = np.asarray(getattr(gen_edges, "values", gen_edges), dtype=np.float64)
    b = np.asarray(getattr(ref_edges, "values", ref_edges), dtype=np.float64)
    _check_same_shape(a, b)
    inter = float(np.sum(a * b))
    union = float(np.sum(a + b - a * b))
    if union <= 0.0:
        warnings.warn("both edge maps are empty; IoU loss set to 1", EmptyUnionWarning, stacklevel=2)
        return LossResult(1.0, np.zeros_like(a))
    grad = -(b * union - inter * (1.0 - b)) / union**2
    return LossResult(1.0 - inter / union, grad)


def entropy(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    nz = m[m > 0]
    return float(-np.sum(nz * np.log(nz)))
