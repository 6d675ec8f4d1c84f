"""Differentiable edge maps: smoothed Sobel magnitude with percentile normalisation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import convolve2d, correlate2d

LUMA = np.array([0.2126, 0.7152, 0.0722])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
NORM_PERCENTILE = 99.5
EDGE_THRESHOLD = 0.9


@dataclass(frozen=True)
class EdgeMap:
    values: np.ndarray
    threshold_applied: bool = False
    threshold: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"edge map must be 2-D, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("edge map values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.ones((1, 1))
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _reflect_index(n: int, r: int) -> np.ndarray:
    idx = np.arange(-r, n + r)
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period if n > 1 else np.zeros_like(idx)
    return np.where(idx >= n, period - idx, idx)


def _filter(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Correlate with ``k`` using mirror padding; output has the shape of ``x``."""
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    iy, ix = _reflect_index(x.shape[0], ry), _reflect_index(x.shape[1], rx)
    return correlate2d(x[np.ix_(iy, ix)], k, mode="valid")


def _filter_adjoint(g: np.ndarray, k: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    padded = convolve2d(g, k, mode="full")
    iy, ix = _reflect_index(shape[0], ry), _reflect_index(shape[1], rx)
    rows = np.zeros((shape[0], padded.shape[1]))
    np.add.at(rows, iy, padded)
    out = np.zeros(shape)
    np.add.at(out.T, ix, rows.T)
    return out


def _percentile_weights(m: np.ndarray, q: float) -> tuple[float, np.ndarray]:
    """Linear-interpolated percentile and its gradient with respect to ``m``."""
    flat = m.ravel()
    order = np.argsort(flat, kind="stable")
    pos = q / 100.0 * (flat.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, flat.size - 1)
    frac = pos - lo
    value = flat[order[lo]] + frac * (flat[order[hi]] - flat[order[lo]])
    w = np.zeros(flat.size)
    w[order[lo]] += 1.0 - frac
    w[order[hi]] += frac
    return float(value), w.reshape(m.shape)


def edges_with_vjp(img: np.ndarray, smooth_sigma: float = 1.0) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Edge values of an ``(H, W, 3)`` image plus a function pulling edge cotangents back to it.

    No range check is applied, so unclamped decoded predictions are accepted.
    """
    img = np.asarray(img, dtype=np.float64)
    k_blur = gaussian_kernel(smooth_sigma)
    lum = img @ LUMA
    smooth = _filter(lum, k_blur)
    gx = _filter(smooth, SOBEL_X)
    gy = _filter(smooth, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    scale, dscale = _percentile_weights(mag, NORM_PERCENTILE)
    if scale <= 0.0:
        return np.zeros_like(mag), lambda v: np.zeros_like(img)
    ratio = mag / scale
    values = np.clip(ratio, 0.0, 1.0)

    def vjp(v: np.ndarray) -> np.ndarray:
        g_ratio = np.where(ratio < 1.0, v, 0.0)
        g_mag = g_ratio / scale - dscale * np.sum(g_ratio * mag) / scale**2
        safe = np.where(mag > 0, mag, 1.0)
        g_gx = np.where(mag > 0, g_mag * gx / safe, 0.0)
        g_gy = np.where(mag > 0, g_mag * gy / safe, 0.0)
        g_smooth = _filter_adjoint(g_gx, SOBEL_X, mag.shape) + _filter_adjoint(g_gy, SOBEL_Y, mag.shape)
        g_lum = _filter_adjoint(g_smooth, k_blur, mag.shape)
        return g_lum[..., None] * LUMA

    return values, vjp


def extract_edges(img: np.ndarray, smooth_sigma: float = 1.0) -> EdgeMap:
    """Luma, Gaussian blur, Sobel magnitude, then divide by the 99.5th percentile and clip."""
    if smooth_sigma < 0:
        raise ValueError(f"smooth_sigma must be >= 0, got {smooth_sigma}")
    values, _ = edges_with_vjp(img, smooth_sigma)
    return EdgeMap(values)


def threshold_edges(e: EdgeMap, tau: float = EDGE_THRESHOLD) -> EdgeMap:
    """Zero every value below ``tau``; values at or above it are kept unchanged."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    v = e.values
    return EdgeMap(np.where(v >= tau, v, 0.0), threshold_applied=True, threshold=tau)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def soft_threshold_values(v: np.ndarray, tau: float, temp: float) -> tuple[np.ndarray, np.ndarray]:
    """``v * sigmoid((v - tau) / temp)`` and its elementwise derivative."""
    if temp <= 0:
        raise ValueError(f"temp must be positive, got {temp}")
    s = _sigmoid((v - tau) / temp)
    return v * s, s + v * s * (1.0 - s) / temp


def soft_threshold_edges(e: EdgeMap, tau: float = EDGE_THRESHOLD, temp: float = 0.01) -> EdgeMap:
    values, _ = soft_threshold_values(e.values, tau, temp)
    return EdgeMap(values)


def save_edge_map(e: EdgeMap, path: str | Path) -> None:
    from .imageio import write_gray_png

    write_gray_png(path, e.values)
