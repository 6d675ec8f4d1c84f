"""sRGB <-> CIELAB conversion (D65 white, 2 degree observer) with vector-Jacobian products.

Images are float arrays of shape ``(..., 3)``. sRGB values live in ``[0, 1]``; LAB uses
``L`` in ``[0, 100]`` and unbounded ``a``/``b``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

# Linear sRGB -> XYZ, IEC 61966-2-1.
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)
# White point as the image of sRGB (1, 1, 1), so white lands exactly on L = 100, a = b = 0.
D65_WHITE = RGB_TO_XYZ.sum(axis=1)

_SRGB_BREAK = 0.04045
_LINEAR_BREAK = 0.04045 / 12.92
_DELTA = 6.0 / 29.0

CHANNEL_NAMES = ("R", "G", "B")


class ClampedRgb(NamedTuple):
    pixels: np.ndarray
    clamped: bool


def check_rgb(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an sRGB array and return it as float64.

    Raises:
        ValueError: if the trailing axis is not 3 or any channel leaves ``[0, 1]``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 1 or img.shape[-1] != 3:
        raise ValueError(f"{name} must have a trailing channel axis of size 3, got shape {img.shape}")
    for c, cname in enumerate(CHANNEL_NAMES):
        chan = img[..., c]
        if not np.all(np.isfinite(chan)):
            raise ValueError(f"{name} channel {cname} contains non-finite values")
        lo, hi = float(chan.min(initial=0.0)), float(chan.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(
                f"{name} channel {cname} has values in [{lo:.6g}, {hi:.6g}], outside bounds [0, 1]"
            )
    return img


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    # Negative inputs stay on the linear branch, which keeps the unclamped decode differentiable.
    high = np.power(np.maximum(c, _SRGB_BREAK) + 0.055, 2.4) / 1.055**2.4
    return np.where(c <= _SRGB_BREAK, c / 12.92, high)


def _srgb_to_linear_deriv(c: np.ndarray) -> np.ndarray:
    high = (2.4 / 1.055) * np.power((np.maximum(c, _SRGB_BREAK) + 0.055) / 1.055, 1.4)
    return np.where(c <= _SRGB_BREAK, 1.0 / 12.92, high)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    high = 1.055 * np.power(np.maximum(c, _LINEAR_BREAK), 1.0 / 2.4) - 0.055
    return np.where(c <= _LINEAR_BREAK, 12.92 * c, high)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_deriv(t: np.ndarray) -> np.ndarray:
    safe = np.maximum(t, _DELTA**3)
    return np.where(t > _DELTA**3, np.power(safe, -2.0 / 3.0) / 3.0, 1.0 / (3 * _DELTA**2))


def _f_inv(u: np.ndarray) -> np.ndarray:
    return np.where(u > _DELTA, u**3, 3 * _DELTA**2 * (u - 4.0 / 29.0))


def rgb_to_lab(img: np.ndarray, strict: bool = True) -> np.ndarray:
    """Convert sRGB pixels to CIELAB.

    Args:
        img: array of shape ``(..., 3)`` with channels in ``[0, 1]``.
        strict: when False, skip the range check. Values outside the unit cube are then
            mapped through the natural extension of each piecewise branch; guidance uses this
            on unclamped decoded predictions.
    """
    rgb = check_rgb(img) if strict else np.asarray(img, dtype=np.float64)
    xyz = srgb_to_linear(rgb) @ RGB_TO_XYZ.T
    fx, fy, fz = (_f(xyz[..., i] / D65_WHITE[i]) for i in range(3))
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def rgb_to_lab_vjp(img: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Pull a LAB-space cotangent back to sRGB space: ``J(img)^T @ cotangent`` per pixel."""
    rgb = np.asarray(img, dtype=np.float64)
    v = np.asarray(cotangent, dtype=np.float64)
    xyz = srgb_to_linear(rgb) @ RGB_TO_XYZ.T
    g_fx = 500.0 * v[..., 1]
    g_fy = 116.0 * v[..., 0] - 500.0 * v[..., 1] + 200.0 * v[..., 2]
    g_fz = -200.0 * v[..., 2]
    g_xyz = np.stack(
        [g * _f_deriv(xyz[..., i] / D65_WHITE[i]) / D65_WHITE[i] for i, g in enumerate((g_fx, g_fy, g_fz))],
        axis=-1,
    )
    return (g_xyz @ RGB_TO_XYZ) * _srgb_to_linear_deriv(rgb)


def rgb_to_lab_jacobian(img: np.ndarray) -> np.ndarray:
    """Per-pixel 3x3 Jacobian ``d lab / d rgb`` with shape ``(..., 3, 3)``."""
    rgb = np.asarray(img, dtype=np.float64)
    rows = [rgb_to_lab_vjp(rgb, np.broadcast_to(e, rgb.shape)) for e in np.eye(3)]
    return np.stack(rows, axis=-2)


def lab_to_rgb(img: np.ndarray) -> ClampedRgb:
    """Invert :func:`rgb_to_lab`; out-of-gamut results are clamped and reported."""
    lab = np.asarray(img, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_f_inv(u) * D65_WHITE[i] for i, u in enumerate((fx, fy, fz))], axis=-1)
    rgb = linear_to_srgb(xyz @ XYZ_TO_RGB.T)
    # Tolerate round-off at the gamut boundary without flagging it.
    out_of_gamut = bool(np.any(rgb < -1e-9) or np.any(rgb > 1.0 + 1e-9))
    return ClampedRgb(np.clip(rgb, 0.0, 1.0), out_of_gamut)


def delta_e(c1, c2) -> float:
    """CIE76 colour difference: Euclidean distance between two LAB triples."""
    return float(np.linalg.norm(np.asarray(c1, dtype=np.float64) - np.asarray(c2, dtype=np.float64)))
