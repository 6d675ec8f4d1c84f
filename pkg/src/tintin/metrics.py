"""Evaluation metrics: colour distribution score, hard IoU, SSIM, MSE and batch reports."""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.signal import correlate2d

from .colorspace import rgb_to_lab
from .edges import EdgeMap
from .palette import Palette, dominant_colors


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def match_palettes(extracted: Palette, target: Palette, match_tau: float = 20.0) -> list[tuple[int, int]]:
    """Greedy nearest-first one-to-one matching of colours whose CIE76 distance is below ``match_tau``."""
    la = rgb_to_lab(extracted.colors)
    lb = rgb_to_lab(target.colors)
    d = np.linalg.norm(la[:, None, :] - lb[None, :, :], axis=-1)
    pairs = sorted((d[i, j], i, j) for i in range(len(la)) for j in range(len(lb)) if d[i, j] < match_tau)
    used_a, used_b, matched = set(), set(), []
    for _, i, j in pairs:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            matched.append((i, j))
    return matched


def palette_jaccard(extracted: Palette, target: Palette, match_tau: float = 20.0) -> float:
    m = len(match_palettes(extracted, target, match_tau))
    return m / (len(extracted) + len(target) - m)


def cds(gen: np.ndarray, target: Palette, k: int = 5, match_tau: float = 20.0) -> float:
    """Colour distribution score: Jaccard similarity of the top-``k`` dominant colours and ``target``."""
    if k < 1 or not match_tau > 0:
        raise ValueError("cds needs k >= 1 and match_tau > 0")
    return palette_jaccard(dominant_colors(gen, k), target, match_tau)


class IouResult(NamedTuple):
    value: float
    empty: bool


def hard_iou(a, b, tau: float = 0.9) -> IouResult:
    """Pixel-count IoU of the two maps binarised at ``values >= tau``; both empty gives 1."""
    va = np.asarray(getattr(a, "values", a))
    vb = np.asarray(getattr(b, "values", b))
    _same_shape(va, vb)
    ma, mb = va >= tau, vb >= tau
    union = int(np.count_nonzero(ma | mb))
    if union == 0:
        return IouResult(1.0, True)
    return IouResult(np.count_nonzero(ma & mb) / union, False)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Accepts ``(H, W)`` or ``(H, W, C)`` arrays; statistics use only fully covered windows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window()
    if min(a.shape[:2]) < win.shape[0]:
        raise ValueError(f"images must be at least {win.shape[0]} pixels on each side")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        f = lambda z: correlate2d(z, win, mode="valid")  # noqa: E731
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


@dataclass
class MetricsReport:
    """Per-image metric records plus aggregates that are always recomputed from them."""

    config: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    def add(self, seed, metric: str, value: float, image: str | None = None) -> None:
        rec = {"seed": seed, "metric": metric, "value": float(value)}
        if image is not None:
            rec["image"] = image
        self.records.append(rec)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16]

    def aggregates(self) -> dict[str, dict[str, float]]:
        by_metric: dict[str, list[float]] = {}
        for rec in self.records:
            by_metric.setdefault(rec["metric"], []).append(rec["value"])
        out = {}
        for name in sorted(by_metric):
            vals = by_metric[name]
            out[name] = {
                "n": len(vals),
                "mean": statistics.fmean(vals),
                "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0,
            }
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "config", "fingerprint": self.fingerprint, "config": self.config}, sort_keys=True)]
        lines += [json.dumps({"type": "record", **r}, sort_keys=True) for r in self.records]
        lines += [
            json.dumps({"type": "aggregate", "metric": k, **v}, sort_keys=True) for k, v in self.aggregates().items()
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsReport":
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("type")
            if kind == "config":
                report.config = obj["config"]
            elif kind == "record":
                report.records.append(obj)
        return report

    def summary_table(self) -> str:
        rows = [f"{'metric':<12}{'n':>5}{'mean':>12}{'std':>12}"]
        for name, agg in self.aggregates().items():
            rows.append(f"{name:<12}{agg['n']:>5}{agg['mean']:>12.6f}{agg['std']:>12.6f}")
        return "\n".join(rows) + "\n"
