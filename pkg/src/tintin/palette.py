"""Palettes: hex parsing, spatial palette synthesis and median-cut dominant colours."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .colorspace import check_rgb

MAX_COLORS = 64
_HEX_RE = re.compile(r"^#[0-9a-fA-F]{6}$")


class PaletteParseError(ValueError):
    """A hex palette string could not be parsed."""


@dataclass(frozen=True)
class Palette:
    """``P`` sRGB colours with a target probability vector over them."""

    colors: np.ndarray
    weights: np.ndarray
    short: bool = False  # fewer colours than requested (dominant_colors on degenerate input)

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(colors) < 1:
            raise ValueError("palette needs at least one colour")
        if len(weights) != len(colors):
            raise ValueError(f"got {len(weights)} weights for {len(colors)} colours")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got {weights.tolist()}")
        check_rgb(colors, "palette colours")
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.colors)

    def to_hex(self) -> list[str]:
        return [to_hex(c) for c in self.colors]

    def to_record(self) -> dict:
        return {"colors": self.to_hex(), "weights": [float(w) for w in self.weights]}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, record: dict) -> "Palette":
        return parse_palette(",".join(record["colors"]), weights=record.get("weights"))


@dataclass(frozen=True)
class SpatialPalette:
    image: np.ndarray
    source: Palette
    seed: int
    indices: np.ndarray = field(repr=False, default=None)


def to_hex(color) -> str:
    rgb = np.clip(np.rint(np.asarray(color, dtype=np.float64) * 255), 0, 255).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def parse_palette(hex_list: str | Sequence[str], weights: Sequence[float] | None = None) -> Palette:
    """Parse ``"#RRGGBB,#RRGGBB,..."`` (or a list of such tokens) into a :class:`Palette`.

    Weights default to uniform. Raises :class:`PaletteParseError` naming the first bad
    token and its zero-based position.
    """
    if not isinstance(hex_list, str):
        hex_list = ",".join(hex_list)
    tokens = [tok.strip() for tok in hex_list.split(",")]
    if not hex_list.strip() or tokens == [""]:
        raise ValueError("empty palette")
    if len(tokens) > MAX_COLORS:
        raise ValueError(f"palette has {len(tokens)} colours, at most {MAX_COLORS} allowed")
    colors = []
    for pos, tok in enumerate(tokens):
        if not _HEX_RE.match(tok):
            raise PaletteParseError(f"malformed hex colour {tok!r} at position {pos}")
        colors.append([int(tok[i : i + 2], 16) / 255.0 for i in (1, 3, 5)])
    if weights is None:
        weights = np.full(len(colors), 1.0 / len(colors))
    return Palette(np.array(colors), np.asarray(weights, dtype=np.float64))


def spatial_palette(p: Palette, size: tuple[int, int] = (64, 64), seed: int = 0) -> SpatialPalette:
    """Fill an ``H x W`` image with palette colours drawn i.i.d. from ``p.weights``."""
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"spatial palette size must be positive, got {size}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(p), size=(h, w), p=p.weights)
    return SpatialPalette(image=p.colors[idx], source=p, seed=seed, indices=idx)


def _sse(box: np.ndarray) -> float:
    return float(np.sum((box - box.mean(axis=0)) ** 2))


def _median_cut(pixels: np.ndarray, k: int) -> list[np.ndarray]:
    """Variance-driven median cut.

    The box with the largest squared error is split along its widest channel, at the cut
    that minimises the summed squared error of the two halves. Cuts never separate equal
    channel values, and boxes are sorted lexicographically, so the result does not depend
    on pixel order.
    """
    boxes = [pixels]
    while len(boxes) < k:
        candidates = [(_sse(b), len(b), i) for i, b in enumerate(boxes) if np.ptp(b, axis=0).max() > 0]
        if not candidates:
            break
        _, _, best = max(candidates, key=lambda c: (c[0], c[1], -c[2]))
        box = boxes.pop(best)
        ch = int(np.argmax(np.ptp(box, axis=0)))
        order = np.lexsort((box[:, (ch + 2) % 3], box[:, (ch + 1) % 3], box[:, ch]))
        box = box[order]
        n = len(box)
        c1 = np.cumsum(box, axis=0)
        c2 = np.cumsum(box * box, axis=0)
        sizes = np.arange(1, n)
        left = np.sum(c2[:-1] - c1[:-1] ** 2 / sizes[:, None], axis=1)
        rc1 = c1[-1] - c1[:-1]
        rc2 = c2[-1] - c2[:-1]
        right = np.sum(rc2 - rc1**2 / (n - sizes)[:, None], axis=1)
        cost = np.where(box[1:, ch] > box[:-1, ch], left + right, np.inf)
        cut = int(np.argmin(cost)) + 1
        boxes.extend([box[:cut], box[cut:]])
    return boxes


def dominant_colors(img: np.ndarray, k: int = 5) -> Palette:
    """Median-cut style quantisation of an sRGB image to at most ``k`` colours.

    Each colour is the mean of its box; weights are pixel fractions, sorted descending.
    The result carries ``short=True`` when fewer than ``k`` colours could be separated.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pixels = check_rgb(img).reshape(-1, 3)
    boxes = _median_cut(pixels, k)
    means = np.array([b.mean(axis=0) for b in boxes])
    counts = np.array([len(b) for b in boxes], dtype=np.float64)
    order = np.lexsort((means[:, 2], means[:, 1], means[:, 0], -counts))
    weights = counts[order] / counts.sum()
    return Palette(np.clip(means[order], 0.0, 1.0), weights / weights.sum(), short=len(boxes) < k)
