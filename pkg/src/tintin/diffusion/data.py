"""Procedural toy dataset: 1-3 flat-coloured geometric shapes on a plain background."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Global palette the shapes and backgrounds draw from.
SHAPE_COLORS = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.60, 0.20],
        [0.15, 0.25, 0.85],
        [0.95, 0.80, 0.10],
        [0.60, 0.20, 0.70],
        [0.95, 0.50, 0.10],
        [0.95, 0.95, 0.95],
        [0.10, 0.10, 0.12],
    ]
)
SHAPE_KINDS = ("circle", "square", "triangle")


@dataclass
class ToyDataset:
    """Images of shape ``(N, 3, H, W)`` in ``[-1, 1]`` with integer labels (kind of the first shape)."""

    images: np.ndarray
    labels: np.ndarray
    seed: int

    @property
    def num_classes(self) -> int:
        return len(SHAPE_KINDS)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def generate(cls, n: int, size: int = 32, seed: int = 0) -> "ToyDataset":
        rng = np.random.default_rng(seed)
        imgs = np.empty((n, 3, size, size), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            rgb, label = render_shapes(rng, size)
            imgs[i] = (rgb * 2.0 - 1.0).transpose(2, 0, 1)
            labels[i] = label
        return cls(imgs, labels, seed)


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # Upward triangle inscribed in the square of half-width r.
    rel = (yy - (cy - r)) / (2 * r)
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * r)


def render_shapes(rng: np.random.Generator, size: int = 32) -> tuple[np.ndarray, int]:
    """Render one ``(size, size, 3)`` image in ``[0, 1]`` and return it with its label."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    bg = rng.integers(len(SHAPE_COLORS))
    img = np.broadcast_to(SHAPE_COLORS[bg], (size, size, 3)).copy()
    n_shapes = int(rng.integers(1, 4))
    label = 0
    for j in range(n_shapes):
        kind = int(rng.integers(len(SHAPE_KINDS)))
        if j == 0:
            label = kind
        color = rng.choice([c for c in range(len(SHAPE_COLORS)) if c != bg])
        r = rng.uniform(0.12, 0.28) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        img[_shape_mask(SHAPE_KINDS[kind], yy, xx, cy, cx, r)] = SHAPE_COLORS[color]
    return img, label
