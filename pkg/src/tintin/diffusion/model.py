"""Small convolutional epsilon-predictor and its numpy-facing denoiser wrapper."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class Denoiser(Protocol):
    """Noise predictor used by the samplers.

    ``predict`` maps a batch ``x`` of shape ``(B, ...)`` at network timestep ``t`` to an
    epsilon estimate of the same shape. ``vjp`` returns ``v^T d eps / d x`` and is only
    required when ``supports_grad`` is true.
    """

    supports_grad: bool

    def predict(self, x: np.ndarray, t: int, label=None) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, t: int, v: np.ndarray, label=None) -> np.ndarray: ...


@dataclass(frozen=True)
class UNetConfig:
    channels: int = 16
    in_channels: int = 3
    num_classes: int = 3
    time_dim: int = 64
    groups: int = 4
    train_timesteps: int = 1000


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x))) + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Two-level U-Net with additive time and class embeddings.

    Class index ``num_classes`` is the null label used for unconditional sampling.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        ch, te, g = cfg.channels, cfg.time_dim, cfg.groups
        self.cfg = cfg
        self.time_mlp = nn.Sequential(nn.Linear(te, te), nn.SiLU(), nn.Linear(te, te))
        self.class_emb = nn.Embedding(cfg.num_classes + 1, te)
        self.inc = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)
        self.down1 = ResBlock(ch, ch, te, g)
        self.pool1 = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
        self.down2 = ResBlock(ch, 2 * ch, te, g)
        self.pool2 = nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * ch, 2 * ch, te, g)
        self.up2 = ResBlock(4 * ch, 2 * ch, te, g)
        self.up1 = ResBlock(3 * ch, ch, te, g)
        self.out = nn.Sequential(nn.GroupNorm(g, ch), nn.SiLU(), nn.Conv2d(ch, cfg.in_channels, 3, padding=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim)) + self.class_emb(label)
        h1 = self.down1(self.inc(x), emb)
        h2 = self.down2(self.pool1(h1), emb)
        h = self.mid(self.pool2(h2), emb)
        h = self.up2(torch.cat([F.interpolate(h, scale_factor=2.0), h2], dim=1), emb)
        h = self.up1(torch.cat([F.interpolate(h, scale_factor=2.0), h1], dim=1), emb)
        return self.out(h)


class TorchDenoiser:
    """Wraps a :class:`TinyUNet` behind the numpy :class:`Denoiser` interface."""

    supports_grad = True

    def __init__(self, net: TinyUNet):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    @property
    def config(self) -> UNetConfig:
        return self.net.cfg

    def _labels(self, label, batch: int) -> torch.Tensor:
        null = self.net.cfg.num_classes
        if label is None:
            return torch.full((batch,), null, dtype=torch.long)
        lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (batch,))
        lab = np.where(lab < 0, null, lab)
        return torch.from_numpy(lab.copy())

    def predict(self, x: np.ndarray, t: int, label=None) -> np.ndarray:
        xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        tt = torch.full((len(x),), int(t), dtype=torch.long)
        with torch.no_grad():
            return self.net(xt, tt, self._labels(label, len(x))).double().numpy()

    def vjp(self, x: np.ndarray, t: int, v: np.ndarray, label=None) -> np.ndarray:
        xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).requires_grad_(True)
        tt = torch.full((len(x),), int(t), dtype=torch.long)
        vt = torch.from_numpy(np.ascontiguousarray(v, dtype=np.float32))
        with torch.enable_grad():
            out = self.net(xt, tt, self._labels(label, len(x)))
            (g,) = torch.autograd.grad(out, xt, grad_outputs=vt)
        return g.double().numpy()


def config_record(cfg: UNetConfig) -> dict:
    return asdict(cfg)
