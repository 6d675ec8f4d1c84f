"""Training loop for the toy epsilon-predictor."""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import ToyDataset
from .model import TinyUNet, TorchDenoiser, UNetConfig
from .schedule import NoiseSchedule, make_schedule

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    ema_decay: float = 0.995
    seed: int = 0
    channels: int = 16
    train_timesteps: int = 1000
    schedule: str = "linear"
    label_dropout: float = 0.1
    log_every: int = 100


@dataclass
class TrainResult:
    denoiser: TorchDenoiser
    net: TinyUNet
    schedule: NoiseSchedule
    curve: list  # (step, mean loss over the preceding window)
    final_loss: float

    def record(self, cfg: TrainConfig, dataset: ToyDataset) -> dict:
        return {
            "config": asdict(cfg),
            "dataset": {"n": len(dataset), "size": int(dataset.images.shape[-1]), "seed": dataset.seed},
            "curve": [[int(s), float(v)] for s, v in self.curve],
            "final_loss": float(self.final_loss),
        }


def configure_threads() -> None:
    n = os.environ.get("TINTIN_NUM_THREADS")
    torch.set_num_threads(int(n) if n else 1)


def train_toy_denoiser(dataset: ToyDataset, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit the epsilon-prediction objective ``E ||eps - eps_hat||^2`` with Adam and an EMA copy.

    Raises:
        TrainingDivergedError: if the windowed loss after 20% of the budget exceeds the
            initial loss.
    """
    configure_threads()
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    sched = make_schedule(cfg.train_timesteps, cfg.schedule)
    ucfg = UNetConfig(channels=cfg.channels, num_classes=dataset.num_classes, train_timesteps=cfg.train_timesteps)
    net = TinyUNet(ucfg)
    ema = copy.deepcopy(net)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps, eta_min=cfg.lr * 0.05)

    rng = np.random.default_rng(cfg.seed)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    sqrt_ab = torch.from_numpy(np.sqrt(sched.alpha_bars)).float()
    sqrt_1mab = torch.from_numpy(np.sqrt(1.0 - sched.alpha_bars)).float()

    curve: list = []
    window: list[float] = []
    initial = None
    check_at = max(1, int(0.2 * cfg.steps))
    for step in range(1, cfg.steps + 1):
        idx = torch.from_numpy(rng.integers(len(dataset), size=cfg.batch_size))
        t = torch.from_numpy(rng.integers(cfg.train_timesteps, size=cfg.batch_size))
        noise = torch.from_numpy(rng.standard_normal((cfg.batch_size, *dataset.images.shape[1:]), dtype=np.float32))
        drop = torch.from_numpy(rng.random(cfg.batch_size) < cfg.label_dropout)
        lab = torch.where(drop, torch.full_like(labels[idx], ucfg.num_classes), labels[idx])
        x0 = images[idx]
        xt = sqrt_ab[t][:, None, None, None] * x0 + sqrt_1mab[t][:, None, None, None] * noise
        loss = torch.mean((net(xt, t, lab) - noise) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        with torch.no_grad():
            for pe, p in zip(ema.parameters(), net.parameters()):
                pe.mul_(cfg.ema_decay).add_(p, alpha=1.0 - cfg.ema_decay)

        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        window.append(value)
        if len(window) == cfg.log_every or step == cfg.steps:
            mean = float(np.mean(window))
            if initial is None:
                initial = mean
            curve.append((step, mean))
            log.info("step %d loss %.5f", step, mean)
            window = []
            if step >= check_at and mean > initial:
                raise TrainingDivergedError(
                    f"loss {mean:.4g} at step {step} exceeds initial loss {initial:.4g} after 20% of the budget"
                )
    return TrainResult(TorchDenoiser(ema), ema, sched, curve, curve[-1][1])
