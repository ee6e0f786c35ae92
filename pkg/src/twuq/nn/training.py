"""Single-network training: Adam, stepped learning-rate decay, L2 on kernels.

One training run is strictly single-threaded and deterministic: parameter
initialization and dropout draw from streams derived from the member seed,
and the per-epoch shuffle is keyed by (shuffle seed, epoch, member seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset
from .layers import Parameter, masked_mse_loss
from .network import NetworkWeights, UNet, UNetConfig

__all__ = ["TrainConfig", "TrainingError", "Adam", "learning_rate_at", "train_network"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    initial_lr: float = 5e-5
    lr_drop_factor: float = 0.75
    lr_drop_period_epochs: int = 4
    l2_lambda: float = 0.002
    shuffle_seed: int = 17

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_drop_period_epochs < 1:
            raise ValueError("epochs, batch size and drop period must be positive")
        if self.initial_lr <= 0.0 or not 0.0 < self.lr_drop_factor <= 1.0:
            raise ValueError("learning rate must be positive, drop factor in (0, 1]")
        if self.l2_lambda < 0.0:
            raise ValueError("regularization factor must be non-negative")


class TrainingError(RuntimeError):
    """Training diverged; carries the epoch where the loss left the reals."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


def learning_rate_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepped decay: drop by the configured factor every period."""
    return cfg.initial_lr * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_period_epochs)


class Adam:
    """Adam with bias correction; L2 acts on convolution kernels only."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: list[Parameter], l2_lambda: float):
        self.params = params
        self.l2_lambda = l2_lambda
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.BETA1**self.t
        bc2 = 1.0 - self.BETA2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if p.is_kernel and self.l2_lambda != 0.0:
                g = g + (2.0 * self.l2_lambda) * p.data
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.EPS)


def train_network(
    ds: Dataset,
    ucfg: UNetConfig,
    tcfg: TrainConfig,
    member_seed: int,
) -> tuple[NetworkWeights, list[float]]:
    """Train one network; returns final weights and per-epoch data loss.

    The reported loss is the masked mean squared error in meters squared,
    averaged over the epoch's batches (the optimizer additionally sees the
    kernel L2 penalty). Zero epochs returns the initialization untouched.
    """
    net = UNet(ucfg, init_seed=member_seed)
    x = np.stack([s.input.values for s in ds.samples])
    t = np.stack([s.target.values for s in ds.samples])
    mask = ds.samples[0].target.mask
    # Optimize the unit-scaled residual: same minimizer as the metre-space
    # MSE, but gradients land where Adam's epsilon is negligible.
    scale = np.float32(ucfg.unit_scale)
    t_u = t / scale

    dropout_rng = np.random.default_rng(np.random.SeedSequence([member_seed, 0xD0]))
    opt = Adam(net.parameters(), tcfg.l2_lambda)
    history: list[float] = []
    n = len(ds)
    for epoch in range(tcfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([tcfg.shuffle_seed, epoch, member_seed])
        ).permutation(n)
        lr = learning_rate_at(epoch, tcfg)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            net.zero_grad()
            pred_u = net.forward(x[idx], train=True, rng=dropout_rng) / scale
            loss_u, grad_u = masked_mse_loss(pred_u, t_u[idx], mask)
            net.backward(grad_u / scale)
            opt.step(lr)
            epoch_loss += loss_u
            n_batches += 1
        mean_loss = epoch_loss / n_batches * float(scale) ** 2
        if not np.isfinite(mean_loss):
            raise TrainingError(f"training loss diverged in epoch {epoch}", epoch)
        history.append(mean_loss)
    return net.weights(), history
