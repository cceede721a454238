"""Minibatch SGD trainers: clean, PGD adversarial, and TRADES-style."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .data import Dataset
from .selective import project_linf


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    lr_decay_per_epoch: float = 0.95
    momentum: float = 0.9
    seed: int = 0
    epsilon: float = 0.0
    pgd_steps: int = 10
    pgd_step_size: float | None = None  # None: 2.5 * epsilon / pgd_steps
    random_start: bool = True
    trades_beta: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must lie in (0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.pgd_steps < 0:
            raise ValueError("pgd_steps must be >= 0")
        if self.trades_beta < 0:
            raise ValueError("trades_beta must be >= 0")

    @property
    def step_size(self) -> float:
        if self.pgd_step_size is not None:
            return self.pgd_step_size
        return 2.5 * self.epsilon / max(self.pgd_steps, 1)


@dataclass(frozen=True)
class LogRow:
    epoch: int
    clean_loss: float
    robust_loss_proxy: float


def _resolve_model(ds: Dataset, arch, seed: int) -> nn.Mlp:
    if isinstance(arch, nn.Mlp):
        if arch.d != ds.d or arch.k != ds.k:
            raise nn.ShapeError("model shape does not match dataset")
        return arch
    widths = list(arch)
    if widths[0] != ds.d or widths[-1] != ds.k:
        raise nn.ShapeError(f"architecture {widths} does not match d={ds.d}, k={ds.k}")
    return nn.init_mlp(widths, seed)


def pgd_examples(model: nn.Mlp, x, y, epsilon: float, steps: int, step_size: float,
                 random_start: bool, rng: np.random.Generator, box=None) -> np.ndarray:
    """Signed-gradient ascent on cross-entropy inside the l-inf ball of radius ``epsilon``."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0 or steps == 0:
        return x.copy()
    z = x.copy()
    if random_start:
        z = project_linf(z + rng.uniform(-epsilon, epsilon, size=x.shape), x, epsilon, box)
    spec = nn.LossSpec.cross_entropy(np.asarray(y))
    for _ in range(steps):
        g = nn.grad_input(model, z, spec)
        z = project_linf(z + step_size * np.sign(g), x, epsilon, box)
    return z


def _kl_rows(p_logits, q_logits):
    """Per-row KL(p || q) of the softmax distributions."""
    logp = nn.log_softmax(p_logits)
    logq = nn.log_softmax(q_logits)
    return np.sum(np.exp(logp) * (logp - logq), axis=1)


def trades_examples(model: nn.Mlp, x, epsilon: float, steps: int, step_size: float,
                    rng: np.random.Generator, box=None) -> np.ndarray:
    """Maximise KL(h(x) || h(x')) over x' in the ball, from a tiny Gaussian start."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0 or steps == 0:
        return x.copy()
    p = nn.softmax(nn.logits(model, x))
    z = project_linf(x + 0.001 * rng.standard_normal(x.shape), x, epsilon, box)

    def kl_fn(q_logits):
        q = nn.softmax(q_logits)
        logp = np.log(np.clip(p, 1e-300, None))
        return np.sum(p * (logp - nn.log_softmax(q_logits)), axis=1), q - p

    spec = nn.LossSpec.custom(kl_fn)
    for _ in range(steps):
        g = nn.grad_input(model, z, spec)
        z = project_linf(z + step_size * np.sign(g), x, epsilon, box)
    return z


def _check(loss: float):
    if not np.isfinite(loss):
        raise TrainingError("training loss became non-finite")


def _mean_ce(model, x, y) -> float:
    return float(nn.cross_entropy(nn.logits(model, x), np.asarray(y))[0].mean())


def _fit(ds: Dataset, arch, cfg: TrainConfig, mode: str):
    model = _resolve_model(ds, arch, cfg.seed)
    log: list[LogRow] = []
    if cfg.epochs == 0:
        return model, log
    order_rng = np.random.default_rng([cfg.seed, 1])
    attack_rng = np.random.default_rng([cfg.seed, 2])
    velocity = None
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(ds.n)
        robust_sum = 0.0
        for start in range(0, ds.n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = ds.x[idx], ds.y[idx]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = _batch_objective(model, xb, yb, cfg, mode, attack_rng, ds.box)
                _check(loss)
                model, velocity = nn.sgd_step(model, grads, lr, cfg.momentum, velocity)
            except nn.NumericError as exc:
                raise TrainingError(str(exc)) from exc
            robust_sum += loss * len(idx)
        lr *= cfg.lr_decay_per_epoch
        with np.errstate(over="ignore", invalid="ignore"):
            clean = _mean_ce(model, ds.x, ds.y)
        _check(clean)
        log.append(LogRow(epoch, clean, robust_sum / ds.n))
    return model, log


def _batch_objective(model, xb, yb, cfg: TrainConfig, mode: str, attack_rng, box):
    ce = nn.LossSpec.cross_entropy(yb)
    if mode == "at":
        xa = pgd_examples(model, xb, yb, cfg.epsilon, cfg.pgd_steps, cfg.step_size,
                          cfg.random_start, attack_rng, box)
        return nn.value_and_grad_params(model, xa, ce)
    loss, grads = nn.value_and_grad_params(model, xb, ce)
    if mode == "trades":
        xa = trades_examples(model, xb, cfg.epsilon, cfg.pgd_steps, cfg.step_size, attack_rng, box)
        kl, kgrads = _trades_kl_grads(model, xb, xa)
        loss += cfg.trades_beta * kl
        grads = nn.add_grads(grads, kgrads, cfg.trades_beta)
    return loss, grads


def _trades_kl_grads(model, x, xa):
    """Mean KL(h(x) || h(xa)) and its parameter gradient through both arguments."""
    a = nn.logits(model, x)
    b = nn.logits(model, xa)
    kl = _kl_rows(a, b)
    n = len(x)
    p = nn.softmax(a)
    logp, logq = nn.log_softmax(a), nn.log_softmax(b)
    da = p * (logp - logq) - p * kl[:, None]
    db = nn.softmax(b) - p
    grads = nn.add_grads(nn.backprop_logits(model, x, da / n), nn.backprop_logits(model, xa, db / n))
    return float(kl.mean()), grads


def train_standard(ds: Dataset, arch: Sequence[int] | nn.Mlp, cfg: TrainConfig):
    """Plain cross-entropy training. Returns ``(model, log)``."""
    return _fit(ds, arch, cfg, "standard")


def train_at(ds: Dataset, arch: Sequence[int] | nn.Mlp, cfg: TrainConfig):
    """Each minibatch is replaced by PGD adversarial examples before the step.

    A zero budget (or zero PGD steps) reproduces :func:`train_standard`.
    """
    return _fit(ds, arch, cfg, "at")


def train_trades(ds: Dataset, arch: Sequence[int] | nn.Mlp, cfg: TrainConfig):
    """Clean cross-entropy plus ``trades_beta`` times KL(h(x) || h(x_adv))."""
    return _fit(ds, arch, cfg, "trades")


TRAINERS = {"standard": train_standard, "at": train_at, "trades": train_trades}


def write_log_csv(log: Sequence[LogRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,clean_loss,robust_loss_proxy\n")
        for row in log:
            fh.write(f"{row.epoch},{row.clean_loss!r},{row.robust_loss_proxy!r}\n")
