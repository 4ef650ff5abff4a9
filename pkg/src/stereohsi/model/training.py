"""Adam, plateau learning-rate schedule and the mini-batch training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..core import N_CLASSES, seeded_rng
from ..errors import TrainingError, ValidationError
from .network import DEFAULT_ARCHITECTURE, Architecture, Conv3dNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 30
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    plateau_threshold: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValidationError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValidationError("plateau_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, config: TrainConfig, lr: Optional[float] = None):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype)
    return params, state


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its loss is below the best seen so far by more
    than ``threshold``.  The rate never drops below ``min_lr``.
    """

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-5
    best: float = np.inf
    bad_epochs: int = 0

    def step(self, loss: float) -> bool:
        """Record one epoch; returns True when the rate was reduced."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            new_lr = max(self.lr * self.factor, self.min_lr)
            reduced = new_lr < self.lr
            self.lr = new_lr
            return reduced
        return False


def plateau_schedule(losses, config: TrainConfig):
    """Learning rate in effect after each epoch for a sequence of validation losses."""
    sched = PlateauScheduler(config.learning_rate, config.plateau_factor,
                             config.plateau_patience, config.min_lr, config.plateau_threshold)
    rates = []
    for loss in losses:
        sched.step(loss)
        rates.append(sched.lr)
    return rates


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    learning_rate: List[float] = field(default_factory=list)
    best_epoch: int = 0

    def as_text(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_accuracy,learning_rate"]
        for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_accuracy,
                                    self.learning_rate), 1):
            lines.append(f"{i},{row[0]:.6f},{row[1]:.6f},{row[2]:.6f},{row[3]:.6g}")
        lines.append(f"best_epoch,{self.best_epoch}")
        return "\n".join(lines) + "\n"


def evaluate_loss(net: Conv3dNet, x, y0, batch_size: int = 64):
    """Mean cross-entropy and accuracy; ``y0`` are 0-based targets."""
    probs = net.predict_proba(x, batch_size)
    picked = np.clip(probs[np.arange(len(y0)), y0], 1e-300, None)
    return float(-np.log(picked).mean()), float((probs.argmax(axis=1) == y0).mean())


def train(train_x, train_y, val_x, val_y, config: TrainConfig = TrainConfig(),
          architecture: Architecture = DEFAULT_ARCHITECTURE, dtype=np.float32,
          callback=None):
    """Fit a fresh network; returns ``(best checkpoint, TrainReport)``.

    Labels are tissue codes 1..5.  The checkpoint with the highest
    validation accuracy is kept (earliest epoch on ties).
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(train_y) == 0 or len(val_y) == 0:
        raise TrainingError("training and validation sets must be non-empty")
    missing = sorted(set(range(1, N_CLASSES + 1)) - set(train_y.tolist()))
    if missing:
        raise TrainingError(f"classes {missing} missing from the training set")
    y0, vy0 = train_y - 1, val_y - 1

    rng = seeded_rng(config.seed)
    net = Conv3dNet.initialize(architecture, seed=int(rng.integers(0, 2 ** 63)), dtype=dtype)
    state = AdamState.zeros_like(net.params)
    sched = PlateauScheduler(config.learning_rate, config.plateau_factor, config.plateau_patience,
                             config.min_lr, config.plateau_threshold)
    report = TrainReport()
    best, best_acc = net.copy(), -1.0
    n = len(y0)
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads = net.loss_and_grads(train_x[idx], y0[idx])
            adam_step(net.params, grads, state, config, lr)
            total += loss * len(idx)
        val_loss, val_acc = evaluate_loss(net, val_x, vy0, config.batch_size)
        report.train_loss.append(total / n)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        report.learning_rate.append(lr)
        if val_acc > best_acc:
            best, best_acc, report.best_epoch = net.copy(), val_acc, epoch
        log.info("epoch %d: train %.4f val %.4f acc %.4f lr %.3g",
                 epoch, total / n, val_loss, val_acc, lr)
        if callback is not None:
            callback(epoch, report)
        sched.step(val_loss)
    return best, report
