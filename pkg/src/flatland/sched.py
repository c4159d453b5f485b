"""Adaptive learning-rate scheduling (ALRS) and a cosine baseline.

ALRS warms up linearly for ``warmup_epochs`` epochs, then multiplies the
learning rate by ``decay_rate`` whenever the epoch loss changes by less than
``slope_threshold`` relative *and* ``diff_threshold`` absolute.  Training is
over once the rate drops below ``min_lr``.

Calling convention: ``alrs_step(state, loss)`` is invoked after an epoch
finishes, with that epoch's mean training loss.  It advances the epoch
counter and returns the rate for the epoch about to start.  A fresh state
reports the rate for epoch 0 in ``state.current_lr``, which is 0 whenever
warmup is enabled, so epoch 0 performs no parameter updates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


@dataclass
class AlrsState:
    target_lr: float
    warmup_epochs: int = 0
    decay_rate: float = 0.9
    slope_threshold: float = 0.2
    diff_threshold: float = 0.2
    min_lr: float = 1e-4
    # "literal": decay on any small |delta|; "prose": decay iff the loss did not decrease
    rule: str = "literal"
    current_epoch: int = 0
    current_lr: float | None = None
    prev_loss: float | None = None
    curr_loss: float | None = None
    last_decayed: bool = field(default=False, repr=False)

    def __post_init__(self):
        if not 0 < self.decay_rate < 1:
            raise ValueError(f"decay_rate must lie in (0, 1), got {self.decay_rate}")
        if self.slope_threshold <= 0 or self.diff_threshold <= 0:
            raise ValueError("slope_threshold and diff_threshold must be positive")
        if self.target_lr <= 0:
            raise ValueError(f"target_lr must be positive, got {self.target_lr}")
        if not 0 < self.min_lr < self.target_lr:
            raise ValueError(f"need 0 < min_lr < target_lr, got min_lr={self.min_lr}, target_lr={self.target_lr}")
        if self.warmup_epochs < 0 or self.current_epoch < 0:
            raise ValueError("warmup_epochs and current_epoch must be nonnegative")
        if self.rule not in ("literal", "prose"):
            raise ValueError(f"rule must be 'literal' or 'prose', got {self.rule!r}")
        if self.current_lr is None:
            self.current_lr = self.warmup_lr(self.current_epoch)
        if self.current_lr > self.target_lr:
            raise ValueError("current_lr may not exceed target_lr")

    def warmup_lr(self, epoch: int) -> float:
        if epoch >= self.warmup_epochs:
            # exact at the end of warmup (target*w/w can round above target)
            return self.target_lr
        return self.target_lr * epoch / self.warmup_epochs

    @property
    def in_warmup(self) -> bool:
        return self.current_epoch <= self.warmup_epochs


def _should_decay(state: AlrsState, prev: float, curr: float) -> bool:
    delta = prev - curr
    if state.rule == "prose":
        return delta <= 0
    if curr == 0:
        return abs(delta) == 0
    return abs(delta / curr) < state.slope_threshold and abs(delta) < state.diff_threshold


def alrs_step(state: AlrsState, epoch_loss: float) -> tuple[float, bool]:
    """Feed one epoch's loss; returns ``(lr for the next epoch, terminate)``."""
    epoch_loss = float(epoch_loss)
    if not math.isfinite(epoch_loss):
        raise ValueError(f"epoch loss must be finite, got {epoch_loss}")
    state.prev_loss, state.curr_loss = state.curr_loss, epoch_loss
    state.current_epoch += 1
    state.last_decayed = False
    if state.current_epoch <= state.warmup_epochs:
        lr = state.warmup_lr(state.current_epoch)
    else:
        lr = state.current_lr
        # no decay until two finite losses exist
        if state.prev_loss is not None and _should_decay(state, state.prev_loss, state.curr_loss):
            lr = state.decay_rate * lr
            state.last_decayed = True
    state.current_lr = lr
    terminate = state.current_epoch > state.warmup_epochs and lr < state.min_lr
    return lr, terminate


def cosine_step(epoch: int, total_epochs: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Half-cosine from ``base_lr`` at epoch 0 to ``min_lr`` at ``total_epochs``."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class ScheduleRow:
    epoch: int
    lr: float
    epoch_loss: float
    decayed: bool
    terminate: bool


def write_schedule_csv(path, rows: Iterable[ScheduleRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "epoch_loss", "decayed", "terminate"])
        for r in rows:
            w.writerow([r.epoch, repr(r.lr), repr(r.epoch_loss), int(r.decayed), int(r.terminate)])
