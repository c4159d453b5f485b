"""Four-stage distillation-based fine-tuning (DFP) and evaluation harness.

Stages: CE at low resolution, MESA at low resolution, CE at high
resolution, MESA at high resolution.  Every stage starts a fresh ALRS state
(the learning rate is reset and warmup restarts) and runs until ALRS asks to
stop or the epoch cap is reached.  Parameters flow from one stage to the next.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import AugmentConfig, SyntheticDomainDataset, Split, augment_batch, cutmix, domain_split, mixed_targets
from .distill import DistillConfig, TeacherState, cross_entropy, ema_update, mesa_loss
from .optim import NonFiniteGradientError, make_optimizer
from .sched import AlrsState, alrs_step, cosine_step

log = logging.getLogger(__name__)

MAX_EPOCHS = 500


class StageDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage_index: int
    resolution: int
    loss_mode: str
    optimizer: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    warmup_epochs: int = 2
    decay_rate: float = 0.9
    slope_threshold: float = 0.2
    diff_threshold: float = 0.2
    min_lr: float = 1e-4
    alrs_rule: str = "literal"
    batch_size: int = 32
    augmentations: tuple[str, ...] = ("autoaugment", "colorjitter", "randomcrop")
    cutmix_prob: float = 0.5
    cutmix_beta: float = 1.0
    tta_epochs: int = 16
    max_epochs: int = MAX_EPOCHS
    scheduler: str = "alrs"
    # cosine only: total epochs of the half-cosine, warmup included
    cosine_epochs: int = 0

    def __post_init__(self):
        if self.loss_mode not in ("CE", "MESA"):
            raise ValueError(f"stage {self.stage_index}: loss_mode must be CE or MESA, got {self.loss_mode!r}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"stage {self.stage_index}: optimizer must be sgd or adamw")
        if self.scheduler not in ("alrs", "cosine"):
            raise ValueError(f"stage {self.stage_index}: scheduler must be alrs or cosine")
        if self.scheduler == "cosine" and self.cosine_epochs <= self.warmup_epochs:
            raise ValueError(f"stage {self.stage_index}: cosine_epochs must exceed warmup_epochs")
        if self.batch_size < 2 or self.max_epochs < 1 or self.tta_epochs < 0:
            raise ValueError(f"stage {self.stage_index}: batch_size >= 2, max_epochs >= 1, tta_epochs >= 0 required")
        object.__setattr__(self, "augmentations", tuple(self.augmentations))

    def new_alrs(self) -> AlrsState:
        return AlrsState(target_lr=self.lr, warmup_epochs=self.warmup_epochs, decay_rate=self.decay_rate,
                         slope_threshold=self.slope_threshold, diff_threshold=self.diff_threshold,
                         min_lr=self.min_lr, rule=self.alrs_rule)


def default_plans(low_res: int = 16, high_res: int = 32, **overrides) -> list[StagePlan]:
    """Desk-scale analogue of the per-stage settings (lr, decay, min lr, optimizer)."""
    rows = [
        dict(stage_index=1, resolution=low_res, loss_mode="CE", optimizer="sgd", lr=0.1, decay_rate=0.9,
             min_lr=1e-4, batch_size=32),
        dict(stage_index=2, resolution=low_res, loss_mode="MESA", optimizer="sgd", lr=0.1, decay_rate=0.9,
             min_lr=1e-4, batch_size=32),
        dict(stage_index=3, resolution=high_res, loss_mode="CE", optimizer="adamw", lr=0.01, decay_rate=0.8,
             min_lr=1e-5, batch_size=16),
        dict(stage_index=4, resolution=high_res, loss_mode="MESA", optimizer="adamw", lr=0.01, decay_rate=0.8,
             min_lr=1e-5, batch_size=16),
    ]
    return [StagePlan(**{**r, **overrides}) for r in rows]


def validate_plans(plans: Sequence[StagePlan]) -> None:
    if not plans:
        raise ValueError("at least one stage plan is required")
    idx = [p.stage_index for p in plans]
    if any(i not in (1, 2, 3, 4) for i in idx) or idx != sorted(set(idx)):
        raise ValueError(f"stage indices must be strictly increasing within 1..4, got {idx}")
    for p in plans:
        want = "CE" if p.stage_index % 2 else "MESA"
        if p.loss_mode != want:
            raise ValueError(f"stage {p.stage_index}: loss_mode must be {want} (CE, MESA, CE, MESA), got {p.loss_mode}")
    by = {p.stage_index: p for p in plans}
    if 1 in by and 2 in by and by[1].resolution != by[2].resolution:
        raise ValueError("stages 1 and 2 must share a resolution")
    if 3 in by and 4 in by and by[3].resolution != by[4].resolution:
        raise ValueError("stages 3 and 4 must share a resolution")
    low = [by[i].resolution for i in (1, 2) if i in by]
    high = [by[i].resolution for i in (3, 4) if i in by]
    if low and high and not min(high) > max(low):
        raise ValueError("stages 3-4 must use a strictly larger resolution than stages 1-2")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_proba(model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(images[i:i + batch_size]).data.astype(np.float64)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            out.append(p / p.sum(axis=1, keepdims=True))
    if was_training:
        model.train()
    return np.concatenate(out) if out else np.zeros((0, 0))


def accuracy(model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_proba(model, images).argmax(axis=1) == labels))


def mean_loss(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Eval-mode mean cross-entropy."""
    was_training = model.training
    model.eval()
    total = 0.0
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            xb = images[i:i + batch_size]
            total += cross_entropy(model(xb), labels[i:i + batch_size]).item() * len(xb)
    if was_training:
        model.train()
    return total / len(images)


def tta_predict(model, images: np.ndarray, tta_epochs: int, rng: np.random.Generator,
                ops: Sequence[str] = ("colorjitter", "randomcrop"), cfg: AugmentConfig = AugmentConfig(),
                augment_fn: Callable | None = None) -> np.ndarray:
    """Mean softmax over the clean images plus ``tta_epochs`` augmented copies."""
    if tta_epochs < 0:
        raise ValueError("tta_epochs must be nonnegative")
    probs = predict_proba(model, images)
    if tta_epochs == 0:
        return probs
    total = probs.copy()
    for _ in range(tta_epochs):
        aug = augment_fn(images, rng) if augment_fn is not None else augment_batch(images, ops, rng, cfg)
        total += predict_proba(model, aug)
    return total / (tta_epochs + 1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float


@dataclass
class StageResult:
    stage_index: int
    loss_mode: str
    rows: list[EpochRow] = field(default_factory=list)
    final_train_loss: float = float("nan")
    val_acc: float = float("nan")
    epochs: int = 0
    terminated_by_scheduler: bool = False
    state: dict | None = field(default=None, repr=False)


@dataclass
class DfpResult:
    model: object
    stages: list[StageResult]

    def checkpoint(self, stage_index: int) -> dict:
        for s in self.stages:
            if s.stage_index == stage_index:
                return s.state
        raise KeyError(stage_index)


def _epoch_lr(plan: StagePlan, state: AlrsState, epoch: int) -> float:
    if plan.scheduler == "alrs":
        return state.current_lr
    if epoch <= plan.warmup_epochs:
        return state.warmup_lr(epoch)
    return cosine_step(epoch - plan.warmup_epochs, plan.cosine_epochs - plan.warmup_epochs, plan.lr, plan.min_lr)


def train_stage(model, plan: StagePlan, images: np.ndarray, labels: np.ndarray, val_images: np.ndarray,
                val_labels: np.ndarray, distill: DistillConfig = DistillConfig(), seed: int = 0,
                augment_cfg: AugmentConfig = AugmentConfig(),
                on_epoch: Callable[[EpochRow], None] | None = None) -> StageResult:
    """Train one stage in place until the scheduler terminates or the cap hits."""
    num_classes = model.spec.num_classes
    model.train()
    opt = make_optimizer(plan.optimizer, model.parameters(), plan.lr, plan.weight_decay, plan.momentum)
    teacher = TeacherState(model, distill.ema_decay) if plan.loss_mode == "MESA" else None
    state = plan.new_alrs()
    result = StageResult(plan.stage_index, plan.loss_mode)
    bad_epochs = 0
    n = len(labels)
    epochs_total = plan.max_epochs if plan.scheduler == "alrs" else min(plan.max_epochs, plan.cosine_epochs + 1)

    for epoch in range(epochs_total):
        lr = _epoch_lr(plan, state, epoch)
        opt.lr = lr
        rng = np.random.default_rng([seed, plan.stage_index, epoch])
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - 1, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            if len(idx) < 2:
                continue
            xb = augment_batch(images[idx], plan.augmentations, rng, augment_cfg)
            yb = labels[idx]
            targets = yb
            if plan.cutmix_prob > 0:
                xb, ya, yb2, lam = cutmix(xb, yb, plan.cutmix_prob, plan.cutmix_beta, rng)
                if lam < 1.0:
                    targets = mixed_targets(ya, yb2, lam, num_classes)
            if lr <= 0:
                with T.no_grad():
                    losses.append(cross_entropy(model(xb), targets).item())
                continue
            teacher_logits = teacher.logits(xb) if teacher is not None else None
            logits = model(xb)
            if teacher_logits is not None:
                loss = mesa_loss(logits, teacher_logits, targets, distill)
            else:
                loss = cross_entropy(logits, targets)
            opt.zero_grad()
            T.backward(loss)
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                log.warning("stage %d epoch %d: %s", plan.stage_index, epoch, exc)
                losses.append(float("nan"))
                continue
            if teacher is not None:
                ema_update(teacher, model)
            losses.append(loss.item())

        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        val_acc = accuracy(model, val_images, val_labels) if len(val_labels) else float("nan")
        row = EpochRow(epoch, lr, epoch_loss, val_acc)
        result.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("stage %d epoch %d lr %.3g loss %.4f val %.3f", plan.stage_index, epoch, lr, epoch_loss, val_acc)

        if not math.isfinite(epoch_loss):
            bad_epochs += 1
            if bad_epochs >= 3:
                raise StageDivergedError(
                    f"stage {plan.stage_index}: non-finite loss for 3 consecutive epochs (last epoch {epoch}, lr {lr})")
            continue
        bad_epochs = 0
        if plan.scheduler == "alrs":
            _, terminate = alrs_step(state, epoch_loss)
            if terminate:
                result.terminated_by_scheduler = True
                break
    result.epochs = len(result.rows)
    finite = [r.train_loss for r in result.rows if math.isfinite(r.train_loss)]
    result.final_train_loss = finite[-1] if finite else float("nan")
    result.val_acc = result.rows[-1].val_acc if result.rows else float("nan")
    result.state = model.state_dict()
    return result


def run_dfp(plans: Sequence[StagePlan], dataset: SyntheticDomainDataset, model, split: Split,
            distill: DistillConfig = DistillConfig(), seed: int = 0, augment_cfg: AugmentConfig = AugmentConfig(),
            on_stage_end: Callable[[StageResult], None] | None = None,
            on_epoch: Callable[[int, EpochRow], None] | None = None) -> DfpResult:
    """Run the given stages in order on ``split.train``, validating on ``split.val``."""
    validate_plans(plans)
    results = []
    for plan in plans:
        imgs = dataset.images(plan.resolution)
        cb = (lambda row, k=plan.stage_index: on_epoch(k, row)) if on_epoch is not None else None
        res = train_stage(model, plan, imgs[split.train], dataset.labels[split.train], imgs[split.val],
                          dataset.labels[split.val], distill, seed, augment_cfg, cb)
        log.info("stage %d (%s): %d epochs, final loss %.4f, val acc %.3f", plan.stage_index, plan.loss_mode,
                 res.epochs, res.final_train_loss, res.val_acc)
        results.append(res)
        if on_stage_end is not None:
            on_stage_end(res)
    return DfpResult(model, results)


def write_metrics_csv(path, rows: Sequence[EpochRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_acc"])
        for r in rows:
            w.writerow([r.epoch, repr(float(r.lr)), repr(float(r.train_loss)), repr(float(r.val_acc))])


# ---------------------------------------------------------------------------
# leave-one-domain-out
# ---------------------------------------------------------------------------

@dataclass
class LodoReport:
    rows: list[tuple[int, float]]

    @property
    def average(self) -> float:
        return float(np.mean([acc for _, acc in self.rows]))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["held_out_domain", "accuracy"])
            for d, acc in self.rows:
                w.writerow([d, repr(acc)])
            w.writerow(["average", repr(self.average)])


def leave_one_domain_out_eval(model_factory: Callable[[], object], dataset: SyntheticDomainDataset,
                              plans: Sequence[StagePlan], distill: DistillConfig = DistillConfig(), seed: int = 0,
                              val_fraction: float = 0.1, eval_resolution: int | None = None) -> LodoReport:
    """Train on all-but-one domain, keep the stage checkpoint with the best
    validation accuracy, and score it on the held-out domain."""
    if dataset.num_domains < 2:
        raise ValueError("leave-one-domain-out needs at least 2 domains")
    rows = []
    for d in range(dataset.num_domains):
        split = domain_split(dataset, d, val_fraction, seed)
        model = model_factory()
        res = eval_resolution
        if plans:
            result = run_dfp(plans, dataset, model, split, distill, seed)
            best = max(result.stages, key=lambda s: (s.val_acc if math.isfinite(s.val_acc) else -1.0))
            model.load_state_dict(best.state)
            if res is None:
                res = next(p.resolution for p in plans if p.stage_index == best.stage_index)
        imgs = dataset.images(res)
        rows.append((d, accuracy(model, imgs[split.test], dataset.labels[split.test])))
        log.info("held-out domain %d: accuracy %.3f", d, rows[-1][1])
    return LodoReport(rows)
