"""Three-stage training driver.

Stage 1 trains the classification branch on the saliency loss, stage 2 the
detection branch on the crop loss, stage 3 both jointly on their sum. The
Gumbel temperature anneals over stages 2 and 3.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..data import SampleRecord, stack_images
from ..sampling import TemperatureSchedule, tau_at
from ..tensor import Tensor, no_grad
from .augment import AugmentRanges, augment
from .losses import ClassWeights, compute_class_weights, loss_cls, loss_rpn
from .model import CLS_GROUPS, PARAM_GROUPS, Model

log = logging.getLogger(__name__)

DET_GROUPS = tuple(g for g in PARAM_GROUPS if g not in CLS_GROUPS)


class TrainingDiverged(RuntimeError):
    """A non-finite loss; the model holds the last good parameters."""

    def __init__(self, message: str, log_rows: list):
        super().__init__(message)
        self.log_rows = log_rows


@dataclass
class TrainConfig:
    stage_steps: tuple[int, int, int] = (600, 200, 200)
    learning_rates: tuple[float, float, float] = (1e-3, 1e-3, 3e-4)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    batch_size: int = 8
    tau_start: float = 1.0
    tau_end: float = 0.001
    tau_reset_per_stage: bool = False
    freeze_cls_in_stage2: bool = True
    augment: bool = True
    augment_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    seed: int = 0

    def __post_init__(self):
        self.stage_steps = tuple(int(s) for s in self.stage_steps)
        self.learning_rates = tuple(float(v) for v in self.learning_rates)
        if isinstance(self.augment_ranges, dict):
            self.augment_ranges = AugmentRanges(**self.augment_ranges)
        if len(self.stage_steps) != 3 or len(self.learning_rates) != 3:
            raise ValueError("need exactly three stage step counts and learning rates")
        if any(s < 0 for s in self.stage_steps):
            raise ValueError(f"stage steps must be non-negative, got {self.stage_steps}")
        if any(not lr >= 0 for lr in self.learning_rates):
            raise ValueError(f"learning rates must be non-negative, got {self.learning_rates}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def schedule_for(self, stage: int) -> tuple[TemperatureSchedule, int]:
        """Temperature schedule active in ``stage`` and the step offset into it.

        The last annealed training step runs at exactly ``tau_end``.
        """
        s2, s3 = self.stage_steps[1], self.stage_steps[2]
        if self.tau_reset_per_stage:
            steps = s2 if stage == 2 else s3
            return TemperatureSchedule(self.tau_start, self.tau_end, max(steps - 1, 1)), 0
        offset = 0 if stage == 2 else s2
        return TemperatureSchedule(self.tau_start, self.tau_end, max(s2 + s3 - 1, 1)), offset


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.wd:
                p.data -= self.lr * self.wd * p.data
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class LogRow:
    step: int
    stage: int
    tau: float
    loss_cls: float
    loss_rpn: float


class _Batches:
    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return idx


def _batch(records: Sequence[SampleRecord], idx: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    imgs = stack_images([records[i] for i in idx])
    if config.augment:
        imgs = np.stack([augment(im, rng, config.augment_ranges) for im in imgs])
    labels = np.stack([records[i].labels for i in idx]).astype(np.float64)
    return imgs, labels


def train_step(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    stage: int,
    weights: ClassWeights,
    tau: float,
    rng: np.random.Generator,
    freeze_cls: bool = True,
) -> tuple[Tensor, float, float]:
    """Forward one batch and return ``(total_loss, loss_cls, loss_rpn)``; nan marks an unused loss."""
    x = Tensor(images)
    lc = lr = None
    if stage == 1:
        _, y_logit, _ = model.forward_cls(x)
        lc = loss_cls(y_logit, labels, weights)
        total = lc
    else:
        if stage == 2 and freeze_cls:
            with no_grad():
                feats = model.features(x)
        else:
            sal, y_logit, feats = model.forward_cls(x)
            if stage == 3:
                lc = loss_cls(y_logit, labels, weights)
        det = model.forward_det(x, feats, tau, rng)
        lr = loss_rpn(det.z_logit, labels, weights)
        total = lr if lc is None else lc + lr
    return total, (lc.item() if lc is not None else math.nan), (lr.item() if lr is not None else math.nan)


def train(
    records: Sequence[SampleRecord],
    config: TrainConfig,
    model: Model,
    on_stage_end: Callable[[int, Model], None] | None = None,
    weights: ClassWeights | None = None,
) -> list[LogRow]:
    """Train ``model`` in place and return the per-step log.

    Class weights come from ``records`` unless given explicitly.
    """
    if not records:
        raise ValueError("cannot train on an empty dataset")
    if weights is None:
        weights = compute_class_weights(records)
    rng = np.random.default_rng(config.seed)
    batches = _Batches(len(records), config.batch_size, rng)
    rows: list[LogRow] = []
    step = 0
    for stage in (1, 2, 3):
        n_steps = config.stage_steps[stage - 1]
        if stage == 1:
            groups = CLS_GROUPS
        elif stage == 2:
            groups = DET_GROUPS if config.freeze_cls_in_stage2 else PARAM_GROUPS
        else:
            groups = PARAM_GROUPS
        opt = Adam(
            model.parameters(groups),
            config.learning_rates[stage - 1],
            config.beta1,
            config.beta2,
            config.eps,
            config.weight_decay,
        )
        schedule, offset = config.schedule_for(stage) if stage > 1 else (None, 0)
        for s in range(n_steps):
            tau = tau_at(schedule, offset + s) if schedule is not None else math.nan
            images, labels = _batch(records, batches.next(), config, rng)
            good = model.state()
            for p in model.parameters():
                p.grad = None
            total, lc, lr = train_step(model, images, labels, stage, weights, tau, rng, config.freeze_cls_in_stage2)
            if not math.isfinite(total.item()):
                model.load_state(good)
                raise TrainingDiverged(f"non-finite loss at step {step} (stage {stage})", rows)
            total.backward()
            opt.step()
            rows.append(LogRow(step, stage, tau, lc, lr))
            if s % 50 == 0:
                log.info("stage %d step %d tau %.4g loss_cls %.4f loss_rpn %.4f", stage, step, tau, lc, lr)
            step += 1
        if on_stage_end is not None:
            on_stage_end(stage, model)
    return rows


LOG_FIELDS = ("step", "stage", "tau", "loss_cls", "loss_rpn")


def write_log_csv(path: str | Path, rows: Sequence[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_FIELDS)
        for r in rows:
            wr.writerow([r.step, r.stage, repr(r.tau), repr(r.loss_cls), repr(r.loss_rpn)])
