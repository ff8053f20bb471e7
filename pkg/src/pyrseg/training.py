"""Single-model training with validation checkpointing, and the competitive training scheme."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import VolumeCase, augment_flip, normalize_slice, slice_volume
from .losses import AUX_WEIGHT, OHNEM_FLOOR, total_loss
from .network import Model, ModelCheckpoint, checkpoint_of, forward
from .optim import AdamState, adam_step, zero_grads

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-3
    epochs: int = 180
    validate_every: int = 30
    loss_mode: str = "ohnem"
    aux_weight: float = AUX_WEIGHT
    seed: int = 0
    flip_probability: float = 0.5
    ohnem_floor: int = OHNEM_FLOOR

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.validate_every < 1 or self.epochs % self.validate_every:
            raise ValueError(f"epochs ({self.epochs}) must be a positive multiple of validate_every ({self.validate_every})")
        if self.loss_mode not in ("ohnem", "weighted_ce"):
            raise ValueError(f"loss_mode must be 'ohnem' or 'weighted_ce', got {self.loss_mode!r}")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")


@dataclass(frozen=True)
class CtsConfig:
    num_competitors: int = 3
    stage_epochs: int = 30
    num_stages: int = 6
    base_seed: int = 0

    def check(self, train_cfg: TrainConfig, allow_single: bool = False) -> None:
        if self.num_competitors < (1 if allow_single else 2):
            raise ValueError("num_competitors must be >= 2")
        if self.stage_epochs < 1 or self.num_stages < 1:
            raise ValueError("stage_epochs and num_stages must be positive")
        if self.stage_epochs * self.num_stages != train_cfg.epochs:
            raise ValueError(
                f"stage_epochs x num_stages = {self.stage_epochs * self.num_stages} != epochs {train_cfg.epochs}"
            )


@dataclass
class SliceSet:
    """Normalised image slices and labels stacked as (S, H, W)."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_cases(cls, cases: Sequence[VolumeCase]) -> "SliceSet":
        imgs, labs = [], []
        for case in cases:
            if case.label is None:
                raise ValueError(f"case {case.id!r} has no label")
            for img, lab in slice_volume(case):
                imgs.append(normalize_slice(img))
                labs.append(lab)
        if not imgs:
            raise ValueError("no slices")
        return cls(np.stack(imgs).astype(np.float32), np.stack(labs).astype(np.uint8))


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float | None = None


def write_history_csv(history: Sequence[HistoryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss"))
        for row in history:
            w.writerow((row.epoch, repr(row.train_loss), "" if row.val_loss is None else repr(row.val_loss)))


class Trainer:
    """Owns one model, its optimizer state and its private random stream."""

    def __init__(self, model: Model, train_set: SliceSet, val_set: SliceSet, cfg: TrainConfig, seed: int):
        if len(train_set) == 0:
            raise TrainingError("empty training split")
        if len(val_set) == 0:
            raise TrainingError("empty validation split")
        self.model = model
        self.params = model.parameters()
        self.train_set, self.val_set, self.cfg = train_set, val_set, cfg
        self.rng = np.random.default_rng(seed)
        self.adam = AdamState.for_params(self.params)
        self.epoch = 0

    def _loss(self, images: np.ndarray, labels: np.ndarray, training: bool) -> T.Tensor:
        x = T.Tensor(images[:, None])
        main, aux = forward(self.model, x, training=training, rng=self.rng if training else None)
        return total_loss(main, aux, labels, self.cfg.loss_mode, self.cfg.aux_weight, self.cfg.ohnem_floor)

    def run_epoch(self) -> float:
        self.epoch += 1
        cfg, data = self.cfg, self.train_set
        order = self.rng.permutation(len(data))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            imgs, labs = [], []
            for i in idx:
                img, lab = augment_flip(data.images[i], data.labels[i], self.rng, cfg.flip_probability)
                imgs.append(img)
                labs.append(lab)
            loss = self._loss(np.stack(imgs), np.stack(labs), training=True)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {self.epoch}, batch {b}")
            T.backward(loss)
            adam_step(self.params, [p.grad for p in self.params], self.adam, cfg.learning_rate)
            zero_grads(self.params)
            total += value * len(idx)
            seen += len(idx)
        return total / seen

    def validate(self) -> float:
        bs, data = self.cfg.batch_size, self.val_set
        total = 0.0
        for start in range(0, len(data), bs):
            sl = slice(start, start + bs)
            loss = self._loss(data.images[sl], data.labels[sl], training=False)
            total += loss.item() * len(data.images[sl])
        value = total / len(data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite validation loss at epoch {self.epoch}")
        return value


def train(model: Model, train_set: SliceSet, val_set: SliceSet, cfg: TrainConfig):
    """Train one model; returns (best checkpoint, per-epoch history).

    The best checkpoint is the one with the lowest validation loss; ties keep the earliest.
    """
    trainer = Trainer(model, train_set, val_set, cfg, cfg.seed)
    history: list[HistoryRow] = []
    best: ModelCheckpoint | None = None
    for _ in range(cfg.epochs):
        row = HistoryRow(trainer.epoch + 1, trainer.run_epoch())
        if trainer.epoch % cfg.validate_every == 0:
            row.val_loss = trainer.validate()
            if best is None or row.val_loss < best.val_loss:
                best = checkpoint_of(model, trainer.epoch, row.val_loss)
            log.info("epoch %d train %.5f val %.5f", row.epoch, row.train_loss, row.val_loss)
        history.append(row)
    return best, history


@dataclass
class StageRecord:
    stage: int
    competitor: int
    val_loss: float
    winner: bool


@dataclass
class CtsResult:
    winner: ModelCheckpoint
    stage_log: list[StageRecord]
    histories: list[list[HistoryRow]] = field(default_factory=list)


def write_stage_log_csv(stage_log: Sequence[StageRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stage", "competitor", "val_loss", "winner"))
        for r in stage_log:
            w.writerow((r.stage, r.competitor, repr(r.val_loss), int(r.winner)))


def broadcast(src: Trainer, dst: Trainer) -> None:
    """Copy parameters and Adam moments from the winner into a competitor."""
    for name, p in src.model.params.items():
        dst.model.params[name].data[...] = p.data
    dst.adam.copy_from(src.adam)


def train_cts(competitors: Sequence[Model], train_set: SliceSet, val_set: SliceSet,
              cfg: TrainConfig, cts: CtsConfig, threads: int = 1, _allow_single: bool = False,
              on_stage: Callable[[int, list[Trainer]], None] | None = None) -> CtsResult:
    """Competitive training: every stage each competitor trains, the lowest validation loss wins,
    and the winner's weights and optimizer moments are copied into all competitors.

    ``on_stage(stage, trainers)`` runs after each broadcast.
    """
    cts.check(cfg, allow_single=_allow_single)
    if len(competitors) != cts.num_competitors:
        raise ValueError(f"expected {cts.num_competitors} competitors, got {len(competitors)}")
    fp = competitors[0].config.fingerprint()
    if any(m.config.fingerprint() != fp for m in competitors):
        raise ValueError("all competitors must share one network config")

    trainers = [Trainer(m, train_set, val_set, cfg, cts.base_seed + i) for i, m in enumerate(competitors)]
    for t in trainers[1:]:
        broadcast(trainers[0], t)

    histories: list[list[HistoryRow]] = [[] for _ in trainers]
    stage_log: list[StageRecord] = []
    best: ModelCheckpoint | None = None

    def run_stage(i: int) -> float:
        t = trainers[i]
        for _ in range(cts.stage_epochs):
            histories[i].append(HistoryRow(t.epoch + 1, t.run_epoch()))
        val = t.validate()
        histories[i][-1].val_loss = val
        return val

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for stage in range(cts.num_stages):
            if pool is None:
                losses = [run_stage(i) for i in range(len(trainers))]
            else:
                losses = list(pool.map(run_stage, range(len(trainers))))
            win = min(range(len(losses)), key=lambda i: (losses[i], i))
            for i, v in enumerate(losses):
                stage_log.append(StageRecord(stage, i, v, i == win))
            log.info("stage %d losses %s winner %d", stage, ["%.5f" % v for v in losses], win)
            if best is None or losses[win] < best.val_loss:
                best = checkpoint_of(trainers[win].model, trainers[win].epoch, losses[win])
            for i, t in enumerate(trainers):
                if i != win:
                    broadcast(trainers[win], t)
            if on_stage is not None:
                on_stage(stage, trainers)
    finally:
        if pool is not None:
            pool.shutdown()
    return CtsResult(best, stage_log, histories)

