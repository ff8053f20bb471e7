"""Dataset directories, the train/compete/predict/evaluate pipeline shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import VolumeCase, generate_phantom, normalize_slice, read_volume, split_dataset, write_volume
from .metrics import CaseMetrics, MetricsReport, evaluate_case, evaluate_set, remove_small_components
from .network import Model, ModelCheckpoint, build, forward, model_from_checkpoint
from .training import CtsResult, HistoryRow, SliceSet, train, train_cts

log = logging.getLogger(__name__)

VOLUME_SUFFIX = ".segv"


def generate_dataset(count: int, size, seed: int) -> list[VolumeCase]:
    """Phantom i comes from its own stream spawned off ``seed``, so cases do not depend on ``count``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(count)
    return [generate_phantom(size, np.random.default_rng(s), f"case_{i:03d}") for i, s in enumerate(streams)]


def write_dataset(cases: Sequence[VolumeCase], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for case in cases:
        path = out / f"{case.id}{VOLUME_SUFFIX}"
        write_volume(case, path)
        paths.append(path)
    return paths


def load_dataset(data_dir) -> list[VolumeCase]:
    """Every volume in the directory, ordered by file name."""
    paths = sorted(Path(data_dir).glob(f"*{VOLUME_SUFFIX}"))
    if not paths:
        raise FileNotFoundError(f"no {VOLUME_SUFFIX} volumes in {data_dir}")
    return [read_volume(p) for p in paths]


@dataclass
class Partition:
    train: list[VolumeCase]
    validation: list[VolumeCase]
    test: list[VolumeCase]


def partition(cases: Sequence[VolumeCase], cfg: RunConfig) -> Partition:
    by_id = {c.id: c for c in cases}
    split = split_dataset(sorted(by_id), cfg.data.split, cfg.data.split_seed)
    pick = lambda ids: [by_id[i] for i in sorted(ids)]
    return Partition(pick(split.train), pick(split.validation), pick(split.test))


def _slice_sets(part: Partition) -> tuple[SliceSet, SliceSet]:
    if not part.train:
        raise ValueError("training split is empty")
    if not part.validation:
        raise ValueError("validation split is empty; add volumes or raise data.split's validation ratio")
    return SliceSet.from_cases(part.train), SliceSet.from_cases(part.validation)


def run_train(cfg: RunConfig, part: Partition) -> tuple[ModelCheckpoint, list[HistoryRow]]:
    train_set, val_set = _slice_sets(part)
    model = build(cfg.network, np.random.default_rng(cfg.train.seed))
    return train(model, train_set, val_set, cfg.train)


def run_compete(cfg: RunConfig, part: Partition, threads: int = 1) -> CtsResult:
    train_set, val_set = _slice_sets(part)
    # every competitor starts from the same weights; only the training streams differ
    competitors = [build(cfg.network, np.random.default_rng(cfg.cts.base_seed)) for _ in range(cfg.cts.num_competitors)]
    return train_cts(competitors, train_set, val_set, cfg.train, cfg.cts, threads=threads,
                     _allow_single=cfg.cts.num_competitors == 1)


def predict_volume(model: Model, case: VolumeCase, cfg: RunConfig, batch: int = 16) -> np.ndarray:
    """Per-slice argmax reassembled into a (dx, dy, dz) 0/1 label, then small components removed."""
    dx, dy, dz = case.image.shape
    if (dx, dy) != model.config.input_size:
        raise ValueError(f"volume {case.id!r} slices are {dx}x{dy}, network expects "
                         f"{model.config.input_size[0]}x{model.config.input_size[1]}")
    slices = np.stack([normalize_slice(case.image[:, :, k]) for k in range(dz)])
    label = np.zeros((dx, dy, dz), dtype=np.uint8)
    for start in range(0, dz, batch):
        main, _ = forward(model, T.Tensor(slices[start:start + batch, None]))
        fg = main.data.argmax(axis=1) != 0
        label[:, :, start:start + batch] = fg.transpose(1, 2, 0)
    if cfg.metrics.postprocess:
        label = remove_small_components(label, cfg.metrics.connectivity, cfg.metrics.min_fraction).astype(np.uint8)
    return label


def evaluate_pairs(pairs: Sequence[tuple[str, np.ndarray | None, np.ndarray | None, tuple]], cfg: RunConfig,
                   threads: int = 1) -> MetricsReport:
    """``pairs`` holds (case, pred, gt, spacing); a missing mask becomes a flagged case."""
    def one(item) -> CaseMetrics:
        name, pred, gt, spacing = item
        if pred is None or gt is None:
            return CaseMetrics(name, flags=["missing prediction or ground truth label"])
        return evaluate_case(pred, gt, spacing, name, postprocess=cfg.metrics.postprocess,
                             connectivity=cfg.metrics.connectivity, min_fraction=cfg.metrics.min_fraction)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cases = list(pool.map(one, pairs))
    else:
        cases = [one(p) for p in pairs]
    return evaluate_set(cases)


def evaluate_model(model: Model, cases: Sequence[VolumeCase], cfg: RunConfig, threads: int = 1) -> MetricsReport:
    pairs = [(c.id, predict_volume(model, c, cfg), c.label, c.spacing) for c in cases]
    return evaluate_pairs(pairs, cfg, threads)


def evaluate_checkpoint(ckpt: ModelCheckpoint, cases: Sequence[VolumeCase], cfg: RunConfig,
                        threads: int = 1) -> MetricsReport:
    return evaluate_model(model_from_checkpoint(ckpt, cfg.network), cases, cfg, threads)
