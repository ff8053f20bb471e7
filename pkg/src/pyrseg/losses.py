"""Cross-entropy objectives and online hard negative example mining."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

OHNEM_FLOOR = 5
AUX_WEIGHT = 0.4


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    if logits.data.ndim != 4:
        raise ValueError(f"logits must be (N,K,H,W), got {logits.shape}")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} != {(n, h, w)}")
    labels = labels.astype(np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label values must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def _masked_ce(logits: Tensor, labels: np.ndarray, voxel_weight: np.ndarray) -> Tensor:
    """sum(voxel_weight * -log p[label]); weights carry the normalisation."""
    logp = _log_softmax(logits.data)
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    nll = -np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    value = np.asarray((voxel_weight * nll).sum(), dtype=logits.data.dtype)

    def backward(g):
        grad = (np.exp(logp) - onehot) * voxel_weight[:, None] * float(g)
        return (grad.astype(logits.data.dtype),)

    return Tensor.from_op(value, (logits,), backward)


def weighted_cross_entropy(logits: Tensor, labels, class_weights) -> Tensor:
    """Mean over voxels of w[label] * -log softmax(logits)[label]."""
    labels = _check_labels(logits, labels)
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (logits.shape[1],):
        raise ValueError(f"need {logits.shape[1]} class weights, got {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("class weights must be non-negative")
    return _masked_ce(logits, labels, weights[labels] / labels.size)


def inverse_frequency_weights(labels, num_classes: int) -> np.ndarray:
    """w_k = total / (K * count_k), clamped to [0.1, 10]; absent classes get 0."""
    counts = np.bincount(np.asarray(labels, dtype=np.intp).ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (num_classes * np.maximum(counts, 1)), 0.0)
    return np.where(counts > 0, np.clip(w, 0.1, 10.0), 0.0)


@dataclass
class OhnemSelection:
    c_p: int
    c_n: int
    c_hn: int
    selected_bg_indices: np.ndarray  # flat indices, highest score first


def hard_negative_count(c_p: int, c_n: int, floor: int = OHNEM_FLOOR) -> int:
    return int(min(max(2 * c_p, min(floor, c_n // 4)), c_n))


def ohnem_select(fg_probs, labels, floor: int = OHNEM_FLOOR) -> OhnemSelection:
    """Pick the background voxels scoring highest as foreground; ties go to the lower flat index."""
    probs = np.asarray(fg_probs).ravel()
    lab = np.asarray(labels).ravel()
    if probs.shape != lab.shape:
        raise ValueError(f"probabilities ({probs.size}) and labels ({lab.size}) differ in size")
    bg = np.flatnonzero(lab == 0)
    c_n = bg.size
    c_p = lab.size - c_n
    c_hn = hard_negative_count(c_p, c_n, floor)
    order = np.argsort(-probs[bg], kind="stable")[:c_hn]
    return OhnemSelection(c_p, c_n, c_hn, bg[order])


def select_batch(logits: Tensor, labels, floor: int = OHNEM_FLOOR) -> list[OhnemSelection]:
    labels = _check_labels(logits, labels)
    probs = np.exp(_log_softmax(logits.data))
    fg = probs[:, 1:].sum(axis=1) if probs.shape[1] > 2 else probs[:, 1]
    return [ohnem_select(fg[i], labels[i], floor) for i in range(labels.shape[0])]


def ohnem_loss(logits: Tensor, labels, floor: int = OHNEM_FLOOR,
               selections: Sequence[OhnemSelection] | None = None) -> Tensor:
    """Per slice: plain CE averaged over all foreground plus the selected hard negatives; mean over slices.

    The selection is a constant of the backward pass. Passing ``selections``
    freezes it (used by finite-difference checks).
    """
    labels = _check_labels(logits, labels)
    n = labels.shape[0]
    if selections is None:
        selections = select_batch(logits, labels, floor)
    weight = np.zeros(labels.shape, dtype=np.float64)
    for i, sel in enumerate(selections):
        mask = (labels[i] != 0).ravel()
        mask[sel.selected_bg_indices] = True
        count = int(mask.sum())
        if count:
            weight[i].reshape(-1)[mask] = 1.0 / (count * n)
    return _masked_ce(logits, labels, weight)


def total_loss(main_logits: Tensor, aux_logits: Tensor, labels, mode: str = "ohnem",
               aux_weight: float = AUX_WEIGHT, floor: int = OHNEM_FLOOR,
               selections: Sequence[OhnemSelection] | None = None) -> Tensor:
    if aux_weight < 0:
        raise ValueError("aux_weight must be >= 0")
    k = main_logits.shape[1]
    weights = inverse_frequency_weights(labels, k)
    if mode == "ohnem":
        main = ohnem_loss(main_logits, labels, floor, selections)
    elif mode == "weighted_ce":
        main = weighted_cross_entropy(main_logits, labels, weights)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    aux = weighted_cross_entropy(aux_logits, labels, weights)
    return T.add(main, T.scale(aux, aux_weight))
