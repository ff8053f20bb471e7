"""Finite-difference checks for every differentiable op and for a micro network."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import select_batch, total_loss, weighted_cross_entropy
from .network import NetworkConfig, build, forward
from .tensor import ConvSpec, Tensor

TOLERANCE = 1e-3
STEP = 1e-3

MICRO_CONFIG = NetworkConfig(
    stage_channels=(4, 8),
    blocks_per_stage=(1, 1),
    stage_dilations=(1, 2),
    output_stride=2,
    pyramid_bins=(1, 2, 3, 6),
    dropout_rate=0.1,
    num_classes=2,
    input_size=(16, 16),
    head_channels=4,
)


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    """Scalar <out, proj>; a random projection exposes every output element."""
    p = Tensor(proj)
    return Tensor.from_op(
        np.asarray((out.data.astype(np.float64) * proj).sum(), dtype=out.data.dtype),
        (out, p), lambda g: (g * proj, None))


def _op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def rand(*shape):
        return Tensor(rng.uniform(-1, 1, size=shape))

    def proj_for(shape):
        return rng.uniform(-1, 1, size=shape).astype(np.float32)

    def conv_case(stride, pad, dil):
        x, w, b = rand(2, 3, 8, 8), rand(4, 3, 3, 3), rand(4)
        spec = ConvSpec((4, 3, 3, 3), stride, pad, dil)
        proj = proj_for(T.conv2d(x, spec, w, b).shape)
        fx = lambda t: _projected(T.conv2d(t, spec, w, b), proj)
        fw = lambda t: _projected(T.conv2d(x, spec, t, b), proj)
        fb = lambda t: _projected(T.conv2d(x, spec, w, t), proj)
        return lambda: max(T.finite_diff_check(fx, x, STEP), T.finite_diff_check(fw, w, STEP),
                           T.finite_diff_check(fb, b, STEP))

    def unary(op, shape):
        x = rand(*shape)
        proj = proj_for(op(x).shape)
        return lambda: T.finite_diff_check(lambda t: _projected(op(t), proj), x, STEP)

    def relu_case():
        # keep samples away from the kink so the central difference is valid
        x = Tensor(rng.uniform(0.05, 1, size=(2, 3, 6, 6)) * rng.choice([-1, 1], size=(2, 3, 6, 6)))
        proj = proj_for(x.shape)
        return lambda: T.finite_diff_check(lambda t: _projected(T.relu(t), proj), x, STEP)

    def add_case():
        a, b = rand(2, 3, 5, 5), rand(2, 3, 5, 5)
        proj = proj_for(a.shape)
        return lambda: max(T.finite_diff_check(lambda t: _projected(T.add(t, b), proj), a, STEP),
                           T.finite_diff_check(lambda t: _projected(T.add(a, t), proj), b, STEP))

    def concat_case():
        a, b = rand(2, 2, 4, 4), rand(2, 3, 4, 4)
        proj = proj_for((2, 5, 4, 4))
        return lambda: max(T.finite_diff_check(lambda t: _projected(T.concat_channels([t, b]), proj), a, STEP),
                           T.finite_diff_check(lambda t: _projected(T.concat_channels([a, t]), proj), b, STEP))

    def dropout_case():
        x = rand(2, 3, 6, 6)
        seed = int(rng.integers(1 << 31))
        proj = proj_for(x.shape)
        # fresh stream per evaluation so every perturbation sees the same mask
        f = lambda t: _projected(T.dropout(t, 0.3, np.random.default_rng(seed), True), proj)
        return lambda: T.finite_diff_check(f, x, STEP)

    def wce_case():
        logits = rand(2, 2, 6, 6)
        labels = rng.integers(0, 2, size=(2, 6, 6))
        return lambda: T.finite_diff_check(lambda t: weighted_cross_entropy(t, labels, (0.7, 1.6)), logits, STEP)

    def ohnem_case():
        logits, aux = rand(2, 2, 8, 8), rand(2, 2, 8, 8)
        labels = (rng.random((2, 8, 8)) < 0.15).astype(np.int64)
        frozen = select_batch(logits, labels)
        f = lambda t: total_loss(t, aux, labels, "ohnem", 0.4, selections=frozen)
        return lambda: T.finite_diff_check(f, logits, STEP)

    return {
        "conv2d": conv_case(1, 1, 1),
        "conv2d stride 2": conv_case(2, 1, 1),
        "conv2d dilation 2": conv_case(1, 2, 2),
        "conv2d 1x1": (lambda: _pointwise(rng)),
        "relu": relu_case(),
        "add": add_case(),
        "adaptive_avg_pool2d": unary(lambda t: T.adaptive_avg_pool2d(t, (3, 2)), (2, 3, 7, 8)),
        "upsample_bilinear": unary(lambda t: T.upsample_bilinear(t, (7, 5)), (2, 3, 3, 2)),
        "concat_channels": concat_case(),
        "dropout": dropout_case(),
        "weighted_cross_entropy": wce_case(),
        "total_loss (ohnem, frozen selection)": ohnem_case(),
    }


def _pointwise(rng):
    x = Tensor(rng.uniform(-1, 1, size=(2, 5, 4, 4)))
    w = Tensor(rng.uniform(-1, 1, size=(3, 5, 1, 1)))
    spec = ConvSpec((3, 5, 1, 1))
    proj = rng.uniform(-1, 1, size=(2, 3, 4, 4)).astype(np.float32)
    return max(T.finite_diff_check(lambda t: _projected(T.conv2d(t, spec, w), proj), x, STEP),
               T.finite_diff_check(lambda t: _projected(T.conv2d(x, spec, t), proj), w, STEP))


def network_check(rng: np.random.Generator, config: NetworkConfig = MICRO_CONFIG,
                  mode: str = "ohnem", samples: int | None = None) -> float:
    """Total loss w.r.t. the input and every parameter tensor.

    ``samples`` limits the check to that many random elements per tensor,
    which keeps the default-size network affordable.
    """
    model = build(config, rng)
    for p in model.parameters():
        p.data += rng.uniform(-0.05, 0.05, size=p.shape).astype(np.float32)  # non-zero biases
    h, w = config.input_size
    x = Tensor(rng.standard_normal((1, 1, h, w)))
    labels = np.zeros((1, h, w), dtype=np.int64)
    labels[0, h // 4: h // 2, w // 4: 3 * w // 4] = 1
    main, _ = forward(model, x)
    frozen = select_batch(main, labels)

    def loss_of():
        main, aux = forward(model, x)
        return total_loss(main, aux, labels, mode, 0.4, selections=frozen)

    worst = 0.0
    for t in [x, *model.parameters()]:
        idx = None if samples is None else rng.choice(t.data.size, min(samples, t.data.size), replace=False)
        worst = max(worst, T.finite_diff_check(lambda _: loss_of(), t, STEP, idx))
    return worst


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    checks = _op_checks(rng)
    checks["network (micro config)"] = lambda: network_check(rng)
    checks["network (micro config, weighted_ce)"] = lambda: network_check(rng, mode="weighted_ce")
    checks["network (default config, sampled)"] = lambda: network_check(rng, NetworkConfig(), samples=6)
    for name, fn in checks.items():
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
