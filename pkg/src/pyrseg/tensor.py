"""Minimal dense tensors with reverse-mode differentiation.

Only the operations the pyramid network needs are provided. Tensors built by
users are float32; ops follow the dtype of their inputs, which lets the
finite-difference oracle re-evaluate a graph in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

# when not None, relu appends its activation pattern here (used by finite_diff_check)
_relu_trace: list[np.ndarray] | None = None


class Tensor:
    """A float32 array plus gradient buffer and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self._init(np.ascontiguousarray(arr), requires_grad, name)

    def _init(self, data: np.ndarray, requires_grad: bool, name: str | None = None, grad: bool = True) -> None:
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad and grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        """Record a node. ``backward_fn(g)`` returns one gradient (or None) per parent."""
        needs = any(p.requires_grad for p in parents)
        out = cls.__new__(cls)
        out._init(np.asarray(data), needs, grad=False)  # allocated by backward on first use
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out


def _check_shape(name: str, t: Tensor, rank: int) -> None:
    if t.data.ndim != rank:
        raise ValueError(f"{name}: expected rank {rank} (N,C,H,W), got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    if _relu_trace is not None:
        _relu_trace.append(x.data > 0)
    # subgradient at exactly 0 is 0
    return Tensor.from_op(out, (x,), lambda g: (g * (out > 0),))


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return Tensor.from_op(x.data * f, (x,), lambda g: (g * f,))


def tensor_sum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    shape, dtype = x.shape, x.data.dtype
    return Tensor.from_op(total, (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def sum_of_squares(x: Tensor) -> Tensor:
    total = np.asarray(np.square(x.data, dtype=np.float64).sum(), dtype=x.data.dtype)
    return Tensor.from_op(total, (x,), lambda g: (2 * g * x.data,))


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int, int, int]  # (out_channels, in_channels, kh, kw)
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if len(self.kernel) != 4 or min(self.kernel) < 1:
            raise ValueError(f"kernel must be 4 positive extents, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")

    def output_extent(self, size: int, k: int) -> int:
        return (size + 2 * self.padding - self.dilation * (k - 1) - 1) // self.stride + 1


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded, strided, dilated 2-D cross-correlation over NCHW input."""
    _check_shape("conv2d input", x, 4)
    co, ci, kh, kw = spec.kernel
    n, c, h, w = x.shape
    if c != ci:
        raise ValueError(f"conv2d: input channels C={c} but kernel expects in_channels={ci}")
    if weight.shape != spec.kernel:
        raise ValueError(f"conv2d: weight shape {weight.shape} != kernel {spec.kernel}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho, wo = spec.output_extent(h, kh), spec.output_extent(w, kw)
    if ho < 1:
        raise ValueError(f"conv2d: output height H'={ho} < 1 for input H={h}")
    if wo < 1:
        raise ValueError(f"conv2d: output width W'={wo} < 1 for input W={w}")

    s, p, d = spec.stride, spec.padding, spec.dilation
    wmat = weight.data.reshape(co, ci * kh * kw)
    pointwise = kh == 1 and kw == 1 and s == 1 and p == 0
    dt = x.data.dtype

    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(ci, n * h * w)
    else:
        # channel-major padded copy keeps the tap gathers on contiguous rows
        xp = np.zeros((ci, n, h + 2 * p, w + 2 * p), dtype=dt)
        xp[:, :, p : p + h, p : p + w] = x.data.transpose(1, 0, 2, 3)
        cols = np.empty((ci, kh, kw, n, ho, wo), dtype=dt)
        for i in range(kh):
            r0 = i * d
            for j in range(kw):
                c0 = j * d
                cols[:, i, j] = xp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s]
        del xp
        cols = cols.reshape(ci * kh * kw, n * ho * wo)

    out = wmat @ cols
    if bias is not None:
        if bias.data.dtype == out.dtype:
            out += bias.data[:, None]
        else:  # widened bias during finite differencing
            out = out + bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gw = (gmat @ cols.T).reshape(spec.kernel) if weight.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1, dtype=np.float64).astype(g.dtype)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(ci, n, h, w).transpose(1, 0, 2, 3))
            else:
                gcols = gcols.reshape(ci, kh, kw, n, ho, wo)
                gxp = np.zeros((ci, n, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
                for i in range(kh):
                    r0 = i * d
                    for j in range(kw):
                        c0 = j * d
                        gxp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += gcols[:, i, j]
                gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# pooling / resampling


@lru_cache(maxsize=None)
def _bin_matrix(size: int, bins: int, dtype) -> np.ndarray:
    m = np.zeros((bins, size), dtype=dtype)
    for i in range(bins):
        lo, hi = (i * size) // bins, ((i + 1) * size) // bins
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def adaptive_avg_pool2d(x: Tensor, bins: tuple[int, int]) -> Tensor:
    """Average over the cell ``[floor(i*H/bh), floor((i+1)*H/bh))`` per output row (same for columns)."""
    _check_shape("adaptive_avg_pool2d input", x, 4)
    bh, bw = bins
    h, w = x.shape[2:]
    if not (1 <= bh <= h):
        raise ValueError(f"adaptive_avg_pool2d: bins height {bh} exceeds input height {h}")
    if not (1 <= bw <= w):
        raise ValueError(f"adaptive_avg_pool2d: bins width {bw} exceeds input width {w}")
    py, px = _bin_matrix(h, bh, x.data.dtype), _bin_matrix(w, bw, x.data.dtype)
    out = py @ x.data @ px.T
    return Tensor.from_op(out, (x,), lambda g: (py.T @ g @ px,))


@lru_cache(maxsize=None)
def _lerp_plan(src: int, dst: int, dtype):
    """Source indices, fractional weights and the dense (dst, src) interpolation matrix."""
    if src == 1 or dst == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    t = (pos - lo).astype(dtype)
    mat = np.zeros((dst, src), dtype=dtype)
    np.add.at(mat, (np.arange(dst), lo), 1 - t)
    np.add.at(mat, (np.arange(dst), hi), t)
    return lo, hi, t, mat


def upsample_bilinear(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Corner-aligned bilinear upsampling; a 1-wide axis is replicated."""
    _check_shape("upsample_bilinear input", x, 4)
    h, w = x.shape[2:]
    th, tw = target
    if th < h or tw < w:
        raise ValueError(f"upsample_bilinear: cannot downsample {h}x{w} to {th}x{tw}")
    r0, r1, rt, wy = _lerp_plan(h, th, x.data.dtype)
    c0, c1, ct, wx = _lerp_plan(w, tw, x.data.dtype)

    # a + t*(b-a) keeps constant fields exactly constant
    rows = x.data[:, :, r0, :]
    rows = rows + rt[:, None] * (x.data[:, :, r1, :] - rows)
    out = rows[:, :, :, c0]
    out = out + ct * (rows[:, :, :, c1] - out)
    return Tensor.from_op(np.ascontiguousarray(out), (x,), lambda g: (wy.T @ g @ wx,))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels: need at least one input")
    n, _, h, w = inputs[0].shape
    for k, t in enumerate(inputs):
        _check_shape("concat_channels input", t, 4)
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ValueError(f"concat_channels: input {k} has shape {t.shape}, expected (N={n}, *, {h}, {w})")
    edges = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)
    return Tensor.from_op(out, tuple(inputs), lambda g: tuple(g[:, a:b] for a, b in zip(edges[:-1], edges[1:])))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the mask is drawn once from ``rng`` and reused in backward."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = ((rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))).astype(x.data.dtype)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:  # op outputs, or requires_grad switched on after construction
            node.grad = np.array(g, dtype=node.data.dtype)
        else:
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite differences


def _traced_eval(f, x: Tensor) -> tuple[float, list[np.ndarray]]:
    global _relu_trace
    _relu_trace = []
    try:
        value = float(f(x).data.reshape(-1)[0])
        return value, _relu_trace
    finally:
        _relu_trace = None


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3,
                      indices: Sequence[int] | None = None) -> float:
    """Max over elements of |analytic - central difference| / max(1, |analytic|).

    The analytic gradient comes from one float32 backward pass. The numeric
    side re-evaluates ``f`` with ``x`` widened to float64 and perturbed by
    float32-representable amounts. Where a ReLU changes state inside
    ``+-step`` the difference straddles a kink, so the step is shrunk for
    that element until the activation pattern is stable. ``f`` must be
    deterministic; ``indices`` restricts the check to some flat positions.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    original_rg = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    backward(f(x))
    analytic = x.grad.astype(np.float64).ravel()

    base32 = x.data
    wide = base32.astype(np.float64)
    x.data = wide
    flat = wide.reshape(-1)
    _, base_pattern = _traced_eval(f, x)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    try:
        for k in positions:
            orig = float(base32.reshape(-1)[k])
            h = step
            while True:
                hi, lo = float(np.float32(orig + h)), float(np.float32(orig - h))
                flat[k] = hi
                up, up_pattern = _traced_eval(f, x)
                flat[k] = lo
                down, down_pattern = _traced_eval(f, x)
                flat[k] = orig
                stable = _same_pattern(up_pattern, base_pattern) and _same_pattern(down_pattern, base_pattern)
                if stable or h < 1e-6:
                    break
                h /= 10
            numeric = (up - down) / (hi - lo)
            err = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]))
            worst = max(worst, err)
    finally:
        x.data = base32
        x.requires_grad = original_rg
        x.grad = np.zeros_like(base32) if original_rg else None
    return float(worst)
