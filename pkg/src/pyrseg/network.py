"""Pyramid segmentation network: dilated residual stem, pyramid pooling, main and auxiliary heads."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    stage_dilations: tuple[int, ...] = (1, 2, 4)
    output_stride: int = 4
    pyramid_bins: tuple[int, ...] = (1, 2, 3, 6)
    dropout_rate: float = 0.1
    num_classes: int = 2
    input_size: tuple[int, int] = (64, 64)
    head_channels: int = 32

    def __post_init__(self):
        # normalise lists from config files into tuples so the dataclass stays hashable
        for name in ("stage_channels", "blocks_per_stage", "stage_dilations", "pyramid_bins", "input_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.input_size[0] // self.output_stride, self.input_size[1] // self.output_stride

    def stage_strides(self) -> list[int]:
        """Stride of each stage's entry conv: 2 until ``output_stride`` is reached, then 1."""
        strides, total = [], 1
        for _ in self.stage_channels:
            if total < self.output_stride:
                strides.append(2)
                total *= 2
            else:
                strides.append(1)
        return strides

    def validate(self) -> None:
        n = len(self.stage_channels)
        if n == 0 or len(self.blocks_per_stage) != n or len(self.stage_dilations) != n:
            raise ValueError("stage_channels, blocks_per_stage and stage_dilations must have equal non-zero length")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 0 or min(self.stage_dilations) < 1:
            raise ValueError("stage channels/dilations must be positive and block counts non-negative")
        if self.output_stride < 1 or self.output_stride & (self.output_stride - 1):
            raise ValueError(f"output_stride must be a power of two, got {self.output_stride}")
        if 2 ** n < self.output_stride:
            raise ValueError(f"{n} stages cannot reach output_stride {self.output_stride}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be (H, W), got {self.input_size}")
        if any(s % self.output_stride for s in self.input_size):
            raise ValueError(f"input_size {self.input_size} must be divisible by output_stride {self.output_stride}")
        bins = self.pyramid_bins
        if not bins or any(b < 1 for b in bins) or any(a >= b for a, b in zip(bins, bins[1:])):
            raise ValueError(f"pyramid_bins must be strictly increasing positive ints, got {bins}")
        fh, fw = self.feature_size
        if bins[-1] > min(fh, fw):
            raise ValueError(f"pyramid bin {bins[-1]} exceeds feature map {fh}x{fw}")
        if self.stage_channels[-1] % len(bins):
            raise ValueError("last stage channels must be divisible by the number of pyramid bins")
        if self.head_channels < 1:
            raise ValueError("head_channels must be positive")

    def fingerprint(self) -> int:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass
class _Conv:
    spec: ConvSpec
    weight: Tensor
    bias: Tensor | None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.spec, self.weight, self.bias)


@dataclass
class Model:
    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def _conv(self, name: str, cin: int, cout: int, k: int, stride: int = 1, dilation: int = 1) -> _Conv:
        pad = dilation * (k - 1) // 2
        return _Conv(ConvSpec((cout, cin, k, k), stride, pad, dilation),
                     self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    # layer plan shared by build() and forward()
    def _layers(self):
        cfg = self.config
        cin = 1
        for s, (cout, nblocks, dil, stride) in enumerate(
            zip(cfg.stage_channels, cfg.blocks_per_stage, cfg.stage_dilations, cfg.stage_strides())
        ):
            yield f"stage{s}.entry", cin, cout, 3, stride, 1
            for b in range(nblocks):
                yield f"stage{s}.block{b}.conv1", cout, cout, 3, 1, dil
                yield f"stage{s}.block{b}.conv2", cout, cout, 3, 1, dil
            cin = cout
        branch = cin // len(cfg.pyramid_bins)
        for b in cfg.pyramid_bins:
            yield f"pyramid.bin{b}", cin, branch, 1, 1, 1
        yield "head.fuse", cin + branch * len(cfg.pyramid_bins), cfg.head_channels, 3, 1, 1
        yield "head.classify", cfg.head_channels, cfg.num_classes, 1, 1, 1
        yield "aux.classify", cin, cfg.num_classes, 1, 1, 1


def build(config: NetworkConfig, rng: np.random.Generator) -> Model:
    """Create a model with fan-in uniform weights in +-sqrt(6/fan_in) and zero biases."""
    model = Model(config)
    for name, cin, cout, k, _, _ in model._layers():
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        model.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        model.params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")
    return model


def forward(model: Model, batch: Tensor, training: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Return (main_logits, aux_logits), both (N, num_classes, H, W)."""
    cfg = model.config
    if batch.data.ndim != 4 or batch.shape[1] != 1:
        raise ValueError(f"expected batch of shape (N,1,H,W), got {batch.shape}")
    if batch.shape[2:] != cfg.input_size:
        raise ValueError(f"input size {batch.shape[2:]} != configured input_size {cfg.input_size}")
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")

    layers = {name: model._conv(name, cin, cout, k, stride, dil) for name, cin, cout, k, stride, dil in model._layers()}
    x = batch
    for s, nblocks in enumerate(cfg.blocks_per_stage):
        x = T.relu(layers[f"stage{s}.entry"](x))
        for b in range(nblocks):
            y = T.relu(layers[f"stage{s}.block{b}.conv1"](x))
            y = layers[f"stage{s}.block{b}.conv2"](y)
            x = T.relu(T.add(x, y))
    features = x
    fsize = features.shape[2:]

    branches = [features]
    for b in cfg.pyramid_bins:
        p = T.adaptive_avg_pool2d(features, (b, b))
        p = T.relu(layers[f"pyramid.bin{b}"](p))
        branches.append(T.upsample_bilinear(p, fsize))
    h = T.relu(layers["head.fuse"](T.concat_channels(branches)))
    h = T.dropout(h, cfg.dropout_rate, rng, training)
    main = T.upsample_bilinear(layers["head.classify"](h), cfg.input_size)
    aux = T.upsample_bilinear(layers["aux.classify"](features), cfg.input_size)
    return main, aux


def receptive_field(config: NetworkConfig) -> list[tuple[int, int, int]]:
    """(kernel, stride, dilation) of every conv on the stem path, in order (one spatial axis)."""
    out = []
    for stride, dil, nblocks in zip(config.stage_strides(), config.stage_dilations, config.blocks_per_stage):
        out.append((3, stride, 1))
        out.extend([(3, 1, dil)] * (2 * nblocks))
    return out


def expected_parameter_count(config: NetworkConfig) -> int:
    """Closed-form count: sum over declared convs of cout*cin*k*k + cout."""
    total, cin = 0, 1
    for cout, nblocks in zip(config.stage_channels, config.blocks_per_stage):
        total += cout * cin * 9 + cout
        total += nblocks * 2 * (cout * cout * 9 + cout)
        cin = cout
    nb = len(config.pyramid_bins)
    branch = cin // nb
    total += nb * (branch * cin + branch)
    fused = cin + nb * branch
    total += config.head_channels * fused * 9 + config.head_channels
    total += config.num_classes * config.head_channels + config.num_classes
    total += config.num_classes * cin + config.num_classes
    return total


# ---------------------------------------------------------------------------
# checkpoint I/O

MAGIC = b"SEGC"
VERSION = 1
_META = struct.Struct("<IQfQI")  # version, epoch, val_loss, fingerprint, tensor count


@dataclass
class ModelCheckpoint:
    params: dict[str, np.ndarray]
    epoch: int
    val_loss: float
    fingerprint: int


def checkpoint_of(model: Model, epoch: int, val_loss: float) -> ModelCheckpoint:
    return ModelCheckpoint(model.state_dict(), epoch, float(val_loss), model.config.fingerprint())


def write_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    parts = [MAGIC, _META.pack(VERSION, ckpt.epoch, ckpt.val_loss, ckpt.fingerprint, len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def save_checkpoint(model: Model, epoch: int, val_loss: float, path) -> None:
    write_checkpoint(checkpoint_of(model, epoch, val_loss), path)


def read_checkpoint(path) -> ModelCheckpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: {path} ends at byte {len(buf)}, needed {pos + n}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic in checkpoint {path}: {buf[:4]!r}")
    take(4)
    version, epoch, val_loss, fp, count = _META.unpack(take(_META.size))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"corrupt checkpoint: {len(buf) - pos} trailing bytes")
    return ModelCheckpoint(params, epoch, float(val_loss), fp)


def model_from_checkpoint(ckpt: ModelCheckpoint, config: NetworkConfig) -> Model:
    if ckpt.fingerprint != config.fingerprint():
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint {ckpt.fingerprint:#018x}, config {config.fingerprint():#018x}"
        )
    model = build(config, np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    return model


def load_checkpoint(path, config: NetworkConfig) -> Model:
    return model_from_checkpoint(read_checkpoint(path), config)
