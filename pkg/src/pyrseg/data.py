"""Volumes, the synthetic atrium phantom, the SEGV file format, and slice-level preprocessing."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"SEGV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIfffB3x")


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeCase:
    """Image indexed [x, y, z]; optional binary label of the same dims; spacing in mm."""

    image: np.ndarray
    label: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be 3-D, got shape {self.image.shape}")
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(f"label dims {self.label.shape} != image dims {self.image.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        self.image.setflags(write=False)
        if self.label is not None:
            self.label.setflags(write=False)


@dataclass(frozen=True)
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]


# ---------------------------------------------------------------------------
# phantom generator


def _capsule(grid, a, b, radius):
    """Voxels within ``radius`` of segment a-b."""
    ab = b - a
    pts = grid - a
    t = np.clip((pts @ ab) / float(ab @ ab), 0.0, 1.0)
    d = pts - t[..., None] * ab
    return (d * d).sum(-1) <= radius * radius


def generate_phantom(size=(64, 64, 16), rng: np.random.Generator | None = None, case_id: str = "") -> VolumeCase:
    """One ellipsoidal body with 2-6 tubular branches; intensities with noise and a smooth bias field."""
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ValueError(f"phantom dims must all be >= 16, got {size}")
    rng = rng if rng is not None else np.random.default_rng()
    ext = np.asarray(size, dtype=np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij"), axis=-1)

    # full axis lengths 15-35% of the extent, so semi-axes are half that
    semi = rng.uniform(0.15, 0.35, size=3) * ext / 2
    semi = np.maximum(semi, 1.5)
    margin = semi + 1
    center = rng.uniform(margin, ext - 1 - margin)
    label = (((grid - center) / semi) ** 2).sum(-1) <= 1.0

    for _ in range(rng.integers(2, 7)):
        direction = rng.standard_normal(3)
        direction[2] *= 0.5
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(2.0, 4.0)
        # surface point of the ellipsoid along direction, pulled slightly inside so the branch attaches
        r_surface = 1.0 / np.sqrt(((direction / semi) ** 2).sum())
        start = center + 0.6 * r_surface * direction
        length = rng.uniform(0.2, 0.5) * ext[:2].mean()
        end = center + (r_surface + length) * direction
        label |= _capsule(grid, start, end, radius)

    labeled, count = ndimage.label(label, structure=np.ones((3, 3, 3)))
    if count > 1:
        sizes = np.bincount(labeled.ravel())[1:]
        label = labeled == (np.argmax(sizes) + 1)

    label = label.astype(np.uint8)
    image = np.where(label, 0.7, 0.3)
    image = image + rng.normal(0.0, 0.1, size=size)
    image = image + _bias_field(size, rng, amplitude=rng.uniform(0.5, 1.0) * 0.15)
    return VolumeCase(image.astype(np.float32), label, (1.0, 1.0, 1.0), case_id)


def _bias_field(size, rng, amplitude: float) -> np.ndarray:
    axes = [np.linspace(0.0, 1.0, s) for s in size]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    field = np.zeros(size)
    for _ in range(3):
        fx, fy, fz = rng.uniform(0.3, 1.2, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        field += np.cos(np.pi * fx * x + phase[0]) * np.cos(np.pi * fy * y + phase[1]) * np.cos(np.pi * fz * z + phase[2])
    peak = np.abs(field).max()
    return field * (amplitude / peak) if peak > 0 else field


# ---------------------------------------------------------------------------
# file I/O


def write_volume(case: VolumeCase, path) -> None:
    dx, dy, dz = case.image.shape
    payload = 1 if case.label is not None else 0
    header = _HEADER.pack(MAGIC, VERSION, dx, dy, dz, *case.spacing, payload)
    parts = [header, np.asarray(case.image, dtype="<f4").tobytes(order="F")]
    if case.label is not None:
        parts.append(np.asarray(case.label, dtype=np.uint8).tobytes(order="F"))
    Path(path).write_bytes(b"".join(parts))


def read_volume(path) -> VolumeCase:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise VolumeFormatError(f"bad magic in {path}: {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(f"truncated header in {path}")
    _, version, dx, dy, dz, sx, sy, sz, payload = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported volume version {version} in {path}")
    if payload not in (0, 1):
        raise VolumeFormatError(f"unknown payload kind {payload} in {path}")
    count = dx * dy * dz
    if count == 0 or count > (1 << 40):
        raise VolumeFormatError(f"dim overflow: {dx}x{dy}x{dz} in {path}")
    need = _HEADER.size + 4 * count + (count if payload else 0)
    if len(buf) < need:
        raise VolumeFormatError(f"truncated volume {path}: header declares {need} bytes, file has {len(buf)}")
    off = _HEADER.size
    image = np.frombuffer(buf, "<f4", count, off).astype(np.float32).reshape((dx, dy, dz), order="F")
    label = None
    if payload:
        label = np.frombuffer(buf, np.uint8, count, off + 4 * count).reshape((dx, dy, dz), order="F").copy()
    return VolumeCase(np.ascontiguousarray(image), label, (sx, sy, sz), path.stem)


# ---------------------------------------------------------------------------
# slices


def slice_volume(case: VolumeCase) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split along the last axis; slice k is the plane z = k."""
    out = []
    for k in range(case.image.shape[2]):
        lab = case.label[:, :, k] if case.label is not None else None
        out.append((case.image[:, :, k], lab))
    return out


def normalize_slice(img: np.ndarray) -> np.ndarray:
    x = img.astype(np.float64)
    std = x.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros(img.shape, dtype=np.float32)
    return ((x - x.mean()) / std).astype(np.float32)


def augment_flip(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, p: float = 0.5):
    """With probability p flip image and label along the same randomly chosen in-plane axis."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    if rng.random() >= p:
        return image, label
    axis = int(rng.integers(0, 2))
    return np.flip(image, axis=axis), np.flip(label, axis=axis)


def split_dataset(ids, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    # small epsilon so 100 * 0.1 does not floor to 9
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    return DatasetSplit(
        train=shuffled[n_val + n_test:],
        validation=shuffled[:n_val],
        test=shuffled[n_val:n_val + n_test],
    )
