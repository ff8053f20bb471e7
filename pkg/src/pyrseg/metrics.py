"""Overlap and boundary-distance metrics plus connected-component post-processing."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_FACE = ndimage.generate_binary_structure(3, 1)
_FULL = ndimage.generate_binary_structure(3, 3)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def jaccard(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def conform(pred=None, gt=None, *, dice_value: float | None = None) -> float:
    """Conformity coefficient (3*dice - 2)/dice; NaN when dice is 0."""
    d = dice(pred, gt) if dice_value is None else dice_value
    if d == 0:
        return math.nan
    return (3.0 * d - 2.0) / d


def extract_boundary(mask) -> np.ndarray:
    """Foreground voxels with a 6-neighbour that is background or outside the volume."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros_like(m)
    eroded = ndimage.binary_erosion(m, structure=_FACE, border_value=0)
    return m & ~eroded


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from every voxel of ``src`` to the nearest voxel of ``dst`` (both boolean masks)."""
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def _surface_distances(pred, gt, spacing):
    p, g = _pair(pred, gt)
    bp, bg = extract_boundary(p), extract_boundary(g)
    if not bp.any() or not bg.any():
        raise ValueError("boundary distance undefined: empty boundary")
    spacing = tuple(float(s) for s in spacing)
    return _directed(bp, bg, spacing), _directed(bg, bp, spacing)


def adb(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric distance between boundaries, in mm."""
    a, b = _surface_distances(pred, gt, spacing)
    return float((a.sum() + b.sum()) / (a.size + b.size))


def hdb(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Hausdorff distance between boundaries, in mm."""
    a, b = _surface_distances(pred, gt, spacing)
    return float(max(a.max(), b.max()))


# ---------------------------------------------------------------------------
# connected components


@dataclass
class Component:
    id: int
    voxels: np.ndarray  # (k, 3) indices
    size: int


def _flat_key(mask_shape, labeled, count):
    """Lowest flat index (x fastest, as stored on disk) of each component."""
    dx, dy, _ = mask_shape
    x, y, z = np.nonzero(labeled)
    flat = x + dx * (y + dy * z)
    lowest = np.full(count + 1, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(lowest, labeled[x, y, z], flat)
    return lowest[1:]


def connected_components(mask, connectivity: int = 26) -> list[Component]:
    """Components ordered by descending size, then lowest flat index."""
    m = np.asarray(mask, dtype=bool)
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    if m.ndim != 3:
        raise ValueError(f"mask must be 3-D, got shape {m.shape}")
    labeled, count = ndimage.label(m, structure=_FACE if connectivity == 6 else _FULL)
    if count == 0:
        return []
    sizes = np.bincount(labeled.ravel(), minlength=count + 1)[1:]
    lowest = _flat_key(m.shape, labeled, count)
    order = sorted(range(count), key=lambda i: (-sizes[i], lowest[i]))
    return [
        Component(rank, np.argwhere(labeled == i + 1), int(sizes[i]))
        for rank, i in enumerate(order)
    ]


def remove_small_components(mask, connectivity: int = 26, min_fraction: float = 0.1) -> np.ndarray:
    """Keep components whose size is at least ``min_fraction`` of the largest one."""
    if not 0.0 <= min_fraction <= 1.0:
        raise ValueError(f"min_fraction must be in [0, 1], got {min_fraction}")
    m = np.asarray(mask, dtype=bool)
    if not m.any() or min_fraction == 0.0:
        return m.copy()
    labeled, count = ndimage.label(m, structure=_FACE if connectivity == 6 else _FULL)
    sizes = np.bincount(labeled.ravel(), minlength=count + 1)
    sizes[0] = 0
    keep = sizes >= min_fraction * sizes.max()
    keep[0] = False
    return keep[labeled]


# ---------------------------------------------------------------------------
# evaluation protocol

FIELDS = ("dice", "conform", "jaccard", "adb_mm", "hdb_mm")


@dataclass
class CaseMetrics:
    case: str
    dice: float = math.nan
    conform: float = math.nan
    jaccard: float = math.nan
    adb_mm: float = math.nan
    hdb_mm: float = math.nan
    flags: list[str] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {f: getattr(self, f) for f in FIELDS}


@dataclass
class MetricsReport:
    cases: list[CaseMetrics]
    mean: dict[str, float]

    def failed(self) -> list[CaseMetrics]:
        return [c for c in self.cases if c.flags]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("case",) + FIELDS)
        for c in self.cases:
            writer.writerow(_format_row(c.case, c.values()))
        writer.writerow(_format_row("MEAN", self.mean))
        return buf.getvalue()


def _format_row(name: str, values: dict[str, float]) -> list[str]:
    row = [name]
    for f in FIELDS:
        v = values[f]
        if math.isnan(v):
            row.append("nan")
        else:
            row.append(f"{v:.3f}" if f.endswith("_mm") else f"{v:.6f}")
    return row


def evaluate_case(pred, gt, spacing=(1.0, 1.0, 1.0), case: str = "", *,
                  postprocess: bool = True, connectivity: int = 26, min_fraction: float = 0.1) -> CaseMetrics:
    out = CaseMetrics(case)
    try:
        p, g = _pair(pred, gt)
    except ValueError as exc:
        out.flags.append(str(exc))
        return out
    if postprocess:
        p = remove_small_components(p, connectivity, min_fraction)
    out.dice = dice(p, g)
    out.jaccard = jaccard(p, g)
    out.conform = conform(dice_value=out.dice)
    if math.isnan(out.conform):
        out.flags.append("conform undefined (dice = 0)")
    try:
        a, b = _surface_distances(p, g, spacing)
        out.adb_mm = float((a.sum() + b.sum()) / (a.size + b.size))
        out.hdb_mm = float(max(a.max(), b.max()))
    except ValueError as exc:
        out.flags.append(str(exc))
    return out


def evaluate_set(cases: list[CaseMetrics]) -> MetricsReport:
    """Unweighted mean over cases; undefined values are left out of their column's mean."""
    mean = {}
    for f in FIELDS:
        vals = [getattr(c, f) for c in cases if not math.isnan(getattr(c, f))]
        mean[f] = float(np.mean(vals)) if vals else math.nan
    return MetricsReport(list(cases), mean)
