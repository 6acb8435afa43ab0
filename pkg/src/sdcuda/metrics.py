"""Overlap, surface-distance and slice-continuity metrics."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import LabelVolume, Volume

_FACES = ndimage.generate_binary_structure(3, 1)


def _labels(a) -> np.ndarray:
    return a.data if isinstance(a, LabelVolume) else np.asarray(a)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _labels(a), _labels(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _dice_masks(ma: np.ndarray, mb: np.ndarray) -> float:
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / (na + nb)


def dice(a, b, c: int) -> float:
    """Dice overlap of class ``c``; 1.0 when both are empty."""
    a, b = _pair(a, b)
    return _dice_masks(a == c, b == c)


def surface(mask: np.ndarray) -> np.ndarray:
    """Class voxels with at least one face neighbour outside the class or volume."""
    eroded = ndimage.binary_erosion(mask, structure=_FACES, border_value=0)
    return mask & ~eroded


def assd(a, b, c: int, spacing: Optional[Sequence[float]] = None) -> Optional[float]:
    """Average symmetric surface distance in mm, or ``None`` if either region is empty."""
    a_arr, b_arr = _pair(a, b)
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelVolume) else (1.0, 1.0, 1.0)
    ma, mb = a_arr == c, b_arr == c
    if not ma.any() or not mb.any():
        return None
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface(ma)) * sp
    pb = np.argwhere(surface(mb)) * sp
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float((da.sum() + db.sum()) / (len(pa) + len(pb)))


def sensitivity_specificity(pred, truth, c: int) -> tuple[float, float]:
    p, t = _pair(pred, truth)
    p, t = p == c, t == c
    tp = int((p & t).sum())
    fn = int((~p & t).sum())
    tn = int((~p & ~t).sum())
    fp = int((p & ~t).sum())
    sens = tp / (tp + fn) if tp + fn else 1.0
    spec = tn / (tn + fp) if tn + fp else 1.0
    return sens, spec


@dataclass
class SliceProfile:
    axis: int
    values: list[float]

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slice_index", "dice"])
            for i, v in enumerate(self.values):
                writer.writerow([i, repr(float(v))])


def slice_dice_profile(a, b, c: int, axis: int = 0) -> SliceProfile:
    a, b = _pair(a, b)
    if not 0 <= axis < a.ndim:
        raise ValueError(f"invalid axis {axis}")
    ma, mb = np.moveaxis(a == c, axis, 0), np.moveaxis(b == c, axis, 0)
    return SliceProfile(axis, [_dice_masks(ma[t], mb[t]) for t in range(ma.shape[0])])


def inter_slice_smoothness(v, axis: int = 0) -> float:
    """Mean over adjacent slice pairs of the mean absolute voxel difference."""
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    if data.shape[axis] < 2:
        raise ValueError("need at least two slices along the axis")
    diffs = np.abs(np.diff(data, axis=axis))
    other = tuple(i for i in range(data.ndim) if i != axis)
    return float(diffs.mean(axis=other).mean())


@dataclass
class ClassMetrics:
    dice: float
    assd_mm: Optional[float]
    sensitivity: float
    specificity: float


@dataclass
class MetricReport:
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([m.dice for m in self.per_class.values()]))

    @property
    def mean_assd(self) -> Optional[float]:
        vals = [m.assd_mm for m in self.per_class.values()]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        def na(v):
            return "NA" if v is None else v
        classes = {str(c): {**asdict(m), "assd_mm": na(m.assd_mm)} for c, m in self.per_class.items()}
        return {"classes": classes, "mean": {"dice": self.mean_dice, "assd_mm": na(self.mean_assd)}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(pred: LabelVolume, truth: LabelVolume, spacing=None) -> MetricReport:
    """Per-foreground-class metrics of ``pred`` against ``truth``."""
    spacing = spacing or truth.spacing
    report = MetricReport()
    for c in range(1, truth.num_classes):
        sens, spec = sensitivity_specificity(pred, truth, c)
        report.per_class[c] = ClassMetrics(dice(pred, truth, c), assd(pred, truth, c, spacing), sens, spec)
    return report
