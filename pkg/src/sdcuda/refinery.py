"""Uncertainty-constrained pseudo-label refinement.

Per foreground class ``c``:

* sensitivity refinement adds voxels that are outside the class, highly
  uncertain for ``c`` and whose intensity lies strictly inside
  ``(m * alpha, m * beta)``, where ``m`` is the mean intensity of the class
  region in the current pseudo-label;
* specificity refinement removes class voxels that are highly uncertain and
  whose intensity lies outside ``[m * alpha, m * beta]``.

Uncertainty is the per-class binary entropy in bits, so it lies in [0, 1].
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

MODES = ("none", "sensitivity", "specificity", "both")


class RefinementSkipped(ValueError):
    """Refinement cannot be applied to a class (empty region, non-positive mean)."""


class EmptyClassRegion(RefinementSkipped):
    pass


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Class probabilities ``(C, D, H, W)``; each voxel sums to 1."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] < 2:
            raise ValueError(f"probabilities must be (C>=2, D, H, W), got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
            raise ValueError("probabilities must be finite and within [0, 1]")
        if np.abs(arr.sum(axis=0) - 1).max() > 1e-5:
            raise ValueError("class probabilities do not sum to 1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    """Per-class uncertainty ``(C, D, H, W)`` with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"uncertainty must be (C, D, H, W), got {arr.shape}")
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError("uncertainty values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


@dataclass
class ClassPolicy:
    mode: str = "both"
    tau: float = 0.3
    alpha: float = 0.6
    beta: float = 1.4
    connected: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.alpha < self.beta:
            raise ValueError(f"need 0 < alpha < beta, got alpha={self.alpha}, beta={self.beta}")
        if not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass
class RefinementPolicy:
    classes: dict[int, ClassPolicy] = field(default_factory=dict)

    @classmethod
    def default(cls, num_classes: int, **overrides) -> "RefinementPolicy":
        return cls({c: ClassPolicy(**overrides) for c in range(1, num_classes)})

    @classmethod
    def uniform(cls, num_classes: int, mode: str) -> "RefinementPolicy":
        return cls.default(num_classes, mode=mode)

    def __getitem__(self, c: int) -> ClassPolicy:
        return self.classes.get(c, ClassPolicy(mode="none"))


@dataclass
class ClassReport:
    added: int = 0
    removed: int = 0
    mean_intensity: Optional[float] = None
    high_uncertainty: int = 0
    skipped: Optional[str] = None


@dataclass
class RefinementReport:
    classes: dict[int, ClassReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {str(c): asdict(r) for c, r in sorted(self.classes.items())}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def binary_entropy(p: np.ndarray) -> np.ndarray:
    """``-p log2 p - (1-p) log2 (1-p)`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(q > 0, q * np.log2(q), 0.0))
    return np.clip(h, 0.0, 1.0)


def entropy_map(probs: ProbabilityVolume) -> UncertaintyMap:
    if not isinstance(probs, ProbabilityVolume):
        probs = ProbabilityVolume(probs)
    return UncertaintyMap(binary_entropy(probs.data))


def high_uncertainty_mask(unc: UncertaintyMap, c: int, tau: float) -> np.ndarray:
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return unc.data[c] > tau


def class_mean_intensity(x: Volume, y: LabelVolume, c: int) -> float:
    region = y.data == c
    if not region.any():
        raise EmptyClassRegion(f"empty class region for class {c}: undefined mean; refinement skipped")
    return float(x.data[region].astype(np.float64).mean())


def _band_mean(x: Volume, y: LabelVolume, c: int) -> float:
    m = class_mean_intensity(x, y, c)
    if m <= 0:
        raise RefinementSkipped(f"class {c} mean intensity {m:g} is not positive; refinement skipped")
    return m


def _check_dims(x: Volume, y: LabelVolume, unc: UncertaintyMap):
    if x.dims != y.dims or unc.data.shape[1:] != y.dims:
        raise ValueError(f"dimension mismatch: image {x.dims}, labels {y.dims}, uncertainty {unc.data.shape[1:]}")


def _additions(x, y, unc, c, pol: ClassPolicy, m: float) -> np.ndarray:
    xv = x.data.astype(np.float64)
    cand = (y.data != c) & high_uncertainty_mask(unc, c, pol.tau) & (xv > m * pol.alpha) & (xv < m * pol.beta)
    if pol.connected and cand.any():
        region = y.data == c
        comps, _ = ndimage.label(region | cand, structure=np.ones((3, 3, 3), dtype=bool))
        keep = np.unique(comps[region])
        cand &= np.isin(comps, keep[keep > 0])
    return cand


def _removals(x, y, unc, c, pol: ClassPolicy, m: float) -> np.ndarray:
    xv = x.data.astype(np.float64)
    outside = (xv < m * pol.alpha) | (xv > m * pol.beta)
    return (y.data == c) & high_uncertainty_mask(unc, c, pol.tau) & outside


def refine_sensitivity(x: Volume, y: LabelVolume, unc: UncertaintyMap, c: int,
                       policy: RefinementPolicy | ClassPolicy, mean: Optional[float] = None) -> LabelVolume:
    """Relabel uncertain in-band voxels outside class ``c`` to ``c``.

    ``mean`` overrides the class mean computed from ``y``.
    """
    _check_dims(x, y, unc)
    pol = policy[c] if isinstance(policy, RefinementPolicy) else policy
    m = _band_mean(x, y, c) if mean is None else mean
    out = y.data.copy()
    out[_additions(x, y, unc, c, pol, m)] = c
    return y.with_data(out)


def refine_specificity(x: Volume, y: LabelVolume, unc: UncertaintyMap, c: int,
                       policy: RefinementPolicy | ClassPolicy) -> LabelVolume:
    """Relabel uncertain out-of-band voxels of class ``c`` to background."""
    _check_dims(x, y, unc)
    pol = policy[c] if isinstance(policy, RefinementPolicy) else policy
    m = _band_mean(x, y, c)
    out = y.data.copy()
    out[_removals(x, y, unc, c, pol, m)] = 0
    return y.with_data(out)


def refine(x: Volume, y: LabelVolume, probs: ProbabilityVolume, policy: RefinementPolicy):
    """Apply the per-class policy; returns ``(refined labels, report)``.

    Both refinements of every class are computed from the original labels.
    Removals are applied first, then additions; a voxel claimed by several
    classes (a surviving foreground label counts as a claim) goes to the
    claimant with the highest probability, ties to the lower class index.
    """
    if not isinstance(probs, ProbabilityVolume):
        probs = ProbabilityVolume(probs)
    if probs.dims != y.dims or x.dims != y.dims:
        raise ValueError(f"dimension mismatch: image {x.dims}, labels {y.dims}, probabilities {probs.dims}")
    unc = entropy_map(probs)
    report = RefinementReport()
    remove = np.zeros(y.dims, dtype=bool)
    claims: dict[int, np.ndarray] = {}
    for c in range(1, y.num_classes):
        pol = policy[c]
        if pol.mode == "none":
            continue
        entry = report.classes.setdefault(c, ClassReport())
        entry.high_uncertainty = int(high_uncertainty_mask(unc, c, pol.tau).sum())
        try:
            m = _band_mean(x, y, c)
        except RefinementSkipped as exc:
            entry.skipped = str(exc)
            log.warning("%s", exc)
            continue
        entry.mean_intensity = m
        if pol.mode in ("specificity", "both"):
            remove |= _removals(x, y, unc, c, pol, m)
        if pol.mode in ("sensitivity", "both"):
            claims[c] = _additions(x, y, unc, c, pol, m)

    out = y.data.copy()
    out[remove] = 0
    if claims:
        claimed = np.zeros(y.dims, dtype=bool)
        for mask in claims.values():
            claimed |= mask
        best_p = np.full(y.dims, -np.inf)
        best_c = np.zeros(y.dims, dtype=out.dtype)
        for c in range(1, y.num_classes):
            mask = claimed & (claims.get(c, False) | (out == c))
            better = mask & (probs.data[c] > best_p)
            best_p[better] = probs.data[c][better]
            best_c[better] = c
        out[claimed] = best_c[claimed]

    for c, entry in report.classes.items():
        entry.added = int(((out == c) & (y.data != c)).sum())
        entry.removed = int(((y.data == c) & (out != c)).sum())
    return y.with_data(out), report
