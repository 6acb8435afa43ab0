"""Deterministic two-domain ellipsoid phantoms with exact ground truth.

Each volume holds a few axis-aligned ellipsoids on a background. Source
intensities are per-class Gaussian; the target domain remaps the class means,
applies a global gamma and adds Gaussian noise. Both domains share the
geometry distribution but never share instances.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume, load_volume, save_volume

DOMAINS = {"source": 0, "target": 1, "heldout": 2}


class PlacementError(RuntimeError):
    """No valid structure layout was found within the retry budget."""


@dataclass
class IntensityMap:
    """Per-class mean/std; index 0 is background."""

    means: tuple[float, ...]
    stds: tuple[float, ...]
    gamma: float = 1.0
    noise: float = 0.0

    def __post_init__(self):
        self.means = tuple(float(m) for m in self.means)
        self.stds = tuple(float(s) for s in self.stds)
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds must have one entry per class")
        if min(self.means) <= 0 or min(self.stds) < 0 or self.gamma <= 0 or self.noise < 0:
            raise ValueError("intensity means, gamma must be positive and stds, noise non-negative")

    def effective(self) -> tuple[np.ndarray, np.ndarray]:
        """Post-gamma means and total per-class standard deviations (first order)."""
        m = np.asarray(self.means)
        s = np.asarray(self.stds)
        gm = m ** self.gamma
        gs = self.gamma * m ** (self.gamma - 1) * s
        return gm, np.sqrt(gs ** 2 + self.noise ** 2)

    def check_separation(self, name: str) -> None:
        gm, gs = self.effective()
        for a in range(len(gm)):
            for b in range(a + 1, len(gm)):
                if abs(gm[a] - gm[b]) < 2 * max(gs[a], gs[b]):
                    raise ValueError(f"{name} domain: classes {a} and {b} are closer than 2 sigma")


def _source_default() -> IntensityMap:
    return IntensityMap((0.2, 0.5, 0.85), (0.03, 0.03, 0.03))


def _target_default() -> IntensityMap:
    return IntensityMap((0.05, 0.3, 0.7), (0.02, 0.02, 0.02), gamma=1.2, noise=0.03)


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (16, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    volumes_per_domain: int = 4
    heldout: int = 2
    structures: tuple[int, int] = (3, 6)
    radius: tuple[float, float] = (3.0, 8.0)
    foreground_fraction: tuple[float, float] = (0.1, 0.4)
    num_classes: int = 3
    source: IntensityMap = field(default_factory=_source_default)
    target: IntensityMap = field(default_factory=_target_default)
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.structures = tuple(int(s) for s in self.structures)
        self.radius = tuple(float(r) for r in self.radius)
        self.foreground_fraction = tuple(float(f) for f in self.foreground_fraction)
        if isinstance(self.source, dict):
            self.source = IntensityMap(**self.source)
        if isinstance(self.target, dict):
            self.target = IntensityMap(**self.target)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if self.num_classes < 2:
            raise ValueError("need at least one foreground class")
        if not 1 <= self.structures[0] <= self.structures[1]:
            raise ValueError(f"bad structure count range {self.structures}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError(f"bad radius range {self.radius}")
        lo, hi = self.foreground_fraction
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"bad foreground fraction range {self.foreground_fraction}")
        if self.volumes_per_domain < 1 or self.heldout < 0:
            raise ValueError("volumes_per_domain must be >= 1 and heldout >= 0")
        for name, imap in (("source", self.source), ("target", self.target)):
            if len(imap.means) != self.num_classes:
                raise ValueError(f"{name} intensity map needs {self.num_classes} classes")
            imap.check_separation(name)

    @classmethod
    def small_structures(cls, **overrides) -> "PhantomConfig":
        """Sparse-foreground preset (fraction around 0.1 to 1 percent)."""
        base = dict(structures=(1, 2), radius=(1.0, 2.0), foreground_fraction=(0.001, 0.01))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        for k in ("source", "target"):
            d[k] = {kk: list(vv) if isinstance(vv, tuple) else vv for kk, vv in d[k].items()}
        return d


@dataclass
class DomainPair:
    """Labeled source pairs, target pairs (labels withheld) and held-out target pairs."""

    source: list[tuple[Volume, LabelVolume]]
    target: list[tuple[Volume, LabelVolume]]
    heldout: list[tuple[Volume, LabelVolume]] = field(default_factory=list)
    seeds: dict[str, list[int]] = field(default_factory=dict)


def volume_seed(seed: int, domain: str, index: int) -> int:
    """Per-volume seed derived from ``(seed, domain, index)``."""
    ss = np.random.SeedSequence([int(seed), DOMAINS[domain], int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _ellipsoid(dims, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: dims[0], : dims[1], : dims[2]]
    d = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return d <= 1.0


def generate_labels(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Place non-touching ellipsoids until the foreground fraction is in range."""
    lo, hi = cfg.foreground_fraction
    face = ndimage.generate_binary_structure(3, 1)
    for _ in range(cfg.max_retries):
        labels = np.zeros(cfg.dims, dtype=np.int64)
        n = int(rng.integers(cfg.structures[0], cfg.structures[1] + 1))
        # cycle classes so each foreground class appears when n allows
        classes = 1 + (rng.permutation(n) % (cfg.num_classes - 1))
        ok = True
        for c in classes:
            placed = False
            for _ in range(50):
                radii = rng.uniform(cfg.radius[0], cfg.radius[1], size=3)
                radii[0] = min(radii[0], max(1.0, cfg.dims[0] / 3))
                center = [rng.uniform(min(r, d / 2), max(d - 1 - r, d / 2)) for r, d in zip(radii, cfg.dims)]
                mask = _ellipsoid(cfg.dims, center, radii)
                if not mask.any():
                    continue
                # keep a one-voxel gap between structures
                if (ndimage.binary_dilation(mask, face) & (labels > 0)).any():
                    continue
                labels[mask] = c
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok and lo <= (labels > 0).mean() <= hi:
            return labels
    raise PlacementError(f"no valid layout after {cfg.max_retries} retries (dims {cfg.dims})")


def render(labels: np.ndarray, imap: IntensityMap, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(imap.means)[labels]
    stds = np.asarray(imap.stds)[labels]
    x = np.clip(means + stds * rng.standard_normal(labels.shape), 0.0, None) ** imap.gamma
    if imap.noise > 0:
        x = x + imap.noise * rng.standard_normal(labels.shape)
    return np.clip(x, 0.0, None).astype(np.float32)


def generate_one(cfg: PhantomConfig, domain: str, index: int) -> tuple[Volume, LabelVolume]:
    rng = np.random.default_rng(volume_seed(cfg.seed, domain, index))
    labels = generate_labels(cfg, rng)
    imap = cfg.source if domain == "source" else cfg.target
    return Volume(render(labels, imap, rng), cfg.spacing), LabelVolume(labels, cfg.num_classes, cfg.spacing)


def generate(cfg: Optional[PhantomConfig] = None, workers: int = 1) -> DomainPair:
    cfg = cfg or PhantomConfig()
    jobs = [("source", i) for i in range(cfg.volumes_per_domain)]
    jobs += [("target", i) for i in range(cfg.volumes_per_domain)]
    jobs += [("heldout", i) for i in range(cfg.heldout)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(lambda j: generate_one(cfg, *j), jobs))
    else:
        out = [generate_one(cfg, *j) for j in jobs]
    n = cfg.volumes_per_domain
    seeds = {d: [volume_seed(cfg.seed, d, i) for i in range(k)]
             for d, k in (("source", n), ("target", n), ("heldout", cfg.heldout))}
    return DomainPair(out[:n], out[n:2 * n], out[2 * n:], seeds)


def _ball(radius: int) -> np.ndarray:
    r = int(radius)
    zz, yy, xx = np.mgrid[-r: r + 1, -r: r + 1, -r: r + 1]
    return zz ** 2 + yy ** 2 + xx ** 2 <= r * r


def corrupt_labels(y: LabelVolume, mode: str, radius: int = 1, seed: int = 0) -> LabelVolume:
    """Erode each foreground class, or dilate each into background only.

    When dilations of two classes reach the same background voxel, a seeded
    class order decides which one takes it.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    ball = _ball(radius)
    out = y.data.copy()
    if mode == "erode":
        for c in range(1, y.num_classes):
            mask = y.data == c
            if mask.any():
                out[mask & ~ndimage.binary_erosion(mask, ball, border_value=1)] = 0
    elif mode == "dilate":
        order = 1 + np.random.default_rng(seed).permutation(y.num_classes - 1)
        for c in order:
            grown = ndimage.binary_dilation(y.data == c, ball)
            out[grown & (out == 0)] = c
    else:
        raise ValueError(f"mode must be 'erode' or 'dilate', got {mode!r}")
    return y.with_data(out)


def label_probabilities(y: LabelVolume, sigma: float = 1.0) -> np.ndarray:
    """Gaussian-smoothed one-hot probabilities ``(C, D, H, W)`` of a label map.

    Voxels near class boundaries become uncertain, mimicking a segmenter whose
    doubt concentrates at edges.
    """
    onehot = np.stack([(y.data == c).astype(np.float64) for c in range(y.num_classes)])
    if sigma > 0:
        onehot = np.stack([ndimage.gaussian_filter(ch, sigma, mode="nearest") for ch in onehot])
    onehot = np.clip(onehot, 0.0, None)
    return onehot / onehot.sum(axis=0, keepdims=True)


def write_dataset(pair: DomainPair, cfg: PhantomConfig, out_dir: str | os.PathLike) -> dict:
    """Write ``.svol`` files and ``manifest.json``; target labels go under ``withheld/``."""
    out = Path(out_dir)
    (out / "withheld").mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "seeds": pair.seeds, "source": [], "target": [], "heldout": []}
    for split, items in (("source", pair.source), ("target", pair.target), ("heldout", pair.heldout)):
        for i, (x, y) in enumerate(items):
            img = f"{split}_{i:03d}_image.svol"
            lab = f"{split}_{i:03d}_label.svol"
            lab_path = lab if split == "source" else f"withheld/{lab}"
            save_volume(x, out / img)
            save_volume(y, out / lab_path)
            manifest[split].append({"image": img, "label": lab_path})
    manifest["withheld_labels"] = [e["label"] for s in ("target", "heldout") for e in manifest[s]]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(out_dir: str | os.PathLike, splits: Sequence[str] = ("source", "target", "heldout")) -> DomainPair:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    loaded = {s: [(load_volume(out / e["image"]), load_volume(out / e["label"])) for e in manifest.get(s, [])]
              for s in ("source", "target", "heldout") if s in splits}
    return DomainPair(loaded.get("source", []), loaded.get("target", []), loaded.get("heldout", []),
                      manifest.get("seeds", {}))
