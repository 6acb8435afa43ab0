"""Teacher/student volumetric self-training around a per-voxel segmenter.

The reference segmenter classifies each voxel from its edge-padded
``(2r+1)^3`` intensity neighbourhood with a one-hidden-layer MLP. Training
minimizes a weighted sum of soft Dice over foreground classes and voxel
cross-entropy on class-balanced voxel batches.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .autograd import ParamSet, Tensor, backward, load_params, no_grad, save_params, sgd, step, uniform_init
from .autograd import functional as F
from .refinery import ProbabilityVolume
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

DICE_EPS = 1e-5
LOG_EPS = 1e-12

Pair = tuple[Volume, LabelVolume]


class Segmenter(Protocol):
    num_classes: int

    def predict(self, v: Volume) -> ProbabilityVolume: ...

    def save(self, path: str | os.PathLike) -> None: ...


@dataclass
class SelfTrainConfig:
    epochs: int = 30
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 4096
    seed: int = 0
    w_dice: float = 1.0
    w_ce: float = 1.0
    hidden: int = 16
    radius: int = 1
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, lr and batch_size positive")
        if self.w_dice < 0 or self.w_ce < 0 or self.w_dice + self.w_ce == 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.radius < 0 or self.hidden < 1:
            raise ValueError("radius must be >= 0 and hidden >= 1")

    @classmethod
    def full_scale(cls, voxels_per_volume: int, **overrides) -> "SelfTrainConfig":
        """100 epochs with two volumes' worth of voxels per batch."""
        base = dict(epochs=100, lr=1e-2, batch_size=2 * voxels_per_volume)
        base.update(overrides)
        return cls(**base)


@dataclass
class PseudoLabeledSet:
    items: list[Pair] = field(default_factory=list)
    provenance: str = ""
    policy: dict = field(default_factory=dict)

    def __post_init__(self):
        for x, y in self.items:
            if x.dims != y.dims:
                raise ValueError(f"pseudo-labeled pair dims differ: {x.dims} vs {y.dims}")

    def __len__(self) -> int:
        return len(self.items)


def patch_features(x: np.ndarray, radius: int = 1) -> np.ndarray:
    """``(D*H*W, (2r+1)^3)`` neighbourhood intensities with edge replication."""
    x = np.asarray(x, dtype=np.float32)
    k = 2 * radius + 1
    padded = np.pad(x, radius, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k, k))
    return win.reshape(x.size, k ** 3)


class PatchVoxelSegmenter:
    """Per-voxel MLP over local intensity patches: tanh hidden layer, softmax output."""

    def __init__(self, num_classes: int, radius: int = 1, hidden: int = 16, seed: int = 0,
                 rng: Optional[np.random.Generator] = None):
        self.num_classes = int(num_classes)
        self.radius = int(radius)
        self.hidden = int(hidden)
        self.history: list[float] = []
        rng = rng if rng is not None else np.random.default_rng(seed)
        n_in = (2 * self.radius + 1) ** 3
        self.params = ParamSet()
        self.params.add("w1", uniform_init(rng, (self.hidden, n_in), n_in))
        self.params.add("b1", uniform_init(rng, (self.hidden,), n_in))
        self.params.add("w2", uniform_init(rng, (self.num_classes, self.hidden), self.hidden))
        self.params.add("b2", uniform_init(rng, (self.num_classes,), self.hidden))

    @property
    def n_features(self) -> int:
        return (2 * self.radius + 1) ** 3

    def forward(self, feats) -> Tensor:
        ps = self.params
        h = F.tanh(F.linear(F.as_tensor(feats), ps["w1"], ps["b1"]))
        return F.softmax(F.linear(h, ps["w2"], ps["b2"]), axis=-1)

    __call__ = forward

    def predict(self, v: Volume) -> ProbabilityVolume:
        with no_grad():
            p = self.forward(patch_features(v.data, self.radius).astype(self.params["w1"].data.dtype)).data
        return ProbabilityVolume(p.T.reshape((self.num_classes,) + v.dims))

    def config(self) -> dict:
        return {"num_classes": self.num_classes, "radius": self.radius, "hidden": self.hidden}

    def save(self, path: str | os.PathLike) -> None:
        """Write parameters (SDCP1) and the ``<path>.json`` architecture sidecar."""
        save_params(self.params, path)
        with open(f"{path}.json", "w") as fh:
            json.dump(self.config(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PatchVoxelSegmenter":
        with open(f"{path}.json") as fh:
            model = cls(**json.load(fh))
        load_params(model.params, path)
        return model


def _onehot(labels: np.ndarray, C: int) -> np.ndarray:
    return np.eye(C, dtype=np.float64)[labels.ravel()]


def seg_loss_tensor(p: Tensor, onehot: np.ndarray, w_dice: float = 1.0, w_ce: float = 1.0) -> Tensor:
    """Differentiable loss on ``(N, C)`` probabilities against one-hot targets."""
    t = Tensor(np.asarray(onehot, dtype=p.data.dtype))
    # log((p + eps) / (1 + eps)) stays <= 0, so the loss never dips below zero
    logp = F.log(F.scale(F.add_scalar(p, LOG_EPS), 1.0 / (1.0 + LOG_EPS)))
    ce = F.scale(F.mean(F.sum(F.mul(t, logp), axis=1)), -1.0)
    pf, tf = F.slice(p, 1, 1, p.shape[1]), F.slice(t, 1, 1, p.shape[1])
    inter = F.sum(F.mul(pf, tf), axis=0)
    denom = F.add(F.sum(pf, axis=0), F.sum(tf, axis=0))
    soft = F.div(F.add_scalar(F.scale(inter, 2.0), DICE_EPS), F.add_scalar(denom, DICE_EPS))
    dice_term = F.add_scalar(F.scale(F.mean(soft), -1.0), 1.0)
    return F.add(F.scale(dice_term, w_dice), F.scale(ce, w_ce))


def seg_loss(probs: ProbabilityVolume, y: LabelVolume, weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """``w_dice * (1 - mean foreground soft Dice) + w_ce * mean cross-entropy``."""
    if not isinstance(probs, ProbabilityVolume):
        probs = ProbabilityVolume(probs)
    if probs.dims != y.dims:
        raise ValueError(f"dimension mismatch: probabilities {probs.dims}, labels {y.dims}")
    if probs.num_classes != y.num_classes:
        raise ValueError(f"class count mismatch: {probs.num_classes} vs {y.num_classes}")
    p = probs.data.reshape(probs.num_classes, -1).T
    with no_grad():
        return float(seg_loss_tensor(Tensor(p), _onehot(y.data, y.num_classes), *weights).data)


class _VoxelPool:
    """Features and labels of a set of pairs with per-class index lists."""

    def __init__(self, pairs: Sequence[Pair], radius: int, C: int, workers: int = 1):
        def feats(pair):
            return patch_features(pair[0].data, radius)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                fs = list(pool.map(feats, pairs))
        else:
            fs = [feats(p) for p in pairs]
        self.features = np.concatenate(fs) if fs else np.zeros((0, (2 * radius + 1) ** 3), np.float32)
        self.labels = np.concatenate([y.data.ravel() for _, y in pairs]) if pairs else np.zeros(0, np.int64)
        self.C = C
        self.by_class = [np.flatnonzero(self.labels == c) for c in range(C)]
        self.present = [c for c in range(C) if len(self.by_class[c])]

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Equal share of ``n`` per present class, uniform with replacement."""
        k = len(self.present)
        counts = [n // k + (1 if i < n % k else 0) for i in range(k)]
        idx = np.concatenate([self.by_class[c][rng.integers(0, len(self.by_class[c]), size=m)]
                              for c, m in zip(self.present, counts)])
        return self.features[idx], _onehot(self.labels[idx], self.C)


def _check_pairs(pairs: Sequence[Pair], what: str) -> int:
    C = None
    for x, y in pairs:
        if x.dims != y.dims:
            raise ValueError(f"{what}: image dims {x.dims} differ from label dims {y.dims}")
        if C is not None and y.num_classes != C:
            raise ValueError(f"{what}: inconsistent class counts")
        C = y.num_classes
    return C or 0


def _train(synthetic: Sequence[Pair], pseudo: Sequence[Pair], cfg: SelfTrainConfig,
           workers: int = 1) -> PatchVoxelSegmenter:
    if not synthetic and not pseudo:
        raise ValueError("empty training set")
    C = max(_check_pairs(synthetic, "synthetic"), _check_pairs(pseudo, "pseudo"))
    rng = np.random.default_rng(cfg.seed)
    model = PatchVoxelSegmenter(C, cfg.radius, cfg.hidden, rng=rng)
    pools = [p for p in (_VoxelPool(synthetic, cfg.radius, C, workers), _VoxelPool(pseudo, cfg.radius, C, workers))
             if len(p)]
    n_ref = len(pools[0])
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_ref / cfg.batch_size))
    opt = sgd(cfg.lr, cfg.momentum)
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            batches = [pool.sample(cfg.batch_size, rng) for pool in pools]
            model.params.zero_grad()
            loss = None
            for feats, target in batches:
                term = seg_loss_tensor(model(feats), target, cfg.w_dice, cfg.w_ce)
                loss = term if loss is None else F.add(loss, term)
            backward(loss)
            step(opt, model.params)
            total += float(loss.data)
        model.history.append(total / steps)
        log.debug("epoch %d loss %.5f", epoch, model.history[-1])
    return model


def train_teacher(synthetic: Sequence[Pair], cfg: Optional[SelfTrainConfig] = None,
                  workers: int = 1) -> PatchVoxelSegmenter:
    """Fit a segmenter on translated source images with source labels."""
    if not synthetic:
        raise ValueError("empty training set")
    return _train(synthetic, [], cfg or SelfTrainConfig(), workers)


def train_student(synthetic: Sequence[Pair], pseudo: PseudoLabeledSet | Sequence[Pair],
                  cfg: Optional[SelfTrainConfig] = None, workers: int = 1) -> PatchVoxelSegmenter:
    """Fresh segmenter on the unweighted sum of synthetic and pseudo-labeled losses."""
    items = pseudo.items if isinstance(pseudo, PseudoLabeledSet) else list(pseudo)
    return _train(synthetic, items, cfg or SelfTrainConfig(), workers)


def infer_pseudo_labels(f: Segmenter, targets: Sequence[Volume],
                        workers: int = 1) -> list[tuple[ProbabilityVolume, LabelVolume]]:
    """Probabilities and argmax labels (ties to the lower class index)."""
    if not targets:
        raise ValueError("no target volumes")

    def one(v: Volume):
        probs = f.predict(v)
        return probs, LabelVolume(np.argmax(probs.data, axis=0), probs.num_classes, v.spacing)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, targets))
    return [one(v) for v in targets]


def predict_labels(f: Segmenter, v: Volume) -> LabelVolume:
    return infer_pseudo_labels(f, [v])[0][1]


def config_dict(cfg: SelfTrainConfig) -> dict:
    return asdict(cfg)
