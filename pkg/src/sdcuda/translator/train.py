"""Cycle-consistent least-squares adversarial training of two generators."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..autograd import adam, step
from ..autograd import functional as F
from ..volume import Volume
from .model import Discriminator, TranslationModel, TranslatorConfig

log = logging.getLogger(__name__)


@dataclass
class CycleTrainConfig:
    steps: int = 2000
    lambda_cyc: float = 10.0
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    seed: int = 0
    disc_width: int = 16
    model: TranslatorConfig = field(default_factory=TranslatorConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lambda_cyc < 0:
            raise ValueError("lambda_cyc must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class CycleLog:
    generator: list[float] = field(default_factory=list)
    discriminator: list[float] = field(default_factory=list)
    cycle: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cycle)

    def to_dict(self) -> dict:
        return {"generator": self.generator, "discriminator": self.discriminator, "cycle": self.cycle}


def sample_minis(volumes: Sequence[Volume], n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` stacks of 3 consecutive slices, ``(n, 3, H, W)``.

    Centres are drawn from the interior so that every stack holds three
    distinct real slices (volumes shallower than 3 fall back to clamping).
    """
    out = []
    for _ in range(n):
        v = volumes[rng.integers(len(volumes))]
        D = v.depth
        t = int(rng.integers(1, D - 1)) if D >= 3 else int(rng.integers(D))
        idx = [max(t - 1, 0), t, min(t + 1, D - 1)]
        out.append(v.data[idx])
    return np.stack(out)


def _lsgan(score, target: float):
    return F.mean(F.square(F.add_scalar(score, -target)))


def train_cycle(source: Sequence[Volume], target: Sequence[Volume], cfg: CycleTrainConfig | None = None):
    """Train source->target and target->source generators.

    Returns ``(model_s2t, model_t2s, log)``. Volumes are expected to be
    intensity-normalised to [0, 1].
    """
    cfg = cfg or CycleTrainConfig()
    if not source or not target:
        raise ValueError("train_cycle needs at least one volume per domain")
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    mcfg = cfg.model
    g_st = TranslationModel(TranslatorConfig(**{**mcfg.__dict__, "direction": "source_to_target"}),
                            seed=seeds[0])
    g_ts = TranslationModel(TranslatorConfig(**{**mcfg.__dict__, "direction": "target_to_source"}),
                            seed=seeds[1])
    d_t = Discriminator(cfg.disc_width, seed=seeds[2])
    d_s = Discriminator(cfg.disc_width, seed=seeds[3])
    rng = np.random.default_rng(seeds[4])
    history = CycleLog()

    def make_opt():
        return adam(cfg.lr, cfg.beta1, cfg.beta2)

    opts = {name: make_opt() for name in ("g_st", "g_ts", "d_t", "d_s")}
    nets = {"g_st": g_st, "g_ts": g_ts, "d_t": d_t, "d_s": d_s}

    for it in range(cfg.steps):
        xs = sample_minis(source, cfg.batch_size, rng)
        xt = sample_minis(target, cfg.batch_size, rng)
        for net in nets.values():
            net.params.zero_grad()

        fake_t = g_st(xs)
        fake_s = g_ts(xt)
        rec_s = g_ts(fake_t)
        rec_t = g_st(fake_s)
        adv = F.add(_lsgan(d_t(fake_t), 1.0), _lsgan(d_s(fake_s), 1.0))
        cyc = F.add(F.mean(F.abs(F.sub(rec_s, xs))), F.mean(F.abs(F.sub(rec_t, xt))))
        F.add(adv, F.scale(cyc, cfg.lambda_cyc)).backward()
        step(opts["g_st"], g_st.params)
        step(opts["g_ts"], g_ts.params)

        d_t.params.zero_grad()
        d_s.params.zero_grad()
        loss_dt = F.scale(F.add(_lsgan(d_t(xt), 1.0), _lsgan(d_t(fake_t.data), 0.0)), 0.5)
        loss_ds = F.scale(F.add(_lsgan(d_s(xs), 1.0), _lsgan(d_s(fake_s.data), 0.0)), 0.5)
        loss_d = F.add(loss_dt, loss_ds)
        loss_d.backward()
        step(opts["d_t"], d_t.params)
        step(opts["d_s"], d_s.params)

        history.generator.append(float(adv.data))
        history.cycle.append(float(cyc.data))
        history.discriminator.append(float(loss_d.data))
        if log.isEnabledFor(logging.DEBUG) and it % 100 == 0:
            log.debug("cycle step %d: adv %.4f cyc %.4f disc %.4f", it, float(adv.data),
                      float(cyc.data), float(loss_d.data))
    return g_st, g_ts, history
