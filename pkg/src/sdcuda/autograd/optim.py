from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def sgd(lr: float = 1e-2, momentum: float = 0.0) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr, momentum=momentum)


def adam(lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def step(opt: OptimizerState, params: ParamSet, grads: dict | None = None) -> ParamSet:
    """Apply one update in place and return ``params``.

    ``grads`` defaults to the gradients accumulated on the parameters.
    """
    if grads is None:
        grads = params.grads()
    opt.t += 1
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        g = g.astype(p.data.dtype, copy=False)
        if opt.kind == "sgd":
            if opt.momentum:
                buf = opt.buffers.get(name)
                buf = g.copy() if buf is None else opt.momentum * buf + g
                opt.buffers[name] = buf
                g = buf
            p.data = p.data - p.data.dtype.type(opt.lr) * g
        else:
            m, v = opt.buffers.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = opt.beta1 * m + (1 - opt.beta1) * g
            v = opt.beta2 * v + (1 - opt.beta2) * g * g
            opt.buffers[name] = (m, v)
            m_hat = m / (1 - opt.beta1 ** opt.t)
            v_hat = v / (1 - opt.beta2 ** opt.t)
            p.data = (p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(p.data.dtype)
    return params
