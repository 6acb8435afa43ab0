from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: ParamSet, eps: float = 1e-6) -> float:
    """Maximum relative error between backprop and central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar tensor. All parameters must be float64. The relative error of one
    entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"parameter {name!r} is {p.data.dtype}; grad_check needs float64")

    params.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("function value is not finite")
    loss.backward()
    analytic = params.grads()

    def value() -> float:
        out = float(f().data)
        if not np.isfinite(out):
            raise FloatingPointError("function value is not finite")
        return out

    worst = 0.0
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
    params.zero_grad()
    return worst
