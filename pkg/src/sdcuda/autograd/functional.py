"""Differentiable operators.

Each function takes and returns :class:`Tensor` objects. Elementwise binary
ops follow numpy broadcasting; gradients are summed back to the operand
shape. Convolutions use NCHW layout.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_node(out, (a, b), bw, "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_node(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def add_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data + x.data.dtype.type(c), (x,), lambda g: (g,), "add_scalar")


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope).astype(x.data.dtype)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inverse),), "permute")


def slice(x, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    """Take ``x[start:stop]`` along one axis."""
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[axis]:
        raise ValueError(f"slice [{start}:{stop}] outside axis of extent {x.shape[axis]}")
    index = [np.s_[:]] * x.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_node(x.data[index].copy(), (x,), bw, "slice")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product. ``b`` may be 2-D and shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out.reshape(*lead, weight.shape[0]), parents, bw, "linear")


# ---------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * weight.data if weight is not None else g
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return make_node(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------- convolutions

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xl: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Channels-last ``(B, Hp, Wp, C)`` to patch rows ``(B*Ho*Wo, C*kh*kw)``."""
    win = np.lib.stride_tricks.sliding_window_view(xl, (kh, kw), axis=(1, 2))
    win = win[:, :stride * (Ho - 1) + 1:stride, :stride * (Wo - 1) + 1:stride]
    return win.reshape(-1, xl.shape[3] * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col` into a ``shape`` channels-last array."""
    B, _, _, C = shape
    cols = cols.reshape(B, Ho, Wo, C, kh, kw)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += cols[..., i, j]
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` (B, Cin, H, W), ``weight`` (Cout, Cin, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    Ho, Wo = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d kernel {kh}x{kw} too large for input {H}x{W}")
    xl = x.data.transpose(0, 2, 3, 1)
    if padding:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xl, kh, kw, stride, Ho, Wo)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gxl = _col2im(g2 @ wmat, xl.shape, kh, kw, stride, Ho, Wo)
        gx = gxl[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    out = out.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    return make_node(np.ascontiguousarray(out), parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` has shape (Cin, Cout, kh, kw).

    Output extent is ``(H - 1) * stride - 2 * padding + kh``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-D input and weight")
    B, cin, H, W = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ValueError(f"conv_transpose2d channel mismatch: input {cin}, weight {wcin}")
    Hp, Wp = (H - 1) * stride + kh, (W - 1) * stride + kw
    Ho, Wo = Hp - 2 * padding, Wp - 2 * padding
    if Ho < 1 or Wo < 1:
        raise ValueError("conv_transpose2d padding removes the whole output")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.reshape(cin, -1)
    outp = _col2im(x2 @ wmat, (B, Hp, Wp, cout), kh, kw, stride, H, W)
    out = outp[:, padding:padding + Ho, padding:padding + Wo, :]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gp = np.zeros((B, Hp, Wp, cout), dtype=g.dtype)
        gp[:, padding:padding + Ho, padding:padding + Wo, :] = g.transpose(0, 2, 3, 1)
        gcols = _im2col(gp, kh, kw, stride, H, W)
        gx = (gcols @ wmat.T).reshape(B, H, W, cin).transpose(0, 3, 1, 2)
        gw = (x2.T @ gcols).reshape(weight.shape)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_node(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), parents, bw,
                     "conv_transpose2d")


# ---------------------------------------------------------------- attention

def attention(q, k, v, scale_by: Optional[float] = None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1] if scale_by is None else scale_by
    rank = k.ndim
    axes = list(range(rank - 2)) + [rank - 1, rank - 2]
    scores = scale(matmul(q, permute(k, axes)), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)
