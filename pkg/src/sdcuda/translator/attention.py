"""Patch embedding and the intra-/inter-slice self-attention operators.

Patch tensors are laid out ``(S, N, d)``: ``S`` slices of a mini-volume,
``N`` patches per slice, embedding width ``d``. A leading batch axis
``(B, S, N, d)`` is accepted wherever noted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..autograd import Tensor
from ..autograd import functional as F


@dataclass
class AttentionWeights:
    """Parameters of one attention block: layer-norm affine plus W_Q, W_K, W_V.

    Projection matrices are stored ``(d_out, d_in)`` and applied as
    ``linear(LN(z), W)``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    ln_weight: Optional[Tensor] = None
    ln_bias: Optional[Tensor] = None

    @property
    def d_k(self) -> int:
        return self.wq.shape[0]


def patch_embed(features: Tensor, p: int, weight: Tensor, bias: Optional[Tensor] = None,
                pos: Optional[Tensor] = None) -> Tensor:
    """Embed non-overlapping ``p x p`` blocks of each feature map.

    ``features`` is ``(S, C, H', W')``; ``weight`` is ``(d, C, p, p)``, so
    the embedding of a block is a linear map of its flattened ``C*p*p``
    values. Returns ``(S, N, d)`` with ``N = H' * W' / p**2`` in row-major
    patch order, plus ``pos`` (``(S, N, d)``) when given.
    """
    features = F.as_tensor(features)
    S, C, H, W = features.shape
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide feature map {H}x{W}")
    d = weight.shape[0]
    n = (H // p) * (W // p)
    z = F.conv2d(features, weight, bias, stride=p)
    z = F.permute(F.reshape(z, (S, d, n)), (0, 2, 1))
    if pos is not None:
        z = F.add(z, pos)
    return z


def patch_unembed(z: Tensor, grid: tuple[int, int], weight: Tensor, bias: Optional[Tensor] = None,
                  p: int = 2) -> Tensor:
    """Transposed-convolution inverse of :func:`patch_embed`: ``(S, N, d)`` to ``(S, C, H', W')``."""
    S, N, d = z.shape
    h, w = grid
    if h * w != N:
        raise ValueError(f"patch grid {grid} does not hold {N} patches")
    maps = F.reshape(F.permute(z, (0, 2, 1)), (S, d, h, w))
    return F.conv_transpose2d(maps, weight, bias, stride=p)


def _self_attention(tokens: Tensor, w: AttentionWeights) -> Tensor:
    # tokens (..., T, d); attention runs over T independently per leading index
    normed = F.layer_norm(tokens, w.ln_weight, w.ln_bias)
    q = F.linear(normed, w.wq)
    k = F.linear(normed, w.wk)
    v = F.linear(normed, w.wv)
    return F.attention(q, k, v, scale_by=w.d_k)


def intra_slice_attention(z: Tensor, w: AttentionWeights) -> Tensor:
    """Attention among the ``N`` patches of each slice; slices never mix.

    Accepts ``(S, N, d)`` or ``(B, S, N, d)``.
    """
    if z.ndim == 4:
        B, S, N, d = z.shape
        out = _self_attention(F.reshape(z, (B * S, N, d)), w)
        return F.reshape(out, (B, S, N, d))
    return _self_attention(z, w)


def inter_slice_attention(z: Tensor, w: AttentionWeights) -> Tensor:
    """Attention among the three patches sharing a spatial index ``k``.

    Accepts ``(3, N, d)`` or ``(B, 3, N, d)``; positions never mix.
    """
    batched = z.ndim == 4
    if not batched:
        z = F.reshape(z, (1,) + z.shape)
    B, S, N, d = z.shape
    if S != 3:
        raise ValueError(f"inter-slice attention needs exactly 3 slices, got {S}")
    tokens = F.reshape(F.permute(z, (0, 2, 1, 3)), (B * N, S, d))
    out = _self_attention(tokens, w)
    out = F.permute(F.reshape(out, (B, N, S, d)), (0, 2, 1, 3))
    return out if batched else F.reshape(out, (S, N, d))

