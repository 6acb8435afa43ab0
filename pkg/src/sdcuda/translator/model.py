"""2.5D translation generator and the 3-slice patch discriminator."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from ..autograd import ParamSet, Tensor, load_params, no_grad, save_params, uniform_init
from ..autograd import functional as F
from ..volume import MiniVolume, Volume, extract_mini_volume, stack_center_slices
from .attention import AttentionWeights, inter_slice_attention, intra_slice_attention, patch_embed, patch_unembed


@dataclass
class TranslatorConfig:
    """Architecture hyperparameters of one generator.

    ``plane`` is the (H, W) slice shape the learnable positional encoding is
    sized for. The encoder downsamples by 4, so ``4 * patch`` must divide
    both extents.
    """

    plane: tuple[int, int] = (32, 32)
    channels: tuple[int, int, int] = (8, 16, 16)
    d_k: int = 32
    patch: int = 2
    slice_attention: bool = True
    direction: str = "source_to_target"

    def __post_init__(self):
        self.plane = tuple(int(v) for v in self.plane)
        self.channels = tuple(int(v) for v in self.channels)
        if self.d_k <= 0 or self.patch <= 0:
            raise ValueError("d_k and patch must be positive")
        for extent in self.plane:
            if extent % 4 or (extent // 4) % self.patch:
                raise ValueError(
                    f"plane {self.plane} incompatible with 4x encoder downsampling and patch {self.patch}")

    @property
    def feature_plane(self) -> tuple[int, int]:
        return self.plane[0] // 4, self.plane[1] // 4

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.feature_plane
        return h // self.patch, w // self.patch

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w


def _conv_param(params: ParamSet, rng, name, cout, cin, k):
    params.add(f"{name}.w", uniform_init(rng, (cout, cin, k, k), cin * k * k))
    params.add(f"{name}.b", uniform_init(rng, (cout,), cin * k * k))


def _convt_param(params: ParamSet, rng, name, cin, cout, k):
    params.add(f"{name}.w", uniform_init(rng, (cin, cout, k, k), cin * k * k))
    params.add(f"{name}.b", uniform_init(rng, (cout,), cin * k * k))


class TranslationModel:
    """Encoder, intra/inter-slice attention and decoder for one direction.

    The model maps a batch of mini-volumes ``(B, 3, H, W)`` with intensities
    in [0, 1] to translated mini-volumes of the same shape and range.
    """

    def __init__(self, config: TranslatorConfig | None = None, seed: int = 0,
                 params: ParamSet | None = None):
        self.config = config or TranslatorConfig()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    def _init_params(self, rng: np.random.Generator) -> ParamSet:
        cfg = self.config
        c1, c2, c3 = cfg.channels
        d, p = cfg.d_k, cfg.patch
        ps = ParamSet()
        _conv_param(ps, rng, "enc0", c1, 1, 3)
        _conv_param(ps, rng, "enc1", c2, c1, 4)
        _conv_param(ps, rng, "enc2", c3, c2, 4)
        _conv_param(ps, rng, "embed", d, c3, p)
        ps.add("pos", uniform_init(rng, (3, cfg.num_patches, d), d))
        blocks = ("inter", "intra") if cfg.slice_attention else ("intra",)
        for blk in blocks:
            ps.add(f"{blk}.ln.w", np.ones(d, dtype=np.float32))
            ps.add(f"{blk}.ln.b", np.zeros(d, dtype=np.float32))
            for m in ("wq", "wk", "wv"):
                ps.add(f"{blk}.{m}", uniform_init(rng, (d, d), d))
        _convt_param(ps, rng, "unembed", d, c3, p)
        _convt_param(ps, rng, "dec0", c3, c2, 4)
        _convt_param(ps, rng, "dec1", c2, c1, 4)
        _conv_param(ps, rng, "out", 1, c1, 3)
        return ps

    def attention_weights(self, block: str) -> AttentionWeights:
        ps = self.params
        return AttentionWeights(ps[f"{block}.wq"], ps[f"{block}.wk"], ps[f"{block}.wv"],
                                ps[f"{block}.ln.w"], ps[f"{block}.ln.b"])

    def encode(self, x: Tensor) -> Tensor:
        """Shared-weight 2D encoder over a ``(B*3, 1, H, W)`` slice batch."""
        ps = self.params
        h = F.leaky_relu(F.conv2d(x, ps["enc0.w"], ps["enc0.b"], padding=1))
        h = F.leaky_relu(F.conv2d(h, ps["enc1.w"], ps["enc1.b"], stride=2, padding=1))
        return F.leaky_relu(F.conv2d(h, ps["enc2.w"], ps["enc2.b"], stride=2, padding=1))

    def attend(self, z: Tensor) -> Tensor:
        """II-SA on ``(B, 3, N, d)``: residual inter-slice block, then residual intra-slice block."""
        if self.config.slice_attention:
            z = F.add(z, inter_slice_attention(z, self.attention_weights("inter")))
        return F.add(z, intra_slice_attention(z, self.attention_weights("intra")))

    def decode(self, f: Tensor) -> Tensor:
        ps = self.params
        h = F.leaky_relu(F.conv_transpose2d(f, ps["dec0.w"], ps["dec0.b"], stride=2, padding=1))
        h = F.leaky_relu(F.conv_transpose2d(h, ps["dec1.w"], ps["dec1.b"], stride=2, padding=1))
        return F.conv2d(h, ps["out.w"], ps["out.b"], padding=1)

    def forward(self, minis) -> Tensor:
        """Translate a ``(B, 3, H, W)`` (or ``(3, H, W)``) stack; returns the same rank."""
        cfg = self.config
        ps = self.params
        x = F.as_tensor(minis)
        dtype = ps["enc0.w"].dtype
        if x.dtype != dtype:
            x = Tensor(x.data.astype(dtype)) if not x.requires_grad else x
        single = x.ndim == 3
        if single:
            x = F.reshape(x, (1,) + x.shape)
        B, S, H, W = x.shape
        if S != 3 or (H, W) != cfg.plane:
            raise ValueError(f"expected mini-volumes of shape (3, {cfg.plane[0]}, {cfg.plane[1]}), got {(S, H, W)}")
        x = F.add_scalar(F.scale(F.reshape(x, (B * 3, 1, H, W)), 2.0), -1.0)
        feats = self.encode(x)
        z = patch_embed(feats, cfg.patch, ps["embed.w"], ps["embed.b"])
        N, d = cfg.num_patches, cfg.d_k
        z = F.add(F.reshape(z, (B, 3, N, d)), ps["pos"])
        z = F.reshape(self.attend(z), (B * 3, N, d))
        f = F.leaky_relu(patch_unembed(z, cfg.grid, ps["unembed.w"], ps["unembed.b"], p=cfg.patch))
        y = F.tanh(self.decode(f))
        y = F.scale(F.add_scalar(y, 1.0), 0.5)
        y = F.reshape(y, (B, 3, H, W))
        return F.reshape(y, (3, H, W)) if single else y

    __call__ = forward

    def save(self, path: str | os.PathLike) -> None:
        """Write parameters (SDCP1) and the ``<path>.json`` architecture sidecar."""
        save_params(self.params, path)
        with open(f"{path}.json", "w") as fh:
            json.dump(asdict(self.config), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TranslationModel":
        with open(f"{path}.json") as fh:
            config = TranslatorConfig(**json.load(fh))
        model = cls(config)
        load_params(model.params, path)
        return model


class Discriminator:
    """Three stride-2 convolutions scoring a 3-slice stack patch-wise."""

    def __init__(self, width: int = 16, seed: int = 0, slope: float = 0.2):
        rng = np.random.default_rng(seed)
        self.slope = slope
        self.params = ParamSet()
        _conv_param(self.params, rng, "d0", width, 3, 4)
        _conv_param(self.params, rng, "d1", 2 * width, width, 4)
        _conv_param(self.params, rng, "d2", 1, 2 * width, 4)

    def __call__(self, stacks) -> Tensor:
        x = F.as_tensor(stacks)
        if x.ndim == 3:
            x = F.reshape(x, (1,) + x.shape)
        if x.shape[1] != 3:
            raise ValueError(f"discriminator takes 3 slices as channels, got {x.shape[1]}")
        ps = self.params
        h = F.leaky_relu(F.conv2d(x, ps["d0.w"], ps["d0.b"], stride=2, padding=1), self.slope)
        h = F.leaky_relu(F.conv2d(h, ps["d1.w"], ps["d1.b"], stride=2, padding=1), self.slope)
        return F.conv2d(h, ps["d2.w"], ps["d2.b"], stride=2, padding=1)


def translate_mini_volume(model: TranslationModel, mini: MiniVolume) -> MiniVolume:
    with no_grad():
        out = model(mini.slices[None])
    return MiniVolume(out.data[0], mini.center_index)


def translate_volume(model: TranslationModel, v: Volume, workers: int = 1) -> Volume:
    """Translate every mini-volume and stack the centre slices."""
    def one(t: int) -> MiniVolume:
        return translate_mini_volume(model, extract_mini_volume(v, t))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            minis = list(pool.map(one, range(v.depth)))
    else:
        minis = [one(t) for t in range(v.depth)]
    return stack_center_slices(minis, v.spacing)
