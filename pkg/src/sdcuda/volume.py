"""Volumes, label volumes, the ``.svol`` container and mini-volume handling.

The slice axis is always axis 0: a volume of dims ``(D, H, W)`` holds ``D``
slices of ``H x W`` voxels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

Spacing = tuple[float, float, float]


class VolumeFormatError(ValueError):
    """Raised for malformed or invalid ``.svol`` files and volume data."""


def _check_spacing(spacing) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise VolumeFormatError(f"spacing must be three positive numbers, got {spacing}")
    return sp  # type: ignore[return-value]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar image stored as float32 ``(D, H, W)``."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeFormatError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise VolumeFormatError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Per-voxel class indices in ``[0, num_classes)``; class 0 is background."""

    data: np.ndarray
    num_classes: int
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise VolumeFormatError(f"label data must be a non-empty 3D array, got shape {raw.shape}")
        if self.num_classes < 2:
            raise VolumeFormatError("num_classes must be at least 2")
        if raw.dtype.kind == "f":
            if not np.isfinite(raw).all() or (raw != np.round(raw)).any():
                raise VolumeFormatError("label values must be integers")
        arr = raw.astype(np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise VolumeFormatError(
                f"class index out of range [0, {self.num_classes}): "
                f"found {int(arr.min())}..{int(arr.max())}")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def mask(self, c: int) -> np.ndarray:
        return self.data == c

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return LabelVolume(data, self.num_classes, self.spacing)


@dataclass(frozen=True, eq=False)
class MiniVolume:
    """Three consecutive slices ``(t-1, t, t+1)`` centred on ``center_index``."""

    slices: np.ndarray
    center_index: int

    def __post_init__(self):
        arr = np.array(self.slices, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise VolumeFormatError(f"mini-volume needs shape (3, H, W), got {arr.shape}")
        object.__setattr__(self, "slices", _frozen(arr))

    @property
    def center(self) -> np.ndarray:
        return self.slices[1]

    @property
    def plane_shape(self) -> tuple[int, int]:
        return self.slices.shape[1:]  # type: ignore[return-value]


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: Spacing
    kind: str = "image"
    num_classes: Optional[int] = None
    dtype: str = "f32"
    endianness: str = field(default="little")

    def __post_init__(self):
        if self.dtype != "f32":
            raise VolumeFormatError(f"unsupported dtype {self.dtype!r}")
        if self.endianness != "little":
            raise VolumeFormatError("only little-endian payloads are supported")
        if self.kind not in ("image", "label"):
            raise VolumeFormatError(f"unknown kind {self.kind!r}")
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise VolumeFormatError(f"dims must be three positive integers, got {self.dims}")
        if self.kind == "label" and (self.num_classes is None or self.num_classes < 2):
            raise VolumeFormatError("label files need num_classes >= 2")

    @property
    def voxel_count(self) -> int:
        d, h, w = self.dims
        return int(d) * int(h) * int(w)

    def to_json(self) -> str:
        obj = {"dims": [int(d) for d in self.dims],
               "spacing": [float(s) for s in self.spacing],
               "dtype": self.dtype,
               "kind": self.kind}
        if self.kind == "label":
            obj["num_classes"] = int(self.num_classes)
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "VolumeHeader":
        try:
            obj = json.loads(text)
        except ValueError as exc:
            raise VolumeFormatError(f"header is not valid JSON: {exc}") from exc
        unknown = set(obj) - {"dims", "spacing", "dtype", "kind", "num_classes"}
        if unknown:
            raise VolumeFormatError(f"unknown header keys {sorted(unknown)}")
        try:
            dims = tuple(int(d) for d in obj["dims"])
            spacing = _check_spacing(obj["spacing"])
        except KeyError as exc:
            raise VolumeFormatError(f"header missing key {exc}") from exc
        return cls(dims=dims, spacing=spacing, kind=obj.get("kind", "image"),
                   num_classes=obj.get("num_classes"), dtype=obj.get("dtype", "f32"))


def encode_volume(v: Union[Volume, LabelVolume]) -> bytes:
    if isinstance(v, LabelVolume):
        header = VolumeHeader(v.dims, v.spacing, kind="label", num_classes=v.num_classes)
    else:
        header = VolumeHeader(v.dims, v.spacing, kind="image")
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    return header.to_json().encode("utf-8") + b"\n" + payload


def decode_volume(raw: bytes) -> Union[Volume, LabelVolume]:
    end = raw.find(b"\n")
    if end < 0:
        raise VolumeFormatError("missing header line")
    header = VolumeHeader.from_json(raw[:end].decode("utf-8"))
    payload = raw[end + 1:]
    if len(payload) != 4 * header.voxel_count:
        raise VolumeFormatError(
            f"payload length mismatch: header declares {header.voxel_count} voxels, "
            f"payload holds {len(payload) / 4:g}")
    data = np.frombuffer(payload, dtype="<f4").reshape(header.dims)
    if header.kind == "label":
        return LabelVolume(data, header.num_classes, header.spacing)
    return Volume(data, header.spacing)


def save_volume(v: Union[Volume, LabelVolume], path: Union[str, os.PathLike]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_volume(v))


def load_volume(path: Union[str, os.PathLike]) -> Union[Volume, LabelVolume]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such volume file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return decode_volume(raw)
    except VolumeFormatError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def extract_mini_volume(v: Volume, t: int) -> MiniVolume:
    """Slices ``(t-1, t, t+1)``; indices beyond the volume are clamped."""
    D = v.depth
    if not 0 <= t < D:
        raise IndexError(f"slice index {t} out of range for depth {D}")
    idx = [max(t - 1, 0), t, min(t + 1, D - 1)]
    return MiniVolume(v.data[idx], t)


def stack_center_slices(minis: Sequence[MiniVolume], spacing: Spacing = (1.0, 1.0, 1.0)) -> Volume:
    """Rebuild a volume from the centre slice of each translated mini-volume."""
    if not minis:
        raise ValueError("no mini-volumes to stack")
    centers = [m.center_index for m in minis]
    if len(set(centers)) != len(centers):
        raise ValueError(f"duplicate center index in slice coverage: {centers}")
    if centers != list(range(len(minis))):
        raise ValueError(f"gap in slice coverage: centers {centers}")
    shapes = {m.plane_shape for m in minis}
    if len(shapes) != 1:
        raise ValueError(f"mini-volume shape mismatch: {sorted(shapes)}")
    return Volume(np.stack([m.center for m in minis]), spacing)


def normalize_intensity(v: Volume, mode: str = "minmax") -> Volume:
    x = v.data.astype(np.float64)
    if mode == "minmax":
        lo, hi = x.min(), x.max()
        out = np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)
    elif mode == "zscore":
        sd = x.std()
        if sd == 0:
            raise ValueError("cannot z-score a constant volume")
        out = (x - x.mean()) / sd
    else:
        raise ValueError(f"unknown normalisation mode {mode!r}")
    return Volume(out.astype(np.float32), v.spacing)
