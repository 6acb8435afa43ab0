"""SDCP1 parameter checkpoints.

Layout: the magic line ``SDCP1\\n``, one UTF-8 JSON manifest line listing
``{"name", "shape"}`` per parameter in order, then the concatenated
little-endian float32 values.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .params import ParamSet

MAGIC = b"SDCP1\n"


class CheckpointError(ValueError):
    pass


def save_params(params: ParamSet, path: str | os.PathLike) -> None:
    entries = [{"name": n, "shape": list(t.shape)} for n, t in params.items()]
    manifest = json.dumps({"params": entries}, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes()
                       for _, t in params.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC + manifest + b"\n" + payload)


def read_params(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing SDCP1 magic")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: unterminated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    payload = raw[end + 1:]
    out: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload too short for {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                           offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return out


def load_params(params: ParamSet, path: str | os.PathLike) -> ParamSet:
    params.load_state(read_params(path))
    return params
