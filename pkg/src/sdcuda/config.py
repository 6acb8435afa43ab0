"""Pipeline configuration: TOML in, validated and fully normalized out.

Unknown keys are rejected with a close-match suggestion. A normalized
config re-validates to itself.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Optional

import tomli
import tomli_w

from .phantom import IntensityMap, PhantomConfig
from .refinery import MODES, ClassPolicy, RefinementPolicy
from .selftrain import SelfTrainConfig
from .translator import CycleTrainConfig, TranslatorConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


TRANSLATION_KEYS = {
    "steps": 2000, "lambda_cyc": 10.0, "lr": 1e-3, "beta1": 0.5, "beta2": 0.999, "batch_size": 1,
    "seed": 0, "disc_width": 16, "patch": 2, "d_k": 32, "channels": [8, 16, 16], "slice_attention": True,
}
REFINE_KEYS = {"mode": "both", "tau": 0.3, "alpha": 0.6, "beta": 1.4, "connected": False}
SELFTRAIN_KEYS = {f.name: f.default for f in fields(SelfTrainConfig)}
PHANTOM_KEYS = {f.name for f in fields(PhantomConfig)}
INTENSITY_KEYS = {f.name for f in fields(IntensityMap)}
RUN_KEYS = {"out": "run", "workers": 1}
SECTIONS = ("run", "phantom", "data", "translation", "refinement", "selftrain")


def _reject_unknown(table: dict, allowed, where: str) -> None:
    for key in table:
        if key not in allowed:
            hint = difflib.get_close_matches(key, list(allowed), n=1)
            extra = f"; did you mean '{hint[0]}'?" if hint else ""
            raise ConfigError(f"unknown key '{key}' in [{where}]{extra}")


def _typed(value, default, where: str):
    """Coerce ``value`` to the type of ``default``; ints may stand in for floats."""
    if default is None:
        if value is None or isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where} must be an integer")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where} must be a list of {len(default)} values")
        return [_typed(v, d, f"{where}[{i}]") for i, (v, d) in enumerate(zip(value, default))]
    raise ConfigError(f"{where}: unsupported value")


def _fill(table: dict, defaults: dict, where: str) -> dict:
    _reject_unknown(table, defaults, where)
    return {k: _typed(table.get(k, d), d, f"{where}.{k}") for k, d in defaults.items()}


@dataclass
class PipelineConfig:
    run: dict = field(default_factory=lambda: dict(RUN_KEYS))
    phantom: Optional[dict] = None
    data: Optional[dict] = None
    translation: dict = field(default_factory=lambda: dict(TRANSLATION_KEYS))
    refinement: dict = field(default_factory=dict)
    selftrain: dict = field(default_factory=dict)

    @property
    def out(self) -> str:
        return self.run["out"]

    @property
    def workers(self) -> int:
        return self.run["workers"]

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(**(self.phantom or {}))

    @property
    def num_classes(self) -> Optional[int]:
        if self.phantom is not None:
            return self.phantom["num_classes"]
        return None

    def cycle_config(self, plane: tuple[int, int]) -> CycleTrainConfig:
        t = self.translation
        model = TranslatorConfig(plane=tuple(plane), channels=tuple(t["channels"]), d_k=t["d_k"],
                                 patch=t["patch"], slice_attention=t["slice_attention"])
        return CycleTrainConfig(steps=t["steps"], lambda_cyc=t["lambda_cyc"], lr=t["lr"], beta1=t["beta1"],
                                beta2=t["beta2"], batch_size=t["batch_size"], seed=t["seed"],
                                disc_width=t["disc_width"], model=model)

    def policy(self, num_classes: int) -> RefinementPolicy:
        r = self.refinement
        base = {k: r[k] for k in REFINE_KEYS}
        classes = {c: ClassPolicy(**base) for c in range(1, num_classes)}
        for key, over in r.get("classes", {}).items():
            c = int(key)
            if not 1 <= c < num_classes:
                raise ConfigError(f"refinement.classes.{key}: class not in dataset (1..{num_classes - 1})")
            classes[c] = ClassPolicy(**{**base, **over})
        return RefinementPolicy(classes)

    def selftrain_config(self) -> SelfTrainConfig:
        return SelfTrainConfig(**self.selftrain)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"run": self.run, "translation": self.translation,
                             "refinement": self.refinement, "selftrain": self.selftrain}
        if self.phantom is not None:
            d["phantom"] = self.phantom
        if self.data is not None:
            d["data"] = self.data
        return _strip_none(d)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d.get(n) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every seed (phantom, translation, self-training) set to ``seed``."""
        d = json.loads(json.dumps(self.to_dict()))
        for sec in ("phantom", "translation", "selftrain"):
            if sec in d:
                d[sec]["seed"] = seed
        return normalize(d)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    return d


def _check_policy(table: dict, where: str) -> None:
    if table["mode"] not in MODES:
        raise ConfigError(f"{where}.mode must be one of {', '.join(MODES)}, got '{table['mode']}'")
    if not 0 <= table["tau"] <= 1:
        raise ConfigError(f"{where}: tau must satisfy 0 <= tau <= 1, got {table['tau']}")
    if not 0 < table["alpha"] < table["beta"]:
        raise ConfigError(f"{where}: need 0 < alpha < beta, got alpha={table['alpha']}, beta={table['beta']}")


def _normalize_phantom(raw: dict) -> dict:
    _reject_unknown(raw, PHANTOM_KEYS, "phantom")
    defaults = PhantomConfig().to_dict()
    out = {}
    for k, d in defaults.items():
        if k in ("source", "target"):
            sub = raw.get(k, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"phantom.{k} must be a table")
            _reject_unknown(sub, INTENSITY_KEYS, f"phantom.{k}")
            filled = {}
            for kk, dv in d.items():
                v = sub.get(kk, dv)
                if isinstance(dv, list):
                    if not isinstance(v, list) or not all(isinstance(e, (int, float)) for e in v):
                        raise ConfigError(f"phantom.{k}.{kk} must be a list of numbers")
                    filled[kk] = [float(e) for e in v]
                else:
                    filled[kk] = _typed(v, dv, f"phantom.{k}.{kk}")
            out[k] = filled
        else:
            out[k] = _typed(raw.get(k, d), d, f"phantom.{k}")
    try:
        PhantomConfig(**out)
    except ValueError as exc:
        raise ConfigError(f"phantom: {exc}") from None
    return out


def normalize(raw: dict) -> PipelineConfig:
    """Validate a parsed config mapping and fill every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table")
    _reject_unknown(raw, SECTIONS, "top level")
    for sec, value in raw.items():
        if not isinstance(value, dict):
            raise ConfigError(f"[{sec}] must be a table")
    if "phantom" in raw and "data" in raw:
        raise ConfigError("give either [phantom] or [data], not both")

    run = _fill(raw.get("run", {}), RUN_KEYS, "run")
    if run["workers"] < 1:
        raise ConfigError(f"run.workers must be >= 1, got {run['workers']}")

    phantom = None
    data = None
    if "data" in raw:
        data = _fill(raw["data"], {"dir": ""}, "data")
        if not data["dir"]:
            raise ConfigError("data.dir is required")
    else:
        phantom = _normalize_phantom(raw.get("phantom", {}))

    translation = _fill(raw.get("translation", {}), TRANSLATION_KEYS, "translation")
    t = translation
    if t["steps"] < 0 or t["lambda_cyc"] < 0 or t["lr"] <= 0 or t["batch_size"] < 1:
        raise ConfigError("translation: need steps >= 0, lambda_cyc >= 0, lr > 0, batch_size >= 1")
    if t["patch"] < 1 or t["d_k"] < 1 or min(t["channels"]) < 1:
        raise ConfigError("translation: patch, d_k and channels must be positive")
    if phantom is not None:
        H, W = phantom["dims"][1:]
        if H % (4 * t["patch"]) or W % (4 * t["patch"]):
            raise ConfigError(f"translation.patch: plane {H}x{W} must be divisible by 4*patch={4 * t['patch']}")

    rraw = dict(raw.get("refinement", {}))
    classes_raw = rraw.pop("classes", {})
    refinement = _fill(rraw, REFINE_KEYS, "refinement")
    _check_policy(refinement, "refinement")
    if not isinstance(classes_raw, dict):
        raise ConfigError("refinement.classes must be a table")
    classes = {}
    for key, over in sorted(classes_raw.items(), key=lambda kv: str(kv[0])):
        where = f"refinement.classes.{key}"
        if not str(key).isdigit() or int(key) < 1:
            raise ConfigError(f"{where}: class keys must be foreground class indices >= 1")
        if not isinstance(over, dict):
            raise ConfigError(f"{where} must be a table")
        filled = _fill(over, {k: refinement[k] for k in REFINE_KEYS}, where)
        _check_policy(filled, f"class {key}")
        classes[str(int(key))] = filled
        if phantom is not None and int(key) >= phantom["num_classes"]:
            raise ConfigError(f"{where}: class not in dataset (1..{phantom['num_classes'] - 1})")
    refinement["classes"] = classes

    selftrain = _fill(raw.get("selftrain", {}), SELFTRAIN_KEYS, "selftrain")
    try:
        SelfTrainConfig(**selftrain)
    except ValueError as exc:
        raise ConfigError(f"selftrain: {exc}") from None
    return PipelineConfig(run, phantom, data, translation, refinement, selftrain)


def validate_config(path: str | os.PathLike) -> PipelineConfig:
    """Parse and validate a TOML file."""
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return normalize(raw)


def loads(text: str) -> PipelineConfig:
    try:
        return normalize(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
