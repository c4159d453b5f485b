"""JSON run configuration with strict structural validation.

Schema (every section optional, unknown keys rejected)::

    {
      "seed": 0,
      "dataset_seed": 0,
      "output_dir": "runs/demo",
      "held_out_domain": 2,
      "val_fraction": 0.1,
      "dataset":   {DatasetConfig fields},
      "model":     {PyramidSpec fields},
      "stages":    [{"stage_index": 1, ...StagePlan overrides}, ...],
      "distill":   {DistillConfig fields},
      "shakedrop": {ShakeDropConfig fields},
      "augment":   {AugmentConfig fields},
      "landscape": {"r": 1.0, "steps": 41, "mode": "filter", "samples": 256, "split": "train"}
    }

Stage entries override the desk defaults of their ``stage_index``.
``seed`` drives initialization, splits and training order; the synthetic
data depend only on ``dataset_seed``.  ``FLATLAND_SEED`` in the
environment replaces ``seed``.
"""
from __future__ import annotations

import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import AugmentConfig, DatasetConfig
from .distill import DistillConfig
from .models import PyramidSpec
from .pipeline import StagePlan, default_plans, validate_plans
from .regularizers import ShakeDropConfig

SEED_ENV = "FLATLAND_SEED"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class LandscapeConfig:
    r: float = 1.0
    steps: int = 41
    mode: str = "filter"
    samples: int = 256
    split: str = "train"

    def __post_init__(self):
        if self.mode not in ("filter", "global", "none"):
            raise ValueError("mode must be filter, global or none")
        if self.split not in ("train", "val", "test"):
            raise ValueError("split must be train, val or test")
        if self.r <= 0 or self.samples < 1:
            raise ValueError("r must be positive and samples >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    dataset_seed: int = 0
    output_dir: str = "runs/default"
    held_out_domain: int = 2
    val_fraction: float = 0.1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: PyramidSpec = field(default_factory=PyramidSpec)
    stages: list[StagePlan] = field(default_factory=default_plans)
    distill: DistillConfig = field(default_factory=DistillConfig)
    shakedrop: ShakeDropConfig = field(default_factory=ShakeDropConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form (output_dir excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()

    def plan(self, stage_index: int) -> StagePlan:
        for p in self.stages:
            if p.stage_index == stage_index:
                return p
        raise KeyError(f"no stage {stage_index} in config")


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _check_scalar(value, typ, path):
    if typ is float and isinstance(value, bool) or typ is int and isinstance(value, bool):
        raise ConfigError(path, f"expected {typ.__name__}, got bool")
    if not isinstance(value, _SCALARS[typ]):
        raise ConfigError(path, f"expected {typ.__name__}, got {type(value).__name__}")
    return typ(value)


def _convert(value, typ, path):
    origin = typing.get_origin(typ)
    if typ in _SCALARS:
        return _check_scalar(value, typ, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        args = typing.get_args(typ)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_convert(v, a, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    return value


def _build(cls, data, path, base: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = dict(base or {})
    for key, value in data.items():
        kwargs[key] = _convert(value, hints[key], f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _stages(data, path="stages") -> list[StagePlan]:
    if not isinstance(data, list) or not data:
        raise ConfigError(path, "expected a non-empty list of stage objects")
    defaults = {p.stage_index: asdict(p) for p in default_plans()}
    plans = []
    for i, entry in enumerate(data):
        p = f"{path}[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(p, "expected an object")
        idx = entry.get("stage_index")
        if idx not in defaults:
            raise ConfigError(f"{p}.stage_index", "must be one of 1, 2, 3, 4")
        plans.append(_build(StagePlan, entry, p, defaults[idx]))
    try:
        validate_plans(plans)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    return plans


_SECTIONS = {"dataset": DatasetConfig, "model": PyramidSpec, "distill": DistillConfig,
             "shakedrop": ShakeDropConfig, "augment": AugmentConfig, "landscape": LandscapeConfig}


def parse_config(data: dict, env: typing.Mapping[str, str] | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown key")
    kw = {}
    for key in ("seed", "dataset_seed", "held_out_domain"):
        if key in data:
            kw[key] = _check_scalar(data[key], int, key)
    if "val_fraction" in data:
        kw["val_fraction"] = _check_scalar(data["val_fraction"], float, "val_fraction")
        if not 0 < kw["val_fraction"] < 1:
            raise ConfigError("val_fraction", "must lie in (0, 1)")
    if "output_dir" in data:
        kw["output_dir"] = _check_scalar(data["output_dir"], str, "output_dir")
    for key, cls in _SECTIONS.items():
        if key in data:
            kw[key] = _build(cls, data[key], key)
    if "stages" in data:
        kw["stages"] = _stages(data["stages"])
    cfg = RunConfig(**kw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}") from None
    if not 0 <= cfg.held_out_domain < cfg.dataset.num_domains:
        raise ConfigError("held_out_domain", f"must lie in [0, {cfg.dataset.num_domains})")
    if cfg.model.num_classes != cfg.dataset.num_classes:
        raise ConfigError("model.num_classes", "must equal dataset.num_classes")
    for p in cfg.stages:
        try:
            cfg.model.stage_resolutions(p.resolution)
        except ValueError as exc:
            raise ConfigError(f"stages[{cfg.stages.index(p)}].resolution", str(exc)) from None
    return cfg


def load_config(path, env: typing.Mapping[str, str] | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    return parse_config(data, env)


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict`` (ignores the environment)."""
    return parse_config(d, env={})
