"""Pipeline configuration: TOML sections per stage, strict keys, validated at load."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .context import ContextConfig, LaneGeometry
from .evaluation import ScoringGeometry
from .model import ModelConfig

CONFIG_ENV = "BEATPOSE_CONFIG"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class PoseSection:
    rate: float = 30.0


@dataclass(frozen=True)
class ContextSection:
    h: int = 15
    T: int = 30
    n: int = 4
    horizon: float = 2.0
    n_ref: int = 4
    stride: int = 1


@dataclass(frozen=True)
class LanesSection:
    column_x: tuple = (-0.9, -0.3, 0.3, 0.9)
    row_y: tuple = (0.8, 1.2, 1.6)
    cell_width: float = 0.6
    cell_height: float = 0.4
    cell_depth: float = 0.6
    z_spawn: float = 0.0
    beam_speed: float = 4.0
    wall_top: float = 2.0
    crouch_bottom: float = 1.2
    placement_yaw: float = 0.0
    placement_xz: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class ModelSection:
    d_z: int = 32
    width: int = 64


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-2
    momentum: float = 0.9
    lambda_match: float = 0.1
    batch_size: int = 16
    steps: int = 1000
    schedule: str = "cosine"


@dataclass(frozen=True)
class RolloutSection:
    stride: int = 10
    blend: int = 0
    restyle_every_window: bool = False


@dataclass(frozen=True)
class EvalSection:
    hit_window: float = 0.20
    min_hand_speed: float = 1.0
    direction_cos_min: float = 0.5
    bomb_radius: float = 0.15
    head_radius: float = 0.10
    substeps: int = 10


_SECTIONS = {
    "pose": PoseSection, "context": ContextSection, "lanes": LanesSection, "model": ModelSection,
    "train": TrainSection, "rollout": RolloutSection, "eval": EvalSection,
}
_TUPLE_LENGTHS = {"column_x": 4, "row_y": 3, "placement_xz": 2}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    pose: PoseSection = field(default_factory=PoseSection)
    context: ContextSection = field(default_factory=ContextSection)
    lanes: LanesSection = field(default_factory=LanesSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in _TUPLE_LENGTHS:
            d["lanes"][key] = list(d["lanes"][key])
        return d

    @property
    def context_config(self) -> ContextConfig:
        c = self.context
        return ContextConfig(h=c.h, T=c.T, n=c.n, horizon=c.horizon, n_ref=c.n_ref, rate=self.pose.rate)

    @property
    def geometry(self) -> LaneGeometry:
        return LaneGeometry(**asdict(self.lanes))

    @property
    def scoring(self) -> ScoringGeometry:
        return ScoringGeometry(**asdict(self.eval), lanes=self.geometry)

    @property
    def model_config(self) -> ModelConfig:
        c = self.context
        return ModelConfig(d_z=self.model.d_z, width=self.model.width, h=c.h, T=c.T, n=c.n, n_ref=c.n_ref)


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        n = _TUPLE_LENGTHS[key.rsplit(".", 1)[1]]
        if not isinstance(value, (list, tuple)) or len(value) != n:
            raise ConfigError(key, f"expected a list of {n} numbers, got {value!r}")
        return tuple(_coerce(f"{key}[{i}]", v, 0.0) for i, v in enumerate(value))
    raise ConfigError(key, "unsupported setting")


def _check(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Check every stage precondition; the first failure names its key path."""
    _check(cfg.pose.rate > 0, "pose.rate", "must be > 0")
    c = cfg.context
    for k in ("h", "T", "n", "n_ref", "stride"):
        _check(getattr(c, k) >= 1, f"context.{k}", "must be >= 1")
    _check(c.horizon > 0, "context.horizon", "must be > 0")
    ln = cfg.lanes
    for k in ("cell_width", "cell_height", "cell_depth", "beam_speed", "wall_top"):
        _check(getattr(ln, k) > 0, f"lanes.{k}", "must be > 0")
    _check(0 < ln.crouch_bottom < ln.wall_top, "lanes.crouch_bottom", "must be in (0, wall_top)")
    _check(cfg.model.d_z >= 1, "model.d_z", "must be >= 1")
    _check(cfg.model.width >= 1, "model.width", "must be >= 1")
    t = cfg.train
    _check(t.lr >= 0, "train.lr", "must be >= 0")
    _check(0 <= t.momentum < 1, "train.momentum", "must be in [0, 1)")
    _check(t.lambda_match >= 0, "train.lambda_match", "must be >= 0")
    _check(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    _check(t.steps >= 0, "train.steps", "must be >= 0")
    _check(t.schedule in ("cosine", "constant"), "train.schedule", "must be 'cosine' or 'constant'")
    r = cfg.rollout
    _check(1 <= r.stride <= c.T, "rollout.stride", f"must be in [1, context.T={c.T}]")
    _check(0 <= r.blend < r.stride, "rollout.blend", "must be in [0, rollout.stride)")
    _check(r.stride + r.blend <= c.T, "rollout.blend", "rollout.stride + rollout.blend must be <= context.T")
    e = cfg.eval
    for k in ("hit_window", "min_hand_speed", "bomb_radius", "head_radius"):
        _check(getattr(e, k) > 0, f"eval.{k}", "must be > 0")
    _check(0 < e.direction_cos_min <= 1, "eval.direction_cos_min", "must be in (0, 1]")
    _check(e.substeps >= 1, "eval.substeps", "must be >= 1")
    _check(cfg.seed >= 0, "seed", "must be >= 0")
    return cfg


def config_from_dict(doc: dict) -> PipelineConfig:
    """Build and validate a config; unknown sections or keys are errors."""
    kwargs = {}
    for name, value in doc.items():
        if name == "seed":
            kwargs["seed"] = _coerce("seed", value, 0)
            continue
        if name not in _SECTIONS:
            raise ConfigError(name, "unknown section")
        if not isinstance(value, dict):
            raise ConfigError(name, "expected a table")
        cls = _SECTIONS[name]
        defaults = {f.name: f.default for f in fields(cls)}
        section = {}
        for key, v in value.items():
            path = f"{name}.{key}"
            if key not in defaults:
                raise ConfigError(path, "unknown key")
            section[key] = _coerce(path, v, defaults[key])
        kwargs[name] = cls(**section)
    return validate_config(PipelineConfig(**kwargs))


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` with a TOML value, as a nested dict."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    path, raw = text.split("=", 1)
    path = path.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare words are strings
    out: dict = {}
    node = out
    parts = path.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides: list[dict] | None = None) -> PipelineConfig:
    """Read TOML from ``path`` (or ``$BEATPOSE_CONFIG``), apply overrides, validate."""
    path = path or os.environ.get(CONFIG_ENV) or None
    doc: dict = {}
    if path:
        try:
            doc = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"{path} is not valid TOML: {exc}") from None
    for o in overrides or []:
        doc = merge(doc, o)
    return config_from_dict(doc)
