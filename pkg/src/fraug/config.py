"""Experiment configuration.

The on-disk format is one JSON object whose nesting mirrors the dataclasses
below; every key can also be addressed by its dotted path
(``strategy.alpha``, ``train.rounds``) from the command line or from
environment variables named ``FRAUG_`` + the path upper-cased with dots
replaced by double underscores (``FRAUG_TRAIN__ROUNDS=5``). Unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

ENV_PREFIX = "FRAUG_"

STRATEGIES = (
    "fraug",
    "fedavg",
    "fedbn",
    "fedprox",
    "single",
    "all",
    "noise-uniform",
    "noise-laplace",
    "noise-gauss",
)
OPTIMIZERS = ("sgd", "sgd-momentum", "adam")
# Reserved so externally produced metrics can share files and plots.
EXTERNAL_STRATEGIES = ("pfedavg", "fedproto", "partialfed", "harmofl")


class ConfigError(ValueError):
    pass


@dataclass
class StrategyConfig:
    name: str = "fraug"
    alpha: float = 1.0
    beta: float = 1.0
    mu: float = 0.01
    gamma: float = 0.1
    lambda_syn_max: float = 1.0
    lambda_proto_max: float = 0.5
    ramp_fraction: float = 0.25
    ramp_syn_steps: int | None = None
    ramp_proto_steps: int | None = None
    proto_eps: float = 1e-8
    kernel_multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class Toggles:
    use_uhat: bool = True
    use_uhat_c: bool = True
    use_localbn: bool = True
    use_synthetic: bool = True
    use_stage2: bool = True
    literal_prototype_update: bool = False
    sequential_stage1: bool = False
    mmd_prose_variant: bool = False
    weighted_aggregation: bool = False


@dataclass
class ClassifierConfig:
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 64
    batchnorm: bool = True
    bn_momentum: float = 0.1


@dataclass
class GeneratorConfig:
    noise_dim: int = 16
    hidden: int = 16
    conditioning: str = "one-hot"


@dataclass
class RTNetConfig:
    hidden: int = 16
    zero_init: bool = True


@dataclass
class NetworkConfig:
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    rtnet: RTNetConfig = field(default_factory=RTNetConfig)


@dataclass
class DataConfig:
    source: str = "synthetic"
    num_domains: int = 4
    num_classes: int = 5
    dim: int = 20
    class_sep: float = 0.5
    noise_std: float = 1.0
    rotate: bool = False
    scale_range: tuple[float, float] = (0.5, 2.0)
    translation_range: float = 2.0
    concept_shift: float = 0.0
    identity: bool = False
    n_train: int = 200
    n_test: int = 500
    seed: int = 0
    fraction: float = 1.0
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()


@dataclass
class TrainConfig:
    rounds: int = 100
    local_steps: int = 5
    batch_size: int = 32
    optimizer: str = "sgd-momentum"
    optimizer_generator: str | None = None
    optimizer_rtnet: str | None = None
    lr: float = 0.01
    lr_generator: float = 0.01
    lr_rtnet: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    weight_decay_generator: float = 1e-3
    weight_decay_rtnet: float = 0.0
    clip_generator: float | None = 1.0
    clip_rtnet: float | None = 1.0


@dataclass
class RunConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    precision: str = "f32"
    out_dir: str = "runs/default"
    workers: int = 1


@dataclass
class HeadStudyConfig:
    fraction: float = 0.1
    finetune_steps: int = 300


@dataclass
class ExperimentConfig:
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    toggles: Toggles = field(default_factory=Toggles)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)
    headstudy: HeadStudyConfig = field(default_factory=HeadStudyConfig)

    def validate(self) -> "ExperimentConfig":
        if self.strategy.name not in STRATEGIES:
            raise ConfigError(f"strategy.name: unknown strategy {self.strategy.name!r}; expected one of {STRATEGIES}")
        if self.train.rounds < 0 or self.train.local_steps < 0:
            raise ConfigError("train.rounds and train.local_steps must be >= 0")
        if self.train.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 (batch normalization)")
        for key in ("optimizer", "optimizer_generator", "optimizer_rtnet"):
            kind = getattr(self.train, key)
            if kind is not None and kind not in OPTIMIZERS:
                raise ConfigError(f"train.{key}: expected one of {OPTIMIZERS}, got {kind!r}")
        if self.run.precision not in ("f32", "f64"):
            raise ConfigError(f"run.precision: expected f32 or f64, got {self.run.precision!r}")
        if not self.run.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if self.data.num_domains < 1:
            raise ConfigError("data.num_domains: zero clients")
        if not 0 < self.data.fraction <= 1:
            raise ConfigError("data.fraction must be in (0, 1]")
        if self.data.source not in ("synthetic", "tabular"):
            raise ConfigError(f"data.source: expected synthetic or tabular, got {self.data.source!r}")
        if self.strategy.gamma < 0 or self.strategy.mu < 0:
            raise ConfigError("strategy.gamma and strategy.mu must be >= 0")
        if not 0 < self.strategy.lambda_proto_max <= 1:
            raise ConfigError("strategy.lambda_proto_max must be in (0, 1]")
        return self


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{sub}: unknown configuration key")
        kwargs[key] = _coerce(hints[key], value, sub)
    return cls(**kwargs)


def _coerce(hint, value, path):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _coerce(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        inner = args[0] if args else object
        return tuple(_coerce(inner, v, path) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {part} is not a section")
    node[parts[-1]] = value


def env_overrides(environ=None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    out = {}
    for key, raw in sorted(environ.items()):
        if key.startswith(ENV_PREFIX) and "__" in key[len(ENV_PREFIX):]:
            dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
            out[dotted] = _parse_value(raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Defaults, then the file, then environment variables, then ``overrides``."""
    data = to_dict(ExperimentConfig())
    if path is not None:
        try:
            from_file = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        _build(ExperimentConfig, from_file, "")  # reject unknown keys with their path
        _merge(data, from_file)
    for dotted, value in {**env_overrides(environ), **(overrides or {})}.items():
        set_path(data, dotted, value)
    return from_dict(data)


def _merge(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def replace_path(cfg: ExperimentConfig, **dotted) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path keys (``__`` for dots) replaced."""
    data = to_dict(cfg)
    for key, value in dotted.items():
        set_path(data, key.replace("__", "."), value)
    return from_dict(data)
