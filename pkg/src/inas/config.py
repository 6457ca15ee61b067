"""Run configuration: a flat-sectioned TOML document with explicit versioning.

Unknown sections or keys are rejected; the fully-resolved config (defaults
applied) is echoed into every run directory.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_VERSION = 1

KIND_CHOICES = ("BasicConv", "MBConv-3F-3K", "MBConv-3F-6K", "MBConv-5F-3K", "MBConv-5F-6K")


class ConfigError(ValueError):
    pass


@dataclass
class MetagraphSection:
    channels: list = field(default_factory=lambda: [16, 24, 24, 32, 32, 64, 64, 96, 96])
    strides: list = field(default_factory=lambda: [1, 2, 1, 2, 1, 2, 1, 1])
    kinds: list = field(default_factory=lambda: list(KIND_CHOICES))


@dataclass
class ControllerSection:
    alpha_start: float = 0.8
    alpha_end: float = 0.95
    entropy_coef: float = 0.01
    lr: float = 0.0005


@dataclass
class RewardSection:
    task_reward: float = 30.0
    clamp: bool = True


@dataclass
class ScheduleSection:
    bound_sample_size: int = 256
    reference_latency_ms: float = 0.0   # 0 = estimate of the all-modules architecture
    l0: float = 0.0
    l_final: float = 0.0


@dataclass
class TrainSection:
    pretrain_epochs: int = 10
    joint_epochs: int = 100
    finetune_epochs: int = 10
    batch_size: int = 32
    pretrain_lr: float = 0.1
    metagraph_lr: float = 0.01
    finetune_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    dtype: str = "float32"
    pretrained: str = ""        # path to the pretrain artifact consumed by `search`
    oracle_groups: int = 2
    oracle_examples: int = 256


@dataclass
class DataSection:
    source: str = "synthetic"   # or "idx"
    n_train: int = 1024
    n_val: int = 256
    n_test: int = 512
    num_classes: int = 4
    hard_fraction: float = 0.5
    image_size: int = 32
    image_channels: int = 1
    images_path: str = ""
    labels_path: str = ""
    groups_path: str = ""
    crop_padding: int = 4
    flip_prob: float = 0.5
    cutout_side: int = 8


@dataclass
class LatencySection:
    table: str = ""             # path to the profiled table consumed by later stages
    warmup: int = 5
    reps: int = 30
    correlation_samples: int = 200
    correlation_threshold: float = 0.9


@dataclass
class SeedsSection:
    data: int = 1
    metagraph: int = 2
    controller: int = 3
    pretrain: int = 4
    search: int = 5
    finetune: int = 6
    profile: int = 7
    oracle: int = 8
    bounds: int = 9


@dataclass
class AblationsSection:
    static_reward: bool = False
    no_shuffle: bool = False


_SECTIONS = {
    "metagraph": MetagraphSection,
    "controller": ControllerSection,
    "reward": RewardSection,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "data": DataSection,
    "latency": LatencySection,
    "seeds": SeedsSection,
    "ablations": AblationsSection,
}


@dataclass
class RunConfig:
    metagraph: MetagraphSection = field(default_factory=MetagraphSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    reward: RewardSection = field(default_factory=RewardSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    latency: LatencySection = field(default_factory=LatencySection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    ablations: AblationsSection = field(default_factory=AblationsSection)

    def validate(self) -> None:
        t = self.train
        for name in ("pretrain_epochs", "joint_epochs", "finetune_epochs"):
            if getattr(t, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if t.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype must be float32 or float64, got {t.dtype!r}")
        if len(self.metagraph.channels) != len(self.metagraph.strides) + 1:
            raise ConfigError("metagraph.channels must have len(strides)+1 entries")
        for kind in self.metagraph.kinds:
            if kind not in KIND_CHOICES:
                raise ConfigError(f"metagraph.kinds: unknown kind {kind!r}")
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be synthetic or idx, got {self.data.source!r}")
        if not 0.5 <= self.controller.alpha_start <= 1.0 or not 0.5 <= self.controller.alpha_end <= 1.0:
            raise ConfigError("controller.alpha_start/alpha_end must be in [0.5, 1]")
        if self.reward.task_reward <= 0:
            raise ConfigError("reward.task_reward must be > 0")


def _coerce(section_name: str, cls, values: dict):
    valid = {f.name: f for f in fields(cls)}
    out = cls()
    for key, value in values.items():
        if key not in valid:
            raise ConfigError(f"unknown key [{section_name}] {key!r}")
        default = getattr(out, key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{section_name}] {key} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[{section_name}] {key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{section_name}] {key} must be a number")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"[{section_name}] {key} must be a string")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"[{section_name}] {key} must be a list")
        setattr(out, key, value)
    return out


def from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    version = doc.pop("config_version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version must be {CONFIG_VERSION}, got {version!r}")
    kwargs = {}
    for name, payload in doc.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(payload, dict):
            raise ConfigError(f"[{name}] must be a section")
        kwargs[name] = _coerce(name, _SECTIONS[name], payload)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return from_dict(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def to_toml(cfg: RunConfig) -> str:
    lines = [f"config_version = {CONFIG_VERSION}", ""]
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_toml(cfg))
