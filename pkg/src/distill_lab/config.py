"""Experiment configuration: INI-style sections of key = value pairs.

Grammar (full key list in the README): sections [schedule], [subsequence],
[dataset], [training], [distill], [output]; values are numbers, comma
-separated pairs/lists, or names. Unknown sections or keys are rejected
with the offending name. CLI flags override file values.
"""

from __future__ import annotations

import configparser
import typing
from dataclasses import dataclass, field, replace

import numpy as np

from .denoiser import ClassSpec, TrainConfig, check_class_separation
from .errors import ConfigError
from .schedule import NoiseSchedule, TimestepSubsequence, build_linear_schedule, build_subsequence

__all__ = ["ExperimentConfig", "load_config", "DEFAULT_MASTER_SEED"]

DEFAULT_MASTER_SEED = 7


@dataclass(frozen=True)
class ScheduleConfig:
    t: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class SubsequenceConfig:
    stride: int = 2
    lo_ratio: float = 0.02
    hi_ratio: float = 0.98


@dataclass(frozen=True)
class DatasetConfig:
    n: int = 1000
    class1_mean: tuple[float, float] = (-2.0, 0.0)
    class1_std: float = 0.5
    class2_mean: tuple[float, float] = (2.0, 0.0)
    class2_std: float = 0.5
    seed: int = DEFAULT_MASTER_SEED + 1


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 4000
    batch_size: int = 128
    learning_rate: float = 1e-3
    null_cond_prob: float = 0.1
    seed: int = DEFAULT_MASTER_SEED + 2
    hidden: tuple[int, ...] = (64, 64)
    t_embed_dim: int = 8
    sample_omega: float = 2.0


@dataclass(frozen=True)
class DistillConfig:
    objectives: tuple[str, ...] = ("sds", "dds", "pds")
    omega: float = 7.5
    w_mode: str = "const"
    steps: int = 300
    lr: float = 0.01
    optimizer: str = "gd"
    n_runs: int = 20
    base_seed: int = DEFAULT_MASTER_SEED + 3


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    subsequence: SubsequenceConfig = field(default_factory=SubsequenceConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def build_schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.schedule.t, self.schedule.beta_start, self.schedule.beta_end)

    def build_subsequence(self, s: NoiseSchedule) -> TimestepSubsequence:
        return build_subsequence(
            s, self.subsequence.stride, self.subsequence.lo_ratio, self.subsequence.hi_ratio
        )

    def class_params(self) -> tuple[ClassSpec, ClassSpec]:
        return (
            ClassSpec(mean=np.asarray(self.dataset.class1_mean), std=self.dataset.class1_std),
            ClassSpec(mean=np.asarray(self.dataset.class2_mean), std=self.dataset.class2_std),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.training.steps,
            batch_size=self.training.batch_size,
            learning_rate=self.training.learning_rate,
            null_cond_prob=self.training.null_cond_prob,
            seed=self.training.seed,
        )


_SECTIONS = {
    "schedule": ScheduleConfig,
    "subsequence": SubsequenceConfig,
    "dataset": DatasetConfig,
    "training": TrainingConfig,
    "distill": DistillConfig,
    "output": OutputConfig,
}


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        # tuple-valued keys: comma-separated entries
        origin = kind.__args__[0] if hasattr(kind, "__args__") else float
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if origin is float:
            return tuple(float(p) for p in parts)
        if origin is int:
            return tuple(int(p) for p in parts)
        return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for key '{key}': {raw!r} ({exc})") from exc


def _coerce_section(name: str, cls, items: dict[str, str]):
    known = _ANNOTATIONS[cls]
    values = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [{name}]")
        values[key] = _parse_value(raw, known[key], f"{name}.{key}")
    return cls(**values)


_ANNOTATIONS = {cls: typing.get_type_hints(cls) for cls in _SECTIONS.values()}


def load_config(
    path: str | None = None,
    master_seed: int | None = None,
    out_dir: str | None = None,
) -> ExperimentConfig:
    """Load a config file (or pure defaults) and apply CLI overrides.

    ``master_seed`` rebases every component seed (dataset, training,
    distillation) so one flag reseeds the whole experiment. Construction
    of the schedule, subsequence and class parameters is attempted
    immediately so bad values fail at parse time.
    """
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            coerced = _coerce_section(section, _SECTIONS[section], dict(parser.items(section)))
            cfg = replace(cfg, **{section: coerced})
    if master_seed is not None:
        cfg = replace(
            cfg,
            dataset=replace(cfg.dataset, seed=master_seed + 1),
            training=replace(cfg.training, seed=master_seed + 2),
            distill=replace(cfg.distill, base_seed=master_seed + 3),
        )
    if out_dir is not None:
        cfg = replace(cfg, output=OutputConfig(dir=out_dir))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        s = cfg.build_schedule()
        cfg.build_subsequence(s)
        check_class_separation(cfg.class_params())
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.distill.objectives:
        raise ConfigError("distill.objectives must name at least one objective")
    for objective in cfg.distill.objectives:
        if objective not in ("sds", "dds", "pds"):
            raise ConfigError(f"unknown objective '{objective}' in distill.objectives")
    if cfg.distill.w_mode not in ("const", "one_minus_alpha_bar"):
        raise ConfigError(f"unknown distill.w_mode '{cfg.distill.w_mode}'")
    if cfg.distill.optimizer not in ("gd", "adam"):
        raise ConfigError(f"unknown distill.optimizer '{cfg.distill.optimizer}'")
    if cfg.distill.n_runs < 1:
        raise ConfigError(f"distill.n_runs must be >= 1, got {cfg.distill.n_runs}")
    if cfg.distill.steps < 0:
        raise ConfigError(f"distill.steps must be >= 0, got {cfg.distill.steps}")
    if cfg.distill.lr <= 0:
        raise ConfigError(f"distill.lr must be positive, got {cfg.distill.lr}")
