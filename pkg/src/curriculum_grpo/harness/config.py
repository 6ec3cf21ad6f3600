"""Run configuration loaded from JSON; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from curriculum_grpo.curriculum import CurriculumSchedule
from curriculum_grpo.grpo import GrpoConfig
from curriculum_grpo.self_improvement import SelfImproveConfig

OUT_DIR_ENV = "CURRICULUM_GRPO_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 8
    hidden: int = 64
    context_k: int = 6
    max_len: int = 48
    init_scale: float = 1.0


@dataclass(frozen=True)
class DataConfig:
    train_per_kind: int = 3000
    eval_per_kind: int = 1000
    heldout_per_kind: int = 1000
    text_tasks_per_domain: int = 200


@dataclass(frozen=True)
class BaseConfig:
    """Format warm-up that turns a random network into a format-following base."""

    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 0.01


@dataclass(frozen=True)
class SftBaselineConfig:
    batch_size: int = 8
    learning_rate: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    stage_budgets: tuple = (834, 833, 833)
    grpo: GrpoConfig = field(default_factory=lambda: GrpoConfig(learning_rate=1e-3))
    batch_size: int = 8
    temperature: float = 1.0
    tau: float = 0.5
    optimizer: str = "adam"
    window: int = 100
    eval_interval: int = 250
    eval_subset: int = 200
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    sft: SftBaselineConfig = field(default_factory=SftBaselineConfig)
    self_improve: SelfImproveConfig = field(default_factory=SelfImproveConfig)
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_budgets", tuple(int(b) for b in self.stage_budgets))
        try:
            CurriculumSchedule(self.stage_budgets)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.temperature >= 0, "temperature must be >= 0"),
            (0 <= self.tau < 1, "tau must lie in [0, 1)"),
            (self.optimizer in ("sgd", "adam"), "optimizer must be 'sgd' or 'adam'"),
            (self.window >= 1, "window must be >= 1"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
            (self.eval_subset >= 1, "eval_subset must be >= 1"),
            (self.model.embed_dim >= 1 and self.model.hidden >= 1, "model dims must be >= 1"),
            (self.model.context_k >= 0, "context_k must be >= 0"),
            (1 <= self.model.max_len <= 256, "max_len must lie in [1, 256]"),
            (self.data.train_per_kind >= 1, "train_per_kind must be >= 1"),
            (self.data.eval_per_kind >= 1 and self.data.heldout_per_kind >= 1, "eval sizes must be >= 1"),
            (self.base.steps >= 0 and self.base.batch_size >= 1, "base steps/batch out of range"),
            (self.sft.batch_size >= 1 and self.sft.learning_rate >= 0, "sft settings out of range"),
            (0 <= self.self_improve.threshold <= 101, "judge threshold must lie in [0, 101]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def total_steps(self) -> int:
        return sum(self.stage_budgets)

    @property
    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.stage_budgets)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV) or self.output_dir)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_budgets"] = list(self.stage_budgets)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_json(d)

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        ftype = _nested_types.get((cls.__name__, name))
        kwargs[name] = _build(ftype, value, f"{where}.{name}") if ftype else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


_nested_types = {
    ("RunConfig", "grpo"): GrpoConfig,
    ("RunConfig", "model"): ModelConfig,
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "base"): BaseConfig,
    ("RunConfig", "sft"): SftBaselineConfig,
    ("RunConfig", "self_improve"): SelfImproveConfig,
}

