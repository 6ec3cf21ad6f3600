"""Three-stage curriculum: Binary Decision -> Multiple Choice -> Open-ended.

The schedule is a sequence of hard-switched step budgets. ``next_batch``
draws tasks for the active stage; a flat (non-curriculum) baseline is just
a :class:`FlatSchedule` whose single pool is the union of every stage.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class Stage(enum.IntEnum):
    BINARY = 0
    CHOICE = 1
    OPEN = 2

    @property
    def label(self) -> str:
        return _STAGE_LABELS[self]

    @classmethod
    def parse(cls, value: "str | int | Stage") -> "Stage":
        if isinstance(value, Stage):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return _LABEL_TO_STAGE[value.lower()]
        except KeyError:
            raise ValueError(f"unknown stage {value!r}") from None


_STAGE_LABELS = {Stage.BINARY: "binary", Stage.CHOICE: "choice", Stage.OPEN: "open"}
_LABEL_TO_STAGE = {v: k for k, v in _STAGE_LABELS.items()}


class TaskKind(str, enum.Enum):
    DETECTION = "detection"
    CLASSIFICATION = "classification"
    MATH = "math"


@dataclass(frozen=True)
class CurriculumSchedule:
    """Per-stage step budgets, consumed in stage order."""

    budgets: tuple[int, int, int]

    def __post_init__(self) -> None:
        if len(self.budgets) != len(Stage):
            raise ValueError(f"need {len(Stage)} stage budgets, got {len(self.budgets)}")
        if any(int(b) != b or b <= 0 for b in self.budgets):
            raise ValueError(f"stage budgets must be positive integers: {self.budgets}")

    @classmethod
    def split_evenly(cls, total_steps: int) -> "CurriculumSchedule":
        """Equal thirds, remainder to the earliest stages (2500 -> 834/833/833)."""
        if total_steps < len(Stage):
            raise ValueError("total_steps must cover every stage")
        base, extra = divmod(total_steps, len(Stage))
        return cls(tuple(base + (1 if i < extra else 0) for i in range(len(Stage))))

    @property
    def total_steps(self) -> int:
        return sum(self.budgets)

    def stage_for_step(self, step: int) -> Stage:
        return stage_for_step(self, step)


def stage_for_step(schedule: CurriculumSchedule, step: int) -> Stage:
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    boundary = 0
    for stage, budget in zip(Stage, schedule.budgets):
        boundary += budget
        if step < boundary:
            return stage
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class FlatSchedule:
    """No curriculum: every step draws from the union of all stage pools."""

    total_steps: int

    def __post_init__(self) -> None:
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent generator for one training step, fixed by (seed, step)."""
    return np.random.default_rng([seed, step])


def next_batch(
    schedule: "CurriculumSchedule | FlatSchedule",
    step: int,
    datasets: Mapping[Stage, Sequence],
    seed: int,
    batch_size: int,
) -> list:
    """Uniformly sample ``batch_size`` tasks with replacement for ``step``."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if isinstance(schedule, FlatSchedule):
        if not 0 <= step < schedule.total_steps:
            raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
        pool = [task for stage in Stage for task in datasets.get(stage, ())]
    else:
        pool = list(datasets.get(stage_for_step(schedule, step), ()))
    if not pool:
        raise ValueError(f"empty task pool at step {step}")
    rng = step_rng(seed, step)
    idx = rng.integers(0, len(pool), size=batch_size)
    return [pool[i] for i in idx]
