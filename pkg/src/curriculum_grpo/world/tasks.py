"""Stage-formatted tasks rendered from scenes, plus their JSONL schema.

Prompts use a fixed token layout so the policy can pool fields by position::

    <scene> W H [color shape x0 y0 x1 y1] * MAX_SLOTS </scene>
    <question> qtype color shape n1 n2 n3 n4 </question>
    <options> (letter f1 f2 f3 f4) * 4 </options> fmt

Unused fields hold ``<none>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from curriculum_grpo.curriculum import Stage, TaskKind
from curriculum_grpo.rewards import (
    AnswerSpec, Binary, BoundingBox, Boxes, Categories, MultiChoice, Numeric,
    SingleChoice, answer_from_json, answer_to_json, box_iou,
)
from curriculum_grpo.world import vocab
from curriculum_grpo.world.scene import (
    HELD_OUT, IN_DOMAIN, SceneConfig, SceneObject, SceneSpec, generate_scene, random_box,
)
from curriculum_grpo.world.vocab import COLORS, LETTERS, NONE, SHAPES

MAX_SLOTS = 4
SLOT_WIDTH = 6
N_FIELDS = 7
N_OPTIONS = 4
OPTION_WIDTH = 4

_SCENE_START = 3
_FIELDS_START = _SCENE_START + MAX_SLOTS * SLOT_WIDTH + 2
_OPTIONS_START = _FIELDS_START + N_FIELDS + 2
_FMT_POS = _OPTIONS_START + N_OPTIONS * (OPTION_WIDTH + 1) + 1
PROMPT_LENGTH = _FMT_POS + 1

DOMAINS = ("math-text", "science", "multimodal-math", "general")


def prompt_layout() -> tuple[tuple[int, ...], ...]:
    """Position groups that the policy mean-pools, in feature order."""
    groups: list[tuple[int, ...]] = [(1,), (2,)]
    for role in range(SLOT_WIDTH):
        groups.append(tuple(_SCENE_START + s * SLOT_WIDTH + role for s in range(MAX_SLOTS)))
    groups.extend((_FIELDS_START + i,) for i in range(N_FIELDS))
    for o in range(N_OPTIONS):
        base = _OPTIONS_START + o * (OPTION_WIDTH + 1) + 1
        groups.extend((base + f,) for f in range(OPTION_WIDTH))
    groups.append((_FMT_POS,))
    return tuple(groups)


@dataclass(frozen=True)
class TaskInstance:
    id: str
    stage: Stage
    kind: TaskKind
    prompt: tuple[str, ...]
    answer: AnswerSpec
    scene: SceneSpec
    options: Optional[tuple[str, ...]] = None
    domain: str = "general"

    def __post_init__(self) -> None:
        if (self.options is not None) != (self.stage is Stage.CHOICE):
            raise ValueError("options must be present exactly for choice-stage tasks")
        if len(self.prompt) != PROMPT_LENGTH:
            raise ValueError(f"prompt must have {PROMPT_LENGTH} tokens, got {len(self.prompt)}")
        expected = _expected_variants(self.stage, self.kind)
        if not isinstance(self.answer, expected):
            raise ValueError(f"{type(self.answer).__name__} answer inconsistent with "
                             f"{self.stage.label}/{self.kind.value}")

    @property
    def prompt_ids(self) -> list[int]:
        return vocab.encode(self.prompt)

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "stage": self.stage.label,
            "kind": self.kind.value,
            "prompt_tokens": list(self.prompt),
        }
        if self.options is not None:
            d["options"] = list(self.options)
        d["answer"] = answer_to_json(self.answer)
        d["scene"] = self.scene.to_json()
        d["domain"] = self.domain
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TaskInstance":
        options = d.get("options")
        return cls(
            id=d["id"],
            stage=Stage.parse(d["stage"]),
            kind=TaskKind(d["kind"]),
            prompt=tuple(d["prompt_tokens"]),
            answer=answer_from_json(d["answer"]),
            scene=SceneSpec.from_json(d["scene"]),
            options=None if options is None else tuple(options),
            domain=d.get("domain", "general"),
        )


def _expected_variants(stage: Stage, kind: TaskKind):
    if stage is Stage.BINARY:
        return Binary
    if stage is Stage.CHOICE:
        return (SingleChoice, MultiChoice)
    return {TaskKind.DETECTION: Boxes, TaskKind.CLASSIFICATION: Categories,
            TaskKind.MATH: Numeric}[kind]


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------

def _num(v: int) -> str:
    if not 0 <= v <= 9:
        raise ValueError(f"field value {v} needs more than one digit")
    return str(v)


def _scene_tokens(scene: SceneSpec) -> list[str]:
    if len(scene.objects) > MAX_SLOTS:
        raise ValueError(f"scene has {len(scene.objects)} objects; at most {MAX_SLOTS} fit")
    toks = ["<scene>", _num(scene.width), _num(scene.height)]
    for obj in scene.objects:
        toks += [obj.color, obj.shape, *(_num(v) for v in obj.box)]
    toks += [NONE] * (SLOT_WIDTH * (MAX_SLOTS - len(scene.objects)))
    toks.append("</scene>")
    return toks


def _build_prompt(scene: SceneSpec, qtype: str, fields: Sequence[str],
                  options: Optional[Sequence[Sequence[str]]], fmt: str) -> tuple[str, ...]:
    fields = list(fields) + [NONE] * (N_FIELDS - 1 - len(fields))
    toks = _scene_tokens(scene) + ["<question>", qtype, *fields, "</question>", "<options>"]
    for o in range(N_OPTIONS):
        content = list(options[o]) if options is not None else []
        content += [NONE] * (OPTION_WIDTH - len(content))
        toks += [LETTERS[o], *content]
    toks += ["</options>", fmt]
    assert len(toks) == PROMPT_LENGTH
    return tuple(toks)


def _box_fields(box) -> list[str]:
    return [_num(v) for v in box]


def _box(box) -> BoundingBox:
    return BoundingBox(*box)


def _option_text(content: Sequence[str]) -> str:
    if len(content) == 4 and all(c.isdigit() for c in content):
        return "[" + ",".join(content) + "]"
    return " ".join(content)


# ---------------------------------------------------------------------------
# Task rendering
# ---------------------------------------------------------------------------

def detection_truth(scene: SceneSpec, color: str, shape: str, box) -> bool:
    """A matching object exists whose box overlaps the query with IoU > 1/2."""
    q = _box(box)
    return any(o.color == color and o.shape == shape and box_iou(_box(o.box), q) > Fraction(1, 2)
               for o in scene.objects)


def _distractor_boxes(rng, scene: SceneSpec, true_box, n: int) -> list:
    out: list = []
    t = _box(true_box)
    for _ in range(1000):
        b = random_box(rng, scene)
        if b in out or box_iou(_box(b), t) > Fraction(1, 2):
            continue
        if any(box_iou(_box(b), _box(o)) > Fraction(1, 2) for o in out):
            continue
        out.append(b)
        if len(out) == n:
            return out
    raise RuntimeError("could not place distractor boxes")


def render_task(scene: SceneSpec, stage: Stage, kind: TaskKind, rng: np.random.Generator,
                task_id: str = "task") -> TaskInstance:
    stage, kind = Stage.parse(stage), TaskKind(kind)
    if kind is TaskKind.DETECTION:
        return _detection_task(scene, stage, rng, task_id)
    if kind is TaskKind.CLASSIFICATION:
        return _classification_task(scene, stage, rng, task_id)
    return _counting_task(scene, stage, rng, task_id)


def _detection_task(scene, stage, rng, task_id):
    target = scene.objects[int(rng.integers(len(scene.objects)))]
    kind = TaskKind.DETECTION
    if stage is Stage.BINARY:
        color, shape, box = target.color, target.shape, target.box
        if rng.random() < 0.5:
            which = int(rng.integers(3))
            if which == 0:
                color = COLORS[(COLORS.index(color) + int(rng.integers(1, len(COLORS)))) % len(COLORS)]
            elif which == 1:
                shape = SHAPES[(SHAPES.index(shape) + int(rng.integers(1, len(SHAPES)))) % len(SHAPES)]
            else:
                box = _distractor_boxes(rng, scene, target.box, 1)[0]
        truth = detection_truth(scene, color, shape, box)
        prompt = _build_prompt(scene, "exists", [color, shape, *_box_fields(box)], None, "fmtbinary")
        return TaskInstance(task_id, stage, kind, prompt, Binary(truth), scene)
    if stage is Stage.CHOICE:
        boxes = [target.box] + _distractor_boxes(rng, scene, target.box, N_OPTIONS - 1)
        order = rng.permutation(N_OPTIONS)
        boxes = [boxes[i] for i in order]
        contents = [_box_fields(b) for b in boxes]
        correct = [LETTERS[i] for i, b in enumerate(boxes)
                   if detection_truth(scene, target.color, target.shape, b)]
        prompt = _build_prompt(scene, "which", [target.color, target.shape], contents, "fmtsingle")
        return TaskInstance(task_id, stage, kind, prompt, SingleChoice(correct[0]), scene,
                            options=tuple(_option_text(c) for c in contents))
    gt = tuple(_box(o.box) for o in scene.objects
               if o.color == target.color and o.shape == target.shape)
    prompt = _build_prompt(scene, "locate", [target.color, target.shape], None, "fmtopen")
    return TaskInstance(task_id, stage, kind, prompt, Boxes(gt), scene)


def _classification_task(scene, stage, rng, task_id):
    kind = TaskKind.CLASSIFICATION
    present = scene.shapes
    if stage is Stage.BINARY:
        absent = [s for s in SHAPES if s not in present]
        if absent and rng.random() < 0.5:
            shape = absent[int(rng.integers(len(absent)))]
        else:
            pool = sorted(present)
            shape = pool[int(rng.integers(len(pool)))]
        prompt = _build_prompt(scene, "has", [NONE, shape], None, "fmtbinary")
        return TaskInstance(task_id, stage, kind, prompt, Binary(shape in present), scene)
    if stage is Stage.CHOICE:
        order = rng.permutation(len(SHAPES))
        shapes = [SHAPES[i] for i in order]
        correct = frozenset(LETTERS[i] for i, s in enumerate(shapes) if s in present)
        prompt = _build_prompt(scene, "shapes", [], [[s] for s in shapes], "fmtmulti")
        return TaskInstance(task_id, stage, kind, prompt, MultiChoice(correct), scene,
                            options=tuple(shapes))
    prompt = _build_prompt(scene, "shapes", [], None, "fmtopen")
    return TaskInstance(task_id, stage, kind, prompt, Categories(present), scene)


def _counting_task(scene, stage, rng, task_id):
    kind = TaskKind.MATH
    count = len(scene.objects)
    domain = "multimodal-math"
    if stage is Stage.BINARY:
        n = count
        if rng.random() < 0.5:
            others = [c for c in range(1, MAX_SLOTS + 1) if c != count]
            n = others[int(rng.integers(len(others)))]
        prompt = _build_prompt(scene, "countis", [NONE, NONE, _num(n)], None, "fmtbinary")
        return TaskInstance(task_id, stage, kind, prompt, Binary(n == count), scene, domain=domain)
    if stage is Stage.CHOICE:
        others = [c for c in range(1, 7) if c != count]
        picks = [others[i] for i in rng.choice(len(others), N_OPTIONS - 1, replace=False)]
        values = [count] + picks
        order = rng.permutation(N_OPTIONS)
        values = [values[i] for i in order]
        correct = LETTERS[values.index(count)]
        prompt = _build_prompt(scene, "howmany", [], [[_num(v)] for v in values], "fmtsingle")
        return TaskInstance(task_id, stage, kind, prompt, SingleChoice(correct), scene,
                            options=tuple(str(v) for v in values), domain=domain)
    prompt = _build_prompt(scene, "howmany", [], None, "fmtopen")
    return TaskInstance(task_id, stage, kind, prompt, Numeric(count), scene, domain=domain)


def render_text_task(rng: np.random.Generator, domain: str, task_id: str = "task") -> TaskInstance:
    """Pure-text task on an empty scene (arithmetic or comparison)."""
    scene = SceneSpec(IN_DOMAIN.width, IN_DOMAIN.height, ())
    a, b = (int(v) for v in rng.integers(0, 5, size=2))
    if domain == "math-text":
        prompt = _build_prompt(scene, "plus", [NONE, NONE, _num(a), _num(b)], None, "fmtopen")
        return TaskInstance(task_id, Stage.OPEN, TaskKind.MATH, prompt, Numeric(a + b), scene,
                            domain=domain)
    if domain == "science":
        prompt = _build_prompt(scene, "greater", [NONE, NONE, _num(a), _num(b)], None, "fmtbinary")
        return TaskInstance(task_id, Stage.BINARY, TaskKind.MATH, prompt, Binary(a > b), scene,
                            domain=domain)
    raise ValueError(f"no text tasks for domain {domain!r}")


def scene_config_for(kind: TaskKind, base: SceneConfig) -> SceneConfig:
    """Detection scenes hold a single referent; other kinds use the full range."""
    if kind is TaskKind.DETECTION:
        return SceneConfig(base.width, base.height, 1, 1, base.max_side, base.combos)
    return base


def generate_tasks(rng: np.random.Generator, stage: Stage, kind: TaskKind, n: int,
                   scene_cfg: SceneConfig = IN_DOMAIN, prefix: str = "t") -> list[TaskInstance]:
    cfg = scene_config_for(kind, scene_cfg)
    out = []
    for i in range(n):
        scene = generate_scene(rng, cfg)
        out.append(render_task(scene, stage, kind, rng, task_id=f"{prefix}-{stage.label}-{kind.value}-{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# Canonical responses
# ---------------------------------------------------------------------------

def payload_tokens(payload: AnswerSpec) -> list[str]:
    if isinstance(payload, Binary):
        return ["yes" if payload.truth else "no"]
    if isinstance(payload, SingleChoice):
        return [payload.correct]
    if isinstance(payload, MultiChoice):
        return _join(sorted(payload.correct))
    if isinstance(payload, Categories):
        return _join(sorted(payload.labels))
    if isinstance(payload, Boxes):
        out: list[str] = []
        for i, b in enumerate(payload.boxes):
            if i:
                out.append(",")
            nums = []
            for v in b.coords():
                if v.denominator != 1:
                    raise ValueError("the token vocabulary only carries integer coordinates")
                nums.append(vocab.tokenize_number(int(v)))
            out += ["[", *nums[0], ",", *nums[1], ",", *nums[2], ",", *nums[3], "]"]
        return out
    if isinstance(payload, Numeric):
        if payload.value.denominator != 1 or payload.value < 0:
            raise ValueError("the token vocabulary only carries non-negative integers")
        return vocab.tokenize_number(int(payload.value))
    raise TypeError(type(payload).__name__)


def _join(items: Sequence[str]) -> list[str]:
    out: list[str] = []
    for i, item in enumerate(items):
        if i:
            out.append(",")
        out.append(item)
    return out


def response_tokens(payload: AnswerSpec, reasoning: Sequence[str] = ()) -> list[str]:
    """Canonical serializer: optional think block then the answer block."""
    toks: list[str] = []
    if reasoning:
        toks += [vocab.THINK_OPEN, *reasoning, vocab.THINK_CLOSE]
    return toks + [vocab.ANSWER_OPEN, *payload_tokens(payload), vocab.ANSWER_CLOSE]


def reasoning_tokens(task: TaskInstance) -> list[str]:
    """Short restatement of the query used as a canned reasoning block."""
    fields = task.prompt[_FIELDS_START:_FIELDS_START + N_FIELDS]
    words = [t for t in fields[1:3] if t != NONE]
    return words or [fields[0]]


def random_payload(task: TaskInstance, rng: np.random.Generator) -> AnswerSpec:
    """A well-formed but uninformed answer of the task's variant."""
    ans = task.answer
    if isinstance(ans, Binary):
        return Binary(bool(rng.random() < 0.5))
    if isinstance(ans, SingleChoice):
        return SingleChoice(LETTERS[int(rng.integers(N_OPTIONS))])
    if isinstance(ans, MultiChoice):
        mask = 0
        while mask == 0:
            mask = int(rng.integers(1, 1 << N_OPTIONS))
        return MultiChoice(frozenset(LETTERS[i] for i in range(N_OPTIONS) if mask >> i & 1))
    if isinstance(ans, Categories):
        k = int(rng.integers(1, len(SHAPES) + 1))
        return Categories(frozenset(SHAPES[i] for i in rng.choice(len(SHAPES), k, replace=False)))
    if isinstance(ans, Boxes):
        return Boxes((_box(random_box(rng, task.scene)),))
    return Numeric(int(rng.integers(0, 10)))


__all__ = [
    "TaskInstance", "PROMPT_LENGTH", "MAX_SLOTS", "DOMAINS", "prompt_layout", "render_task",
    "render_text_task", "generate_tasks", "detection_truth", "response_tokens", "payload_tokens",
    "reasoning_tokens", "random_payload", "scene_config_for", "HELD_OUT", "IN_DOMAIN",
    "SceneObject",
]
