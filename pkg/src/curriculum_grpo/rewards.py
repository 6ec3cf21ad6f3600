"""Response parsing and stage-specific verifiable rewards.

Every reward is an exact rational (:class:`fractions.Fraction`) so oracle
comparisons can be exact. A response earns ``accuracy + format`` where the
format component is plain grammar compliance of the ``<answer>`` block.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence, Union

from curriculum_grpo.curriculum import Stage, TaskKind

DEFAULT_TAU = Fraction(1, 2)
MULTI_CHOICE_PARTIAL = Fraction(1, 5)
DETECTION_THRESHOLD = Fraction(1, 2)
OPTION_IDS = ("A", "B", "C", "D")


class ContractError(ValueError):
    """A reward was asked to score against the wrong ground-truth variant."""


# ---------------------------------------------------------------------------
# Answer payloads
# ---------------------------------------------------------------------------

def _as_fraction(value) -> Fraction:
    if isinstance(value, float):
        # repr round-trips, so "0.1" stays 1/10 rather than its binary expansion
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class BoundingBox:
    x_min: Fraction
    y_min: Fraction
    x_max: Fraction
    y_max: Fraction
    confidence: Optional[Fraction] = None

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, _as_fraction(getattr(self, name)))
        if self.confidence is not None:
            object.__setattr__(self, "confidence", _as_fraction(self.confidence))
            if not 0 <= self.confidence <= 1:
                raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError("box coordinates must be non-negative")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.coords()}")

    def coords(self) -> tuple[Fraction, Fraction, Fraction, Fraction]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> Fraction:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Binary:
    truth: bool


@dataclass(frozen=True)
class SingleChoice:
    correct: str


@dataclass(frozen=True)
class MultiChoice:
    correct: frozenset

    def __post_init__(self) -> None:
        object.__setattr__(self, "correct", frozenset(self.correct))
        if not self.correct:
            raise ValueError("multi-choice answer needs at least one option")


@dataclass(frozen=True)
class Categories:
    labels: frozenset

    def __post_init__(self) -> None:
        labels = frozenset(normalize_label(x) for x in self.labels)
        if not labels or "" in labels:
            raise ValueError("category set must be non-empty with non-empty labels")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class Boxes:
    boxes: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.boxes:
            raise ValueError("box answer needs at least one box")


@dataclass(frozen=True)
class Numeric:
    value: Fraction

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", _as_fraction(self.value))


@dataclass(frozen=True)
class Malformed:
    raw: str


AnswerSpec = Union[Binary, SingleChoice, MultiChoice, Categories, Boxes, Numeric]
Payload = Union[Binary, SingleChoice, MultiChoice, Categories, Boxes, Numeric, Malformed]


def normalize_label(label: str) -> str:
    return " ".join(label.split()).casefold()


@dataclass(frozen=True)
class ParsedResponse:
    reasoning_text: str
    payload: Payload
    format_ok: bool

    def __post_init__(self) -> None:
        if self.format_ok == isinstance(self.payload, Malformed):
            raise ValueError("format_ok must be true exactly when the payload parsed")


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy: Fraction
    format: Fraction
    total: Fraction = field(init=False)
    stage: Optional[Stage] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "total", self.accuracy + self.format)

    def as_dict(self) -> dict:
        return {
            "accuracy": float(self.accuracy),
            "format": float(self.format),
            "total": float(self.total),
            "stage": None if self.stage is None else self.stage.label,
        }


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_ENVELOPE = re.compile(
    r"\s*(?:<think>(?P<think>.*?)</think>)?\s*<answer>(?P<answer>.*?)</answer>\s*",
    re.DOTALL,
)
_TAG = re.compile(r"</?(?:think|answer)>")
_NUMBER = r"\d+(?:\.\d+)?"
_NUMERIC = re.compile(rf"-?{_NUMBER}(?:/\d+)?")
_BOX = re.compile(
    rf"\[\s*({_NUMBER})\s*,\s*({_NUMBER})\s*,\s*({_NUMBER})\s*,\s*({_NUMBER})"
    rf"(?:\s*,\s*({_NUMBER}))?\s*\]"
)
_BOX_LIST = re.compile(rf"{_BOX.pattern}(?:\s*[,;]?\s*{_BOX.pattern})*")
_LABEL = re.compile(r"[^\W\d_][^\W_]*(?: [^\W\d_][^\W_]*)*")


def _parse_binary(text: str) -> Optional[Binary]:
    word = text.strip().casefold()
    if word in ("yes", "no"):
        return Binary(word == "yes")
    return None


def _parse_options(text: str, multi_select: bool) -> Optional[Payload]:
    items = [t.strip().upper() for t in text.split(",")]
    if not items or any(t not in OPTION_IDS for t in items):
        return None
    if len(set(items)) != len(items):
        return None
    if multi_select:
        return MultiChoice(frozenset(items))
    if len(items) != 1:
        return None
    return SingleChoice(items[0])


def _parse_categories(text: str) -> Optional[Categories]:
    items = [normalize_label(t) for t in text.split(",")]
    if not items or any(not _LABEL.fullmatch(t) for t in items):
        return None
    return Categories(frozenset(items))


def _parse_boxes(text: str) -> Optional[Boxes]:
    text = text.strip()
    if not _BOX_LIST.fullmatch(text):
        return None
    boxes = []
    for m in _BOX.finditer(text):
        x0, y0, x1, y1, conf = m.groups()
        try:
            boxes.append(BoundingBox(Fraction(x0), Fraction(y0), Fraction(x1), Fraction(y1),
                                     None if conf is None else Fraction(conf)))
        except ValueError:
            return None
    return Boxes(tuple(boxes))


def _parse_numeric(text: str) -> Optional[Numeric]:
    text = text.strip()
    if not _NUMERIC.fullmatch(text):
        return None
    try:
        return Numeric(Fraction(text))
    except ZeroDivisionError:
        return None


def parse_response(raw: str, stage: Stage, task_kind: TaskKind, *,
                   multi_select: bool = False) -> ParsedResponse:
    """Split ``raw`` into reasoning and a typed answer; never raises.

    ``multi_select`` picks the multi-choice grammar in the choice stage.
    """
    stage = Stage.parse(stage)
    task_kind = TaskKind(task_kind)
    m = _ENVELOPE.fullmatch(raw) if isinstance(raw, str) else None
    if m is None:
        return ParsedResponse("", Malformed(str(raw)), False)
    think = m.group("think") or ""
    answer = m.group("answer")
    if _TAG.search(think) or _TAG.search(answer):
        return ParsedResponse("", Malformed(raw), False)

    if stage is Stage.BINARY:
        payload = _parse_binary(answer)
    elif stage is Stage.CHOICE:
        payload = _parse_options(answer, multi_select)
    elif task_kind is TaskKind.DETECTION:
        payload = _parse_boxes(answer)
    elif task_kind is TaskKind.CLASSIFICATION:
        payload = _parse_categories(answer)
    else:
        payload = _parse_numeric(answer)

    if payload is None:
        return ParsedResponse(think.strip(), Malformed(raw), False)
    return ParsedResponse(think.strip(), payload, True)


def render_payload(payload: AnswerSpec) -> str:
    """Canonical answer-block text for a payload (inverse of the grammars)."""
    if isinstance(payload, Binary):
        return "yes" if payload.truth else "no"
    if isinstance(payload, SingleChoice):
        return payload.correct
    if isinstance(payload, MultiChoice):
        return ",".join(sorted(payload.correct))
    if isinstance(payload, Categories):
        return ",".join(sorted(payload.labels))
    if isinstance(payload, Boxes):
        parts = []
        for b in payload.boxes:
            vals = [_fmt_number(v) for v in b.coords()]
            if b.confidence is not None:
                vals.append(_fmt_number(b.confidence))
            parts.append("[" + ",".join(vals) + "]")
        return ",".join(parts)
    if isinstance(payload, Numeric):
        return _fmt_number(payload.value)
    raise TypeError(f"cannot render {type(payload).__name__}")


def _fmt_number(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    # terminating decimals print exactly; anything else falls back to a/b
    d = value.denominator
    for p in (2, 5):
        while d % p == 0:
            d //= p
    if d != 1:
        return f"{value.numerator}/{value.denominator}"
    digits = 0
    scaled = value
    while scaled.denominator != 1:
        scaled *= 10
        digits += 1
    sign = "-" if scaled < 0 else ""
    s = str(abs(scaled.numerator)).rjust(digits + 1, "0")
    return f"{sign}{s[:-digits]}.{s[-digits:]}"


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

def _require(gt, kind, name: str) -> None:
    if not isinstance(gt, kind):
        raise ContractError(f"{name} needs a {kind.__name__} ground truth, got {type(gt).__name__}")


def format_reward(resp: ParsedResponse) -> Fraction:
    return Fraction(1) if resp.format_ok else Fraction(0)


def binary_reward(resp: ParsedResponse, gt: AnswerSpec) -> RewardBreakdown:
    _require(gt, Binary, "binary_reward")
    acc = 1 if isinstance(resp.payload, Binary) and resp.payload.truth == gt.truth else 0
    return RewardBreakdown(Fraction(acc), format_reward(resp))


def single_choice_reward(resp: ParsedResponse, gt: AnswerSpec) -> RewardBreakdown:
    _require(gt, SingleChoice, "single_choice_reward")
    p = resp.payload
    acc = 1 if isinstance(p, SingleChoice) and p.correct == gt.correct else 0
    return RewardBreakdown(Fraction(acc), format_reward(resp))


def multi_choice_reward(resp: ParsedResponse, gt: AnswerSpec) -> RewardBreakdown:
    _require(gt, MultiChoice, "multi_choice_reward")
    p = resp.payload
    if isinstance(p, SingleChoice):
        selected = frozenset([p.correct])
    elif isinstance(p, MultiChoice):
        selected = p.correct
    else:
        selected = frozenset()
    return RewardBreakdown(multi_choice_accuracy(selected, gt.correct), format_reward(resp))


def multi_choice_accuracy(selected: Iterable[str], correct: Iterable[str]) -> Fraction:
    selected, correct = frozenset(selected), frozenset(correct)
    if selected == correct:
        return Fraction(1)
    if selected and selected < correct:
        return MULTI_CHOICE_PARTIAL
    return Fraction(0)


def category_iou(predicted: Iterable[str], truth: Iterable[str]) -> Fraction:
    p = {normalize_label(x) for x in predicted}
    g = {normalize_label(x) for x in truth}
    union = p | g
    if not p or not union:
        return Fraction(0)
    return Fraction(len(p & g), len(union))


def category_overlap_reward(resp: ParsedResponse, gt: AnswerSpec) -> RewardBreakdown:
    _require(gt, Categories, "category_overlap_reward")
    p = resp.payload
    labels = p.labels if isinstance(p, Categories) else frozenset()
    return RewardBreakdown(category_iou(labels, gt.labels), format_reward(resp))


def box_iou(a: BoundingBox, b: BoundingBox) -> Fraction:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return Fraction(0)
    inter = w * h
    return inter / (a.area + b.area - inter)


def match_boxes(pred: Sequence[BoundingBox], gt: Sequence[BoundingBox],
                tau=DEFAULT_TAU) -> list[tuple[int, int, Fraction]]:
    """Greedy one-to-one matching by descending IoU, dropping pairs below ``tau``.

    Ties go to the lowest pred index, then the lowest gt index.
    """
    tau = _as_fraction(tau)
    if not 0 <= tau < 1:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    pairs = [(box_iou(p, g), i, j) for i, p in enumerate(pred) for j, g in enumerate(gt)]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, out = set(), set(), []
    for iou, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        if iou >= tau:
            out.append((i, j, iou))
    return out


def detection_iou_reward(matches: Sequence[tuple[int, int, Fraction]]) -> Fraction:
    if not matches:
        return Fraction(0)
    return sum((m[2] for m in matches), Fraction(0)) / len(matches)


def detection_accuracy_reward(r_iou) -> Fraction:
    return Fraction(1) if r_iou > DETECTION_THRESHOLD else Fraction(0)


def detection_reward(resp: ParsedResponse, gt: AnswerSpec, tau=DEFAULT_TAU) -> RewardBreakdown:
    _require(gt, Boxes, "detection_reward")
    p = resp.payload
    if not isinstance(p, Boxes):
        return RewardBreakdown(Fraction(0), format_reward(resp))
    r_iou = detection_iou_reward(match_boxes(p.boxes, gt.boxes, tau))
    return RewardBreakdown(detection_accuracy_reward(r_iou), format_reward(resp))


def numeric_reward(resp: ParsedResponse, gt: AnswerSpec) -> RewardBreakdown:
    _require(gt, Numeric, "numeric_reward")
    p = resp.payload
    acc = 1 if isinstance(p, Numeric) and p.value == gt.value else 0
    return RewardBreakdown(Fraction(acc), format_reward(resp))


def reward_for(resp: ParsedResponse, gt: AnswerSpec, tau=DEFAULT_TAU) -> RewardBreakdown:
    """Route an already-parsed response to the reward matching ``gt``."""
    if isinstance(gt, Binary):
        return binary_reward(resp, gt)
    if isinstance(gt, SingleChoice):
        return single_choice_reward(resp, gt)
    if isinstance(gt, MultiChoice):
        return multi_choice_reward(resp, gt)
    if isinstance(gt, Categories):
        return category_overlap_reward(resp, gt)
    if isinstance(gt, Boxes):
        return detection_reward(resp, gt, tau)
    if isinstance(gt, Numeric):
        return numeric_reward(resp, gt)
    raise ContractError(f"unsupported ground truth {type(gt).__name__}")


def parse_for_task(resp_raw: str, task) -> ParsedResponse:
    return parse_response(resp_raw, task.stage, task.kind,
                          multi_select=isinstance(task.answer, MultiChoice))


def score(resp_raw: str, task, tau=DEFAULT_TAU) -> RewardBreakdown:
    """Parse ``resp_raw`` against ``task`` and return its tagged reward breakdown.

    ``task`` needs ``stage``, ``kind`` and ``answer`` attributes.
    """
    resp = parse_for_task(resp_raw, task)
    r = reward_for(resp, task.answer, tau)
    return RewardBreakdown(r.accuracy, r.format, stage=Stage.parse(task.stage))


def is_correct(resp_raw: str, task, tau=DEFAULT_TAU) -> bool:
    """Task-level correctness used for evaluation accuracy.

    Detection counts when the IoU reward exceeds 0.5; every other kind needs
    an exact answer, so partial category overlap does not count.
    """
    resp = parse_for_task(resp_raw, task)
    if not resp.format_ok:
        return False
    gt = task.answer
    if isinstance(gt, Categories):
        return resp.payload == gt
    return reward_for(resp, gt, tau).accuracy == 1


# ---------------------------------------------------------------------------
# JSON codec for the tagged answer union
# ---------------------------------------------------------------------------

def _num_json(v: Fraction):
    return v.numerator if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def _box_json(b: BoundingBox) -> list:
    vals = [_num_json(v) for v in b.coords()]
    if b.confidence is not None:
        vals.append(_num_json(b.confidence))
    return vals


def answer_to_json(ans: AnswerSpec) -> dict:
    if isinstance(ans, Binary):
        return {"type": "binary", "truth": ans.truth}
    if isinstance(ans, SingleChoice):
        return {"type": "single_choice", "correct": ans.correct}
    if isinstance(ans, MultiChoice):
        return {"type": "multi_choice", "correct": sorted(ans.correct)}
    if isinstance(ans, Categories):
        return {"type": "categories", "labels": sorted(ans.labels)}
    if isinstance(ans, Boxes):
        return {"type": "boxes", "boxes": [_box_json(b) for b in ans.boxes]}
    if isinstance(ans, Numeric):
        return {"type": "numeric", "value": _num_json(ans.value)}
    raise TypeError(f"cannot serialize {type(ans).__name__}")


def answer_from_json(d: dict) -> AnswerSpec:
    kind = d.get("type")
    if kind == "binary":
        return Binary(bool(d["truth"]))
    if kind == "single_choice":
        return SingleChoice(str(d["correct"]))
    if kind == "multi_choice":
        return MultiChoice(frozenset(d["correct"]))
    if kind == "categories":
        return Categories(frozenset(d["labels"]))
    if kind == "boxes":
        return Boxes(tuple(BoundingBox(*(Fraction(v) for v in box[:4]),
                                       Fraction(box[4]) if len(box) > 4 else None)
                           for box in d["boxes"]))
    if kind == "numeric":
        return Numeric(Fraction(d["value"]))
    raise ValueError(f"unknown answer type {kind!r}")
