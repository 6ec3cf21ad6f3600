"""Rejection-sampled self-improvement: sample, judge, keep the best, fine-tune.

The built-in :class:`OracleJudge` is rule-based and deterministic; any object
with ``name`` and ``score(task, response_text)`` can stand in for it, e.g.
:class:`ExternalJudge`, which reads scores produced offline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from curriculum_grpo import rewards
from curriculum_grpo.world import vocab
from curriculum_grpo.world.policy import PolicyParams, gradients, sample_batch, teacher_forced

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 85.0
ACCURACY_WEIGHT, FORMAT_WEIGHT, REASONING_WEIGHT = 70, 20, 10


@dataclass
class CandidateSample:
    candidate_id: str
    task_id: str
    prompt: tuple[str, ...]
    response: tuple[str, ...]
    domain: str = "general"
    judge_score: Optional[float] = None

    def __post_init__(self) -> None:
        self.prompt, self.response = tuple(self.prompt), tuple(self.response)
        if self.judge_score is not None and not 0 <= self.judge_score <= 100:
            raise ValueError(f"judge score {self.judge_score} outside [0, 100]")

    @property
    def text(self) -> str:
        return vocab.render(self.response)

    def to_json(self) -> dict:
        return {"candidate_id": self.candidate_id, "task_id": self.task_id,
                "prompt_tokens": list(self.prompt), "response_tokens": list(self.response),
                "domain": self.domain, "judge_score": self.judge_score}

    @classmethod
    def from_json(cls, d: dict) -> "CandidateSample":
        return cls(d["candidate_id"], d["task_id"], tuple(d["prompt_tokens"]),
                   tuple(d["response_tokens"]), d.get("domain", "general"), d.get("judge_score"))


class Judge(Protocol):
    name: str

    def score(self, task, response: str) -> float: ...


class OracleJudge:
    """70 x accuracy + 20 x format + 10 x (non-empty reasoning), from the reward engine."""

    name = "oracle"

    def __init__(self, tau=rewards.DEFAULT_TAU):
        self.tau = tau

    def score(self, task, response: str) -> float:
        parsed = rewards.parse_for_task(response, task)
        r = rewards.reward_for(parsed, task.answer, self.tau)
        reasoning = 1 if parsed.format_ok and parsed.reasoning_text else 0
        return float(ACCURACY_WEIGHT * r.accuracy + FORMAT_WEIGHT * r.format
                     + REASONING_WEIGHT * reasoning)


def oracle_judge(candidate: CandidateSample, task) -> float:
    return OracleJudge().score(task, candidate.text)


class ExternalJudge:
    """Scores read from a JSONL file of ``{"candidate_id": ..., "score": ...}`` lines."""

    def __init__(self, scores: dict[str, float], name: str = "external"):
        self.name = name
        self.scores = dict(scores)

    @classmethod
    def from_file(cls, path, name: str = "external") -> "ExternalJudge":
        scores = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                d = json.loads(line)
                s = float(d["score"])
                if not 0 <= s <= 100:
                    raise ValueError(f"{path}:{lineno}: score {s} outside [0, 100]")
                scores[str(d["candidate_id"])] = s
        return cls(scores, name)

    def score_candidate(self, candidate: CandidateSample) -> float:
        try:
            return self.scores[candidate.candidate_id]
        except KeyError:
            raise KeyError(f"no external score for candidate {candidate.candidate_id!r}") from None


def sample_candidates(params: PolicyParams, tasks: Sequence, k: int, temperature: float,
                      rng: np.random.Generator) -> list[CandidateSample]:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not tasks:
        return []
    rollouts = sample_batch(params, [t.prompt_ids for t in tasks], k, temperature, rng)
    out = []
    for task, group in zip(tasks, rollouts):
        for j, r in enumerate(group):
            out.append(CandidateSample(f"{task.id}#{j}", task.id, task.prompt,
                                       tuple(vocab.decode(r.tokens)), task.domain))
    return out


def judge_candidates(candidates: Iterable[CandidateSample], tasks_by_id: dict,
                     judge) -> list[CandidateSample]:
    judged = []
    for c in sorted(candidates, key=lambda c: c.candidate_id):
        if isinstance(judge, ExternalJudge):
            s = judge.score_candidate(c)
        else:
            s = judge.score(tasks_by_id[c.task_id], c.text)
        judged.append(CandidateSample(c.candidate_id, c.task_id, c.prompt, c.response,
                                      c.domain, float(s)))
    return judged


@dataclass
class CuratedDataset:
    samples: list[CandidateSample]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def save(self, path) -> None:
        from curriculum_grpo.harness.io import atomic_write_text, write_jsonl
        path = Path(path)
        write_jsonl(path, (s.to_json() for s in self.samples))
        atomic_write_text(provenance_path(path), json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CuratedDataset":
        from curriculum_grpo.harness.io import read_jsonl
        path = Path(path)
        samples = [CandidateSample.from_json(d) for d in read_jsonl(path)]
        prov = {}
        if provenance_path(path).exists():
            prov = json.loads(provenance_path(path).read_text(encoding="utf-8"))
        return cls(samples, prov)


def provenance_path(path: Path) -> Path:
    return path.with_name(path.name + ".provenance.json")


def filter_accepted(candidates: Sequence[CandidateSample], threshold: float = DEFAULT_THRESHOLD,
                    provenance: Optional[dict] = None) -> CuratedDataset:
    """Keep judged candidates scoring at least ``threshold``, deduplicated."""
    seen, kept = set(), []
    for c in sorted(candidates, key=lambda c: c.candidate_id):
        if c.judge_score is None:
            raise ValueError(f"candidate {c.candidate_id} has not been judged")
        if c.judge_score < threshold:
            continue
        key = (c.prompt, c.response)
        if key in seen:
            continue
        seen.add(key)
        kept.append(c)
    prov = {"threshold": threshold, **(provenance or {})}
    return CuratedDataset(kept, prov)


def sft_loss(params: PolicyParams, samples: Sequence) -> tuple[float, np.ndarray]:
    """Token-level cross-entropy summed over positions, averaged over samples.

    ``samples`` holds ``(prompt_ids, response_ids)`` pairs or
    :class:`CandidateSample` objects.
    """
    if len(samples) == 0:
        raise ValueError("sft_loss needs at least one sample")
    prompts, responses = [], []
    for s in samples:
        if isinstance(s, CandidateSample):
            prompts.append(vocab.encode(s.prompt))
            responses.append(vocab.encode(s.response))
        else:
            prompts.append(list(s[0]))
            responses.append(list(s[1]))
    cache = teacher_forced(params, prompts, responses)
    n = len(samples)
    loss = -float(cache.logprobs.sum()) / n
    grad = gradients(cache, np.full(cache.logprobs.shape, -1.0 / n))
    return loss, grad


@dataclass(frozen=True)
class SelfImproveConfig:
    samples_per_task: int = 4
    temperature: float = 1.0
    threshold: float = DEFAULT_THRESHOLD
    sft_steps: int = 50
    learning_rate: float = 2e-7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.samples_per_task < 1:
            raise ValueError("samples_per_task must be at least 1")
        if self.temperature < 0 or self.learning_rate < 0 or self.sft_steps < 0:
            raise ValueError("temperature, learning_rate and sft_steps must be non-negative")


def self_improve(params: PolicyParams, tasks: Sequence, cfg: SelfImproveConfig = SelfImproveConfig(),
                 judge=None, candidates: Optional[Sequence[CandidateSample]] = None):
    """Sample -> judge -> filter -> ``cfg.sft_steps`` of gradient descent on the curated set.

    Returns ``(params, curated, report)``. Nothing accepted leaves the
    parameters untouched and records a warning.
    """
    judge = judge or OracleJudge()
    rng = np.random.default_rng(cfg.seed)
    if candidates is None:
        candidates = sample_candidates(params, tasks, cfg.samples_per_task, cfg.temperature, rng)
    judged = judge_candidates(candidates, {t.id: t for t in tasks}, judge)
    curated = filter_accepted(judged, cfg.threshold,
                              {"judge": judge.name, "seed": cfg.seed,
                               "samples_per_task": cfg.samples_per_task})
    report = {
        "candidates": len(judged),
        "accepted": len(curated),
        "acceptance_rate": len(curated) / len(judged) if judged else 0.0,
        "accepted_by_domain": _count_domains(curated.samples),
        "loss_curve": [],
        "warning": None,
    }
    if not curated.samples:
        report["warning"] = "no candidate reached the threshold; parameters unchanged"
        log.warning(report["warning"])
        return params, curated, report
    current = params
    for _ in range(cfg.sft_steps):
        loss, grad = sft_loss(current, curated.samples)
        report["loss_curve"].append(loss)
        current = current.replace(current.flat - cfg.learning_rate * grad)
    report["loss_curve"].append(sft_loss(current, curated.samples)[0])
    return current, curated, report


def _count_domains(samples: Iterable[CandidateSample]) -> dict[str, int]:
    out: dict[str, int] = {}
    for s in samples:
        out[s.domain] = out.get(s.domain, 0) + 1
    return dict(sorted(out.items()))
