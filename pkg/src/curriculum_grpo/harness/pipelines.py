"""Experiment pipelines: data generation, base warm-up, curriculum / flat RL, SFT, eval."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from curriculum_grpo import rewards
from curriculum_grpo.curriculum import (
    FlatSchedule, Stage, TaskKind, next_batch, stage_for_step,
)
from curriculum_grpo.grpo import Adam, ResponseGroup, update_policy
from curriculum_grpo.harness.config import RunConfig
from curriculum_grpo.self_improvement import sft_loss
from curriculum_grpo.world import tasks as world
from curriculum_grpo.world import vocab
from curriculum_grpo.world.policy import PolicyConfig, PolicyParams, sample_batch, teacher_forced

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "step", "stage", "mean_reward", "reward_std_window", "open_reward", "open_reward_std_window",
    "loss", "kl", "clip_fraction", "mean_abs_advantage", "eval_in", "eval_heldout",
)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class DataBundle:
    pools: dict[Stage, list]
    eval_in: list
    eval_heldout: list
    text_tasks: list = field(default_factory=list)

    def splits(self) -> dict[str, list]:
        out = {f"train_{s.label}": self.pools[s] for s in Stage}
        out["eval_in"] = self.eval_in
        out["eval_heldout"] = self.eval_heldout
        out["text"] = self.text_tasks
        return out

    @classmethod
    def from_splits(cls, splits: dict[str, list]) -> "DataBundle":
        return cls({s: splits[f"train_{s.label}"] for s in Stage}, splits["eval_in"],
                   splits["eval_heldout"], splits.get("text", []))


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def generate_data(cfg: RunConfig) -> DataBundle:
    d = cfg.data
    pools = {}
    for stage in Stage:
        pool = []
        for k, kind in enumerate(TaskKind):
            pool += world.generate_tasks(_rng(cfg.seed, 10, stage, k), stage, kind, d.train_per_kind,
                                         world.IN_DOMAIN, prefix="train")
        pools[stage] = pool
    eval_in, eval_out = [], []
    for k, kind in enumerate(TaskKind):
        eval_in += world.generate_tasks(_rng(cfg.seed, 20, k), Stage.OPEN, kind, d.eval_per_kind,
                                        world.IN_DOMAIN, prefix="evalin")
        eval_out += world.generate_tasks(_rng(cfg.seed, 30, k), Stage.OPEN, kind, d.heldout_per_kind,
                                         world.HELD_OUT, prefix="heldout")
    text = []
    for j, domain in enumerate(("math-text", "science")):
        rng = _rng(cfg.seed, 40, j)
        text += [world.render_text_task(rng, domain, f"text-{domain}-{i:05d}")
                 for i in range(d.text_tasks_per_domain)]
    return DataBundle(pools, eval_in, eval_out, text)


# ---------------------------------------------------------------------------
# Policy construction
# ---------------------------------------------------------------------------

def policy_config(cfg: RunConfig) -> PolicyConfig:
    m = cfg.model
    return PolicyConfig(
        vocab_size=vocab.VOCAB_SIZE, prompt_length=world.PROMPT_LENGTH,
        layout=world.prompt_layout(), embed_dim=m.embed_dim, hidden=m.hidden,
        context_k=m.context_k, pad_id=vocab.PAD_ID, stop_id=vocab.ANSWER_CLOSE_ID,
        max_len=m.max_len,
    )


def _optimizer(cfg: RunConfig, size: int, lr: float):
    return Adam(size, lr) if cfg.optimizer == "adam" else None


def _sgd_or_adam_step(params: PolicyParams, grad: np.ndarray, lr: float, opt) -> PolicyParams:
    step = opt.step(grad) if opt is not None else lr * grad
    return params.replace(params.flat - step)


def supervised_steps(params: PolicyParams, cfg: RunConfig, steps: int, batch_size: int, lr: float,
                     make_batch: Callable[[int], list], on_step: Optional[Callable] = None) -> PolicyParams:
    opt = _optimizer(cfg, params.config.n_params, lr)
    for step in range(steps):
        batch = make_batch(step)
        loss, grad = sft_loss(params, batch)
        params = _sgd_or_adam_step(params, grad, lr, opt)
        if on_step is not None:
            on_step(step, params, loss)
    return params


def base_policy(cfg: RunConfig, data: DataBundle) -> PolicyParams:
    """Random init followed by a format warm-up on uninformed, well-formed answers.

    Stands in for a pretrained model: it writes every stage's grammar but
    guesses the content.
    """
    pcfg = policy_config(cfg)
    params = PolicyParams.init(pcfg, _rng(cfg.seed, 1), cfg.model.init_scale)
    flat_pool = [t for s in Stage for t in data.pools[s]]

    def make_batch(step):
        rng = _rng(cfg.seed, 2, step)
        idx = rng.integers(0, len(flat_pool), cfg.base.batch_size)
        batch = []
        for i in idx:
            task = flat_pool[i]
            reasoning = world.reasoning_tokens(task) if rng.random() < 0.5 else ()
            resp = world.response_tokens(world.random_payload(task, rng), reasoning)
            batch.append((task.prompt_ids, vocab.encode(resp)))
        return batch

    return supervised_steps(params, cfg, cfg.base.steps, cfg.base.batch_size,
                            cfg.base.learning_rate, make_batch)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def greedy_responses(params: PolicyParams, task_list: Sequence) -> list[str]:
    if not task_list:
        return []
    out = sample_batch(params, [t.prompt_ids for t in task_list], 1, 0.0, _rng(0, 0))
    return [vocab.render(vocab.decode(group[0].tokens)) for group in out]


def accuracy_by_kind(task_list: Sequence, responses: Sequence[str], tau=rewards.DEFAULT_TAU) -> dict:
    if len(task_list) != len(responses):
        raise ValueError("need one response per task")
    hits: dict[str, list[bool]] = {}
    for task, resp in zip(task_list, responses):
        hits.setdefault(task.kind.value, []).append(rewards.is_correct(resp, task, tau))
    acc = {k.value: float(np.mean(hits[k.value])) for k in TaskKind if k.value in hits}
    acc["overall"] = float(np.mean(list(acc.values()))) if acc else 0.0
    return acc


def evaluate(params: PolicyParams, task_list: Sequence, tau=rewards.DEFAULT_TAU) -> dict:
    return accuracy_by_kind(task_list, greedy_responses(params, task_list), tau)


def _subset(task_list: Sequence, n: int, seed: int) -> list:
    if len(task_list) <= n:
        return list(task_list)
    idx = np.sort(_rng(seed, 50).choice(len(task_list), n, replace=False))
    return [task_list[i] for i in idx]


# ---------------------------------------------------------------------------
# RL
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[dict]
    eval_in: dict
    eval_heldout: dict


class _Window:
    def __init__(self, size: int):
        self.size = size
        self.values: list[Optional[float]] = []

    def push(self, v: Optional[float]) -> Optional[float]:
        self.values.append(v)
        vals = [x for x in self.values[-self.size:] if x is not None]
        return float(np.std(vals)) if vals else None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def rl_train(cfg: RunConfig, data: DataBundle, base: PolicyParams, flat: bool = False,
             progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """GRPO against the frozen base with a curriculum or a flat task mix."""
    schedule = FlatSchedule(cfg.total_steps) if flat else cfg.schedule
    params, ref = base, base
    gcfg = cfg.grpo
    opt = _optimizer(cfg, base.config.n_params, gcfg.learning_rate)
    eval_in_sub = _subset(data.eval_in, cfg.eval_subset, cfg.seed)
    eval_out_sub = _subset(data.eval_heldout, cfg.eval_subset, cfg.seed + 1)
    w_all, w_open = _Window(cfg.window), _Window(cfg.window)
    metrics = []
    for step in range(cfg.total_steps):
        batch = next_batch(schedule, step, data.pools, cfg.seed, cfg.batch_size)
        stage_label = "flat" if flat else stage_for_step(schedule, step).label
        groups, totals, open_totals = _rollout_groups(params, ref, batch, cfg, step)
        params, stats = update_policy(params, groups, gcfg, cfg.temperature, opt)
        mean_r = float(np.mean(totals))
        open_r = float(np.mean(open_totals)) if open_totals else None
        row = {
            "step": step, "stage": stage_label, "mean_reward": mean_r,
            "reward_std_window": w_all.push(mean_r), "open_reward": open_r,
            "open_reward_std_window": w_open.push(open_r), "loss": stats.loss, "kl": stats.kl,
            "clip_fraction": stats.clip_fraction, "mean_abs_advantage": stats.mean_abs_advantage,
            "eval_in": None, "eval_heldout": None,
        }
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
            row["eval_in"] = evaluate(params, eval_in_sub, cfg.tau)["overall"]
            row["eval_heldout"] = evaluate(params, eval_out_sub, cfg.tau)["overall"]
        metrics.append({k: _fmt(v) if k != "stage" else v for k, v in row.items()})
        if progress is not None:
            progress(row)
    return TrainResult(params, metrics, evaluate(params, data.eval_in, cfg.tau),
                       evaluate(params, data.eval_heldout, cfg.tau))


def _rollout_groups(params, ref, batch, cfg: RunConfig, step: int):
    n = cfg.grpo.group_size
    rollouts = sample_batch(params, [t.prompt_ids for t in batch], n, cfg.temperature,
                            _rng(cfg.seed, 3, step))
    prompts, responses = [], []
    for task, group in zip(batch, rollouts):
        for r in group:
            prompts.append(task.prompt_ids)
            responses.append(r.tokens)
    ref_lp = teacher_forced(ref, prompts, responses, cfg.temperature)
    ref_split = ref_lp.split(ref_lp.logprobs)
    groups, totals, open_totals, j = [], [], [], 0
    for task, group in zip(batch, rollouts):
        rs = [float(rewards.score(vocab.render(vocab.decode(r.tokens)), task, cfg.tau).total)
              for r in group]
        totals.extend(rs)
        if task.stage is Stage.OPEN:
            open_totals.extend(rs)
        groups.append(ResponseGroup(task.id, task.prompt_ids, [r.tokens for r in group], rs,
                                    [r.logprobs for r in group], ref_split[j:j + n]))
        j += n
    return groups, totals, open_totals


# ---------------------------------------------------------------------------
# SFT baseline
# ---------------------------------------------------------------------------

def sft_train(cfg: RunConfig, data: DataBundle, base: PolicyParams,
              progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Supervised fine-tuning on ground-truth answers from the merged task pool."""
    pool = [t for s in Stage for t in data.pools[s]]
    eval_in_sub = _subset(data.eval_in, cfg.eval_subset, cfg.seed)
    eval_out_sub = _subset(data.eval_heldout, cfg.eval_subset, cfg.seed + 1)
    metrics: list[dict] = []
    w_all = _Window(cfg.window)

    def make_batch(step):
        idx = _rng(cfg.seed, 4, step).integers(0, len(pool), cfg.sft.batch_size)
        return [(pool[i].prompt_ids, vocab.encode(world.response_tokens(pool[i].answer))) for i in idx]

    def on_step(step, params, loss):
        row = {"step": step, "stage": "sft", "mean_reward": None, "reward_std_window": None,
               "open_reward": None, "open_reward_std_window": None, "loss": loss, "kl": None,
               "clip_fraction": None, "mean_abs_advantage": None, "eval_in": None,
               "eval_heldout": None}
        w_all.push(None)
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
            row["eval_in"] = evaluate(params, eval_in_sub, cfg.tau)["overall"]
            row["eval_heldout"] = evaluate(params, eval_out_sub, cfg.tau)["overall"]
        metrics.append({k: _fmt(v) if k != "stage" else v for k, v in row.items()})
        if progress is not None:
            progress(row)

    params = supervised_steps(base, cfg, cfg.total_steps, cfg.sft.batch_size, cfg.sft.learning_rate,
                              make_batch, on_step)
    return TrainResult(params, metrics, evaluate(params, data.eval_in, cfg.tau),
                       evaluate(params, data.eval_heldout, cfg.tau))


def open_reward_std(metrics: Sequence[dict], window: int = 100) -> float:
    """Population std of the per-step open-ended reward over the last ``window`` steps."""
    vals = [float(r["open_reward"]) for r in metrics[-window:] if r.get("open_reward") not in ("", None)]
    if not vals:
        raise ValueError("no open-ended rewards in the final window")
    return float(np.std(vals))
