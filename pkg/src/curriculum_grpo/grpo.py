"""Group-relative advantages and the clipped, KL-regularized policy update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from curriculum_grpo.world.policy import NumericError, PolicyParams, gradients, teacher_forced


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.04
    learning_rate: float = 0.05
    std_epsilon: float = 1e-8
    max_grad_norm: Optional[float] = None

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.std_epsilon <= 0:
            raise ValueError("std_epsilon must be positive")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive when set")


@dataclass
class ResponseGroup:
    prompt_id: str
    prompt: Sequence[int]
    responses: list[list[int]]
    rewards: np.ndarray
    old_logprobs: list[np.ndarray]
    ref_logprobs: list[np.ndarray]

    def __post_init__(self) -> None:
        self.rewards = np.asarray([float(r) for r in self.rewards], dtype=np.float64)
        n = len(self.responses)
        if n < 2:
            raise ValueError("a response group needs at least two responses")
        if not (len(self.rewards) == len(self.old_logprobs) == len(self.ref_logprobs) == n):
            raise ValueError("rewards and logprobs must align with responses")
        for resp, old, ref in zip(self.responses, self.old_logprobs, self.ref_logprobs):
            if len(resp) == 0:
                raise ValueError("responses must be non-empty")
            if len(old) != len(resp) or len(ref) != len(resp):
                raise ValueError("per-token logprobs must align with response tokens")


@dataclass(frozen=True)
class AdvantageVector:
    values: np.ndarray
    degenerate: bool


def normalize_advantages(rewards: Sequence, std_epsilon: float = 1e-8) -> AdvantageVector:
    """z-score rewards within the group using the population std.

    A group whose std falls below ``std_epsilon`` carries no signal and gets
    all-zero advantages.
    """
    r = np.asarray([float(x) for x in rewards], dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards to normalize")
    centered = r - r.mean()
    std = float(np.sqrt(np.mean(centered ** 2)))
    if std < std_epsilon:
        return AdvantageVector(np.zeros_like(r), True)
    return AdvantageVector(centered / max(std, std_epsilon), False)


def kl_estimate(new_logprobs: np.ndarray, ref_logprobs: np.ndarray) -> np.ndarray:
    """Per-token ``exp(ref - new) - (ref - new) - 1``, non-negative and 0 at new == ref."""
    d = np.asarray(ref_logprobs) - np.asarray(new_logprobs)
    return np.expm1(d) - d


@dataclass
class LossResult:
    loss: float
    grad: list[np.ndarray]
    kl: float
    clip_fraction: float


def grpo_loss(group: ResponseGroup, advantages: AdvantageVector,
              new_logprobs: Sequence[np.ndarray], cfg: GrpoConfig) -> LossResult:
    """Clipped surrogate plus KL penalty, averaged over tokens then responses.

    The sequence-level advantage is broadcast to every token of its response.
    ``grad`` holds d(loss)/d(new_logprobs) per response.
    """
    n = len(group.responses)
    if len(new_logprobs) != n or len(advantages.values) != n:
        raise ValueError("advantages and new logprobs must align with the group")
    eps = cfg.clip_epsilon
    loss = kl_total = 0.0
    clipped = tokens = 0
    grads = []
    for i in range(n):
        new = np.asarray(new_logprobs[i], dtype=np.float64)
        old, ref = group.old_logprobs[i], group.ref_logprobs[i]
        if new.shape != old.shape:
            raise ValueError(f"response {i}: new logprobs shape {new.shape} != {old.shape}")
        if not (np.all(np.isfinite(new)) and np.all(np.isfinite(old)) and np.all(np.isfinite(ref))):
            raise NumericError(f"non-finite logprobs in response {i}")
        a = float(advantages.values[i])
        L = len(new)
        ratio = np.exp(new - old)
        clipped_ratio = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        unclipped_term = ratio * a
        clipped_term = clipped_ratio * a
        surrogate = np.minimum(unclipped_term, clipped_term)
        # gradient flows through the ratio only where the unclipped branch is the min
        active = unclipped_term <= clipped_term
        kl = kl_estimate(new, ref)
        loss += float(np.sum(-surrogate + cfg.kl_coefficient * kl)) / L
        kl_total += float(np.mean(kl))
        d_surr = np.where(active, unclipped_term, 0.0)
        d_kl = 1.0 - np.exp(ref - new)
        grads.append((-d_surr + cfg.kl_coefficient * d_kl) / (L * n))
        clipped += int(np.sum(~active))
        tokens += L
    return LossResult(loss / n, grads, kl_total / n, clipped / tokens)


@dataclass
class PolicyUpdateStats:
    loss: float
    mean_reward: float
    mean_abs_advantage: float
    kl: float
    clip_fraction: float
    grad_norm: float
    degenerate_fraction: float


def grpo_objective(params: PolicyParams, groups: Sequence[ResponseGroup], cfg: GrpoConfig,
                   advantages: Optional[Sequence[AdvantageVector]] = None,
                   temperature: float = 1.0):
    """Mean ``grpo_loss`` over the batch with its flat parameter gradient."""
    if not groups:
        raise ValueError("update needs at least one group")
    if advantages is None:
        advantages = [normalize_advantages(g.rewards, cfg.std_epsilon) for g in groups]
    prompts, responses = [], []
    for g in groups:
        for resp in g.responses:
            prompts.append(list(g.prompt))
            responses.append(resp)
    cache = teacher_forced(params, prompts, responses, temperature)
    per_resp = cache.split(cache.logprobs)
    adjoint, results, j = [], [], 0
    for g, adv in zip(groups, advantages):
        n = len(g.responses)
        res = grpo_loss(g, adv, per_resp[j:j + n], cfg)
        results.append(res)
        adjoint.extend(x / len(groups) for x in res.grad)
        j += n
    grad = gradients(cache, np.concatenate(adjoint))
    loss = float(np.mean([r.loss for r in results]))
    return loss, grad, results, advantages


def update_policy(params: PolicyParams, groups: Sequence[ResponseGroup], cfg: GrpoConfig,
                  temperature: float = 1.0, optimizer=None):
    """One descent step on the batch-mean GRPO loss; returns (params, stats)."""
    loss, grad, results, advantages = grpo_objective(params, groups, cfg, temperature=temperature)
    norm = float(np.linalg.norm(grad))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient")
    if cfg.max_grad_norm is not None and norm > cfg.max_grad_norm:
        grad = grad * (cfg.max_grad_norm / norm)
    step = optimizer.step(grad) if optimizer is not None else cfg.learning_rate * grad
    new_params = params.replace(params.flat - step)
    stats = PolicyUpdateStats(
        loss=loss,
        mean_reward=float(np.mean([g.rewards.mean() for g in groups])),
        mean_abs_advantage=float(np.mean([np.abs(a.values).mean() for a in advantages])),
        kl=float(np.mean([r.kl for r in results])),
        clip_fraction=float(np.mean([r.clip_fraction for r in results])),
        grad_norm=norm,
        degenerate_fraction=float(np.mean([a.degenerate for a in advantages])),
    )
    return new_params, stats


class Adam:
    """Adam step sizes for a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)
