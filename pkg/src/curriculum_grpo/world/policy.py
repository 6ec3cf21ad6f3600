"""Small autoregressive softmax policy with exact reverse-mode gradients.

Architecture: the prompt is reduced to a fixed set of mean-pooled position
groups, the last ``context_k`` generated tokens are embedded slot by slot,
and the concatenation feeds one tanh hidden layer and a softmax over the
vocabulary. All parameters live in one flat float64 vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """Non-finite values appeared in a forward or backward pass."""


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    prompt_length: int
    layout: tuple[tuple[int, ...], ...]
    embed_dim: int = 8
    hidden: int = 64
    context_k: int = 6
    pad_id: int = 0
    stop_id: Optional[int] = None
    max_len: int = 48

    def __post_init__(self) -> None:
        object.__setattr__(self, "layout", tuple(tuple(int(p) for p in g) for g in self.layout))
        if self.vocab_size < 2 or self.embed_dim < 1 or self.hidden < 1:
            raise ValueError("vocab_size >= 2, embed_dim >= 1 and hidden >= 1 required")
        if self.context_k < 0 or self.max_len < 1:
            raise ValueError("context_k >= 0 and max_len >= 1 required")
        for g in self.layout:
            if not g or any(not 0 <= p < self.prompt_length for p in g):
                raise ValueError(f"layout group {g} outside prompt of length {self.prompt_length}")

    @property
    def n_groups(self) -> int:
        return len(self.layout)

    @property
    def input_dim(self) -> int:
        return (self.n_groups + self.context_k) * self.embed_dim

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "embed": (self.vocab_size, self.embed_dim),
            "w1": (self.input_dim, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.vocab_size),
            "b2": (self.vocab_size,),
        }

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes.values())

    def pool_matrix(self) -> np.ndarray:
        pool = np.zeros((self.n_groups, self.prompt_length))
        for g, positions in enumerate(self.layout):
            pool[g, list(positions)] = 1.0 / len(positions)
        return pool

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "prompt_length": self.prompt_length,
            "layout": [list(g) for g in self.layout], "embed_dim": self.embed_dim,
            "hidden": self.hidden, "context_k": self.context_k, "pad_id": self.pad_id,
            "stop_id": self.stop_id, "max_len": self.max_len,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["layout"] = tuple(tuple(g) for g in d["layout"])
        return cls(**d)


@dataclass
class PolicyParams:
    """Flat parameter vector with named, shaped views."""

    config: PolicyConfig
    flat: np.ndarray

    def __post_init__(self) -> None:
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.config.n_params,):
            raise ValueError(f"expected {self.config.n_params} parameters, got {self.flat.shape}")

    @classmethod
    def zeros(cls, config: PolicyConfig) -> "PolicyParams":
        return cls(config, np.zeros(config.n_params))

    @classmethod
    def init(cls, config: PolicyConfig, rng: np.random.Generator, scale: float = 1.0) -> "PolicyParams":
        p = cls.zeros(config)
        p["embed"][:] = rng.normal(0.0, scale, p["embed"].shape)
        p["w1"][:] = rng.normal(0.0, scale / math.sqrt(config.input_dim), p["w1"].shape)
        p["w2"][:] = rng.normal(0.0, 0.1 * scale / math.sqrt(config.hidden), p["w2"].shape)
        return p

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.config.shapes.items():
            n = math.prod(shape)
            out[name] = slice(start, start + n)
            start += n
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self.flat[self.slices()[name]].reshape(self.config.shapes[name])

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, self.flat.copy())

    def replace(self, flat: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.config, flat)


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite values in policy computation")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _Net:
    """Parameter views plus cached prompt projections for one batch of prompts."""

    def __init__(self, params: PolicyParams, prompts: np.ndarray):
        cfg = params.config
        self.cfg = cfg
        self.E = params["embed"]
        self.W1 = params["w1"]
        self.b1 = params["b1"]
        self.W2 = params["w2"]
        self.b2 = params["b2"]
        self.prompts = prompts
        pdim = cfg.n_groups * cfg.embed_dim
        self.W1p, self.W1c = self.W1[:pdim], self.W1[pdim:]
        self.pool = cfg.pool_matrix()
        # (U, G, d) -> (U, G*d)
        self.pfeat = (self.pool @ self.E[prompts]).reshape(len(prompts), pdim)
        self.pre = self.pfeat @ self.W1p + self.b1

    def logits(self, prompt_idx: np.ndarray, ctx: np.ndarray):
        cfg = self.cfg
        cemb = self.E[ctx].reshape(len(ctx), cfg.context_k * cfg.embed_dim)
        a = self.pre[prompt_idx] + cemb @ self.W1c
        h = np.tanh(a)
        return h @ self.W2 + self.b2, h, cemb


def _as_prompt_array(prompts, cfg: PolicyConfig) -> np.ndarray:
    arr = np.asarray(prompts, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != cfg.prompt_length:
        raise ValueError(f"prompts must have length {cfg.prompt_length}, got {arr.shape[1]}")
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
        raise ValueError("prompt token id outside vocabulary")
    return arr


def _context(generated: Sequence[int], k: int, pad: int) -> list[int]:
    tail = list(generated[-k:]) if k else []
    return [pad] * (k - len(tail)) + tail


def policy_forward(params: PolicyParams, prompt: Sequence[int], generated: Sequence[int] = (),
                   temperature: float = 1.0) -> np.ndarray:
    """Next-token distribution given the prompt and the tokens generated so far."""
    cfg = params.config
    net = _Net(params, _as_prompt_array(prompt, cfg))
    ctx = np.array([_context(list(generated), cfg.context_k, cfg.pad_id)], dtype=np.int64)
    logits, _, _ = net.logits(np.zeros(1, dtype=np.int64), ctx)
    _check_finite(logits)
    if temperature != 1.0:
        logits = logits / temperature
    return np.exp(_log_softmax(logits))[0]


@dataclass
class Rollout:
    prompt_index: int
    tokens: list[int]
    logprobs: np.ndarray
    finished: bool


def sample_batch(params: PolicyParams, prompts, n: int, temperature: float,
                 rng: np.random.Generator, max_len: Optional[int] = None) -> list[list[Rollout]]:
    """Sample ``n`` responses for every prompt, all advanced in lockstep.

    ``temperature == 0`` decodes greedily and records untempered logprobs;
    otherwise logprobs are taken under the tempered distribution used for
    sampling.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    cfg = params.config
    max_len = cfg.max_len if max_len is None else max_len
    parr = _as_prompt_array(prompts, cfg)
    net = _Net(params, parr)
    rows = len(parr) * n
    prompt_idx = np.repeat(np.arange(len(parr)), n)
    k = cfg.context_k
    ctx = np.full((rows, k), cfg.pad_id, dtype=np.int64)
    tokens = np.zeros((rows, max_len), dtype=np.int64)
    logps = np.zeros((rows, max_len))
    lengths = np.zeros(rows, dtype=np.int64)
    active = np.ones(rows, dtype=bool)
    finished = np.zeros(rows, dtype=bool)
    for t in range(max_len):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        logits, _, _ = net.logits(prompt_idx[idx], ctx[idx])
        _check_finite(logits)
        if temperature == 0:
            logp = _log_softmax(logits)
            choice = logp.argmax(axis=1)
        else:
            logp = _log_softmax(logits / temperature)
            cdf = np.cumsum(np.exp(logp), axis=1)
            u = rng.random(idx.size) * cdf[:, -1]
            choice = np.minimum((cdf < u[:, None]).sum(axis=1), cfg.vocab_size - 1)
        tokens[idx, t] = choice
        logps[idx, t] = logp[np.arange(idx.size), choice]
        lengths[idx] += 1
        if k:
            ctx[idx] = np.concatenate([ctx[idx, 1:], choice[:, None]], axis=1)
        if cfg.stop_id is not None:
            stopped = choice == cfg.stop_id
            finished[idx[stopped]] = True
            active[idx[stopped]] = False
    out: list[list[Rollout]] = [[] for _ in range(len(parr))]
    for r in range(rows):
        L = int(lengths[r])
        out[prompt_idx[r]].append(Rollout(int(prompt_idx[r]), tokens[r, :L].tolist(),
                                          logps[r, :L].copy(), bool(finished[r])))
    return out


def sample_responses(params: PolicyParams, prompt: Sequence[int], n: int, temperature: float,
                     rng: np.random.Generator) -> list[Rollout]:
    return sample_batch(params, [list(prompt)], n, temperature, rng)[0]


@dataclass
class ForwardCache:
    """Teacher-forced activations kept for the backward pass."""

    params: PolicyParams
    net: _Net
    prompt_idx: np.ndarray
    ctx: np.ndarray
    targets: np.ndarray
    h: np.ndarray
    cemb: np.ndarray
    probs: np.ndarray
    offsets: np.ndarray
    temperature: float = 1.0
    logprobs: np.ndarray = field(default=None)

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.offsets) - 1)]


def teacher_forced(params: PolicyParams, prompts, responses: Sequence[Sequence[int]],
                   temperature: float = 1.0) -> ForwardCache:
    """Evaluate every response token given its prompt and preceding tokens."""
    cfg = params.config
    parr = _as_prompt_array(prompts, cfg)
    if len(parr) != len(responses):
        raise ValueError("need one prompt per response")
    k = cfg.context_k
    lens = np.array([len(r) for r in responses], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lens)])
    total = int(offsets[-1])
    # responses in a group share a prompt; encode each distinct prompt once
    parr, inverse = np.unique(parr, axis=0, return_inverse=True)
    prompt_idx = np.repeat(inverse.reshape(-1), lens)
    targets = (np.concatenate([np.asarray(r, dtype=np.int64) for r in responses])
               if total else np.zeros(0, dtype=np.int64))
    if total and (targets.min() < 0 or targets.max() >= cfg.vocab_size):
        raise ValueError("response token id outside vocabulary")
    # position of each token inside its own response
    pos = np.arange(total) - np.repeat(offsets[:-1], lens)
    ctx = np.full((total, k), cfg.pad_id, dtype=np.int64)
    for m in range(k):
        lag = k - m
        valid = pos >= lag
        ctx[valid, m] = targets[np.nonzero(valid)[0] - lag]
    net = _Net(params, parr)
    logits, h, cemb = net.logits(prompt_idx, ctx)
    _check_finite(logits)
    logp_all = _log_softmax(logits / temperature)
    probs = np.exp(logp_all)
    lp = logp_all[np.arange(total), targets]
    return ForwardCache(params, net, prompt_idx, ctx, targets, h, cemb, probs, offsets,
                        temperature, lp)


def logprob_of_sequence(params: PolicyParams, prompt: Sequence[int], response: Sequence[int],
                        temperature: float = 1.0) -> np.ndarray:
    return teacher_forced(params, [list(prompt)], [list(response)], temperature).logprobs


def gradients(cache: ForwardCache, adjoint: np.ndarray) -> np.ndarray:
    """Flat gradient of ``sum(adjoint * cache.logprobs)`` w.r.t. the parameters."""
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if adjoint.shape != cache.logprobs.shape:
        raise ValueError(f"adjoint shape {adjoint.shape} != logprob shape {cache.logprobs.shape}")
    _check_finite(adjoint)
    cfg = cache.params.config
    net = cache.net
    total = len(cache.targets)
    # d logp[target] / d logits = (onehot - probs) / T
    dlogits = -cache.probs * adjoint[:, None]
    dlogits[np.arange(total), cache.targets] += adjoint
    dlogits /= cache.temperature

    grad = PolicyParams.zeros(cfg)
    grad["w2"][:] = cache.h.T @ dlogits
    grad["b2"][:] = dlogits.sum(axis=0)
    da = (dlogits @ net.W2.T) * (1.0 - cache.h ** 2)
    grad["b1"][:] = da.sum(axis=0)
    # prompt part of W1 sees the same pooled features for every row of a prompt
    n_prompts = len(net.prompts)
    da_prompt = np.zeros((n_prompts, cfg.hidden))
    np.add.at(da_prompt, cache.prompt_idx, da)
    grad["w1"][: net.W1p.shape[0]] = net.pfeat.T @ da_prompt
    grad["w1"][net.W1p.shape[0]:] = cache.cemb.T @ da

    dE = grad["embed"]
    if cfg.context_k:
        dctx = (da @ net.W1c.T).reshape(total, cfg.context_k, cfg.embed_dim)
        np.add.at(dE, cache.ctx, dctx)
    dpfeat = (da_prompt @ net.W1p.T).reshape(n_prompts, cfg.n_groups, cfg.embed_dim)
    dtok = net.pool.T @ dpfeat
    np.add.at(dE, net.prompts, dtok)
    _check_finite(grad.flat)
    return grad.flat
