"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed immediately (visible with ``-s``) and repeated in the
terminal summary. Criteria 6 and 7 share five paired training runs at the
default configuration, which take several minutes on one core.
"""

import subprocess
import sys
import time
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

import conftest
from oracles import (
    category_iou_oracle, detection_accuracy_oracle, greedy_match_oracle, multi_choice_oracle,
    pixel_iou, zscore_oracle,
)
from curriculum_grpo import rewards
from curriculum_grpo.curriculum import Stage
from curriculum_grpo.grpo import GrpoConfig, ResponseGroup, grpo_objective, normalize_advantages, update_policy
from curriculum_grpo.harness import io, pipelines
from curriculum_grpo.harness.config import RunConfig
from curriculum_grpo.rewards import (
    Binary, BoundingBox, Boxes, Categories, Malformed, MultiChoice, ParsedResponse, SingleChoice,
)
from curriculum_grpo.self_improvement import (
    ACCURACY_WEIGHT, DEFAULT_THRESHOLD, FORMAT_WEIGHT, REASONING_WEIGHT, OracleJudge,
    SelfImproveConfig, self_improve, sft_loss,
)
from curriculum_grpo.world.policy import PolicyConfig, PolicyParams, policy_forward, sample_batch, teacher_forced
from curriculum_grpo.world.scene import IN_DOMAIN
from curriculum_grpo.world.vocab import COLORS, SHAPES

LETTERS = ("A", "B", "C", "D")
N_PAIRS = 5


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def ok_response(payload):
    return ParsedResponse("", payload, True)


def random_subset(rng, universe, nonempty=False):
    while True:
        s = frozenset(u for u in universe if rng.random() < 0.5)
        if s or not nonempty:
            return s


def random_box(rng):
    den = int(rng.choice([1, 2, 4]))
    x0, y0 = (Fraction(int(v), den) for v in rng.integers(0, 8 * den, size=2))
    w, h = (Fraction(int(v), den) for v in rng.integers(1, 4 * den, size=2))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def near_box(rng, box):
    # jitter a ground-truth box so matches above tau are common
    dx, dy = (Fraction(int(v), 2) for v in rng.integers(-1, 2, size=2))
    x0, y0 = max(box.x_min + dx, Fraction(0)), max(box.y_min + dy, Fraction(0))
    return BoundingBox(x0, y0, max(box.x_max + dx, x0 + 1), max(box.y_max + dy, y0 + 1))


# --- 1 -------------------------------------------------------------------------------

def test_criterion_1_reward_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    n = 1000
    mismatches = {}

    bad = 0
    for _ in range(n):
        truth, said = bool(rng.random() < 0.5), rng.random()
        resp = ok_response(Binary(said < 0.5)) if said < 0.9 else ParsedResponse("", Malformed("x"), False)
        want = int(isinstance(resp.payload, Binary) and resp.payload.truth == truth)
        bad += rewards.binary_reward(resp, Binary(truth)).accuracy != want
    mismatches["binary"] = bad

    bad = 0
    for _ in range(n):
        gt, pick = (LETTERS[i] for i in rng.integers(0, 4, size=2))
        want = int(pick == gt)
        bad += rewards.single_choice_reward(ok_response(SingleChoice(pick)), SingleChoice(gt)).accuracy != want
    mismatches["single_choice"] = bad

    bad = 0
    for _ in range(n):
        gt, sel = random_subset(rng, LETTERS, True), random_subset(rng, LETTERS, True)
        got = rewards.multi_choice_reward(ok_response(MultiChoice(sel)), MultiChoice(gt)).accuracy
        bad += got != multi_choice_oracle(sel, gt, LETTERS)
    mismatches["multi_choice"] = bad

    bad = 0
    universe = SHAPES + COLORS
    for _ in range(n):
        gt, pred = random_subset(rng, universe, True), random_subset(rng, universe, True)
        got = rewards.category_overlap_reward(ok_response(Categories(pred)), Categories(gt)).accuracy
        bad += got != category_iou_oracle(pred, gt, universe)
    mismatches["category_iou"] = bad

    bad = 0
    for _ in range(n):
        a = random_box(rng)
        b = near_box(rng, a) if rng.random() < 0.5 else random_box(rng)
        got, want = rewards.box_iou(a, b), pixel_iou(a.coords(), b.coords())
        bad += got != want or abs(float(got) - float(want)) > 1e-9
    mismatches["box_iou"] = bad

    bad = 0
    for _ in range(n):
        gt = [random_box(rng) for _ in range(int(rng.integers(1, 4)))]
        pred = [near_box(rng, g) for g in gt if rng.random() < 0.8]
        pred += [random_box(rng) for _ in range(int(rng.integers(0, 3)))]
        rng.shuffle(pred)
        tau = Fraction(int(rng.integers(0, 4)), 4)
        iou = lambda p, g: pixel_iou(p.coords(), g.coords())
        bad += rewards.match_boxes(pred, gt, tau) != greedy_match_oracle(pred, gt, tau, iou)
        if pred:
            got_acc = rewards.detection_reward(ok_response(Boxes(tuple(pred))), Boxes(tuple(gt)), tau).accuracy
            want_acc = detection_accuracy_oracle([p.coords() for p in pred], [g.coords() for g in gt], tau)
            bad += got_acc != want_acc
    mismatches["detection_matching"] = bad

    elapsed = time.perf_counter() - start
    total_bad = sum(mismatches.values())
    record(1, total_bad == 0 and elapsed < 10,
           f"{n} cases x {len(mismatches)} reward types, mismatches={mismatches}, {elapsed:.1f}s (< 10s)")


# --- 2 -------------------------------------------------------------------------------

def test_criterion_2_partial_credit_exhaustive():
    subsets = [frozenset(c) for k in range(5) for c in combinations(LETTERS, k)]
    checked, bad = 0, 0
    for gt in subsets:
        if not gt:
            continue
        for sel in subsets:
            got = rewards.multi_choice_accuracy(sel, gt)
            if sel == gt:
                want = Fraction(1)
            elif sel and sel < gt:
                want = Fraction(1, 5)
            else:
                want = Fraction(0)
            checked += 1
            bad += got != want or got != multi_choice_oracle(sel, gt, LETTERS)
    record(2, bad == 0 and checked == 16 * 15,
           f"{checked} (selection, non-empty truth) pairs, {bad} mismatches; partial credit exactly 1/5")


# --- 3 -------------------------------------------------------------------------------

def test_criterion_3_advantage_properties():
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    failures, degenerate = 0, 0
    for i in range(10_000):
        size = int(rng.integers(2, 17))
        if i % 10 == 0:
            r = np.full(size, float(rng.choice([0, 1, 2])))
        elif i % 2:
            r = rng.choice([0.0, 0.2, 1.0, 1.2, 2.0], size=size)
        else:
            r = rng.normal(size=size)
        a = normalize_advantages(r)
        if a.degenerate:
            degenerate += 1
            failures += bool(a.values.any())
            continue
        v = a.values
        shift, scale = rng.normal() * 10, rng.uniform(0.1, 10)
        failures += not (abs(v.mean()) < 1e-9 and abs(v.std() - 1) < 1e-9)
        failures += not np.allclose(normalize_advantages(r + shift).values, v, atol=1e-9, rtol=0)
        failures += not np.allclose(normalize_advantages(r * scale).values, v, atol=1e-9, rtol=0)
        if i % 100 == 1:
            failures += not np.allclose(v, zscore_oracle(r.tolist()), atol=1e-9)
    elapsed = time.perf_counter() - start
    record(3, failures == 0 and degenerate > 0 and elapsed < 5,
           f"10000 groups ({degenerate} degenerate), {failures} failures, {elapsed:.2f}s (< 5s)")


# --- 4 -------------------------------------------------------------------------------

def tiny_config():
    return PolicyConfig(vocab_size=5, prompt_length=2, layout=((0,), (1,)), embed_dim=2,
                        hidden=2, context_k=1, pad_id=0, stop_id=4, max_len=4)


def fd_relative_error(f, x, grad, h=1e-6):
    fd = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (f(x + e) - f(x - e)) / (2 * h)
    return np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)


def perturbed_groups(params, rng, n_groups=2, n=3):
    cfg = params.config
    prompts = [list(rng.integers(0, cfg.vocab_size - 1, size=cfg.prompt_length)) for _ in range(n_groups)]
    rollouts = sample_batch(params, prompts, n, 1.0, rng)
    old = params.replace(params.flat + rng.normal(0, 0.05, size=cfg.n_params))
    ref = params.replace(params.flat + rng.normal(0, 0.05, size=cfg.n_params))
    groups = []
    for p, group in zip(prompts, rollouts):
        resp = [r.tokens for r in group]
        o, r_ = teacher_forced(old, [p] * n, resp), teacher_forced(ref, [p] * n, resp)
        groups.append(ResponseGroup("p", p, resp, rng.uniform(0, 2, size=n),
                                    o.split(o.logprobs), r_.split(r_.logprobs)))
    return groups


def test_criterion_4_gradient_checks():
    cfg = tiny_config()
    worst_grpo = worst_sft = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = PolicyParams.init(cfg, rng)
        groups = perturbed_groups(params, rng)
        gcfg = GrpoConfig(kl_coefficient=0.1, clip_epsilon=0.2)
        _, grad, _, adv = grpo_objective(params, groups, gcfg)
        f = lambda x: grpo_objective(params.replace(x), groups, gcfg, advantages=adv)[0]
        worst_grpo = max(worst_grpo, fd_relative_error(f, params.flat.copy(), grad))

        data = [(list(rng.integers(0, 5, size=2)), list(rng.integers(0, 5, size=int(rng.integers(1, 5)))))
                for _ in range(3)]
        _, g = sft_loss(params, data)
        f = lambda x: sft_loss(params.replace(x), data)[0]
        worst_sft = max(worst_sft, fd_relative_error(f, params.flat.copy(), g))
    record(4, cfg.n_params <= 64 and worst_grpo < 1e-4 and worst_sft < 1e-4,
           f"{cfg.n_params} params, 20 seeds, max rel. error grpo={worst_grpo:.1e} sft={worst_sft:.1e} (< 1e-4)")


# --- 5 -------------------------------------------------------------------------------

BANDIT_PAYOFF = (0.0, 0.5, 1.0)


def bandit_step(params, ref_logp, rng, gcfg):
    rollouts = sample_batch(params, [[0]], gcfg.group_size, 1.0, rng)[0]
    resp = [r.tokens for r in rollouts]
    group = ResponseGroup("bandit", [0], resp, [BANDIT_PAYOFF[r[0]] for r in resp],
                          [r.logprobs for r in rollouts], [ref_logp[r] for r in resp])
    return group, update_policy(params, [group], gcfg)


def test_criterion_5_bandit_learning():
    cfg = PolicyConfig(vocab_size=3, prompt_length=1, layout=((0,),), embed_dim=1, hidden=1,
                       context_k=0, pad_id=0, stop_id=None, max_len=1)
    gcfg = GrpoConfig(learning_rate=0.1)
    finals, sign_ok = [], True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        params = PolicyParams.zeros(cfg)
        ref_logp = np.log(policy_forward(params, [0]))
        assert np.allclose(np.exp(ref_logp), 1 / 3)
        for step in range(200):
            group, (new, _) = bandit_step(params, ref_logp, rng, gcfg)
            if step == 0:
                # on-policy at uniform: d loss / d logit_k = -(1/N) sum_i A_i ([a_i = k] - 1/3)
                adv = normalize_advantages(group.rewards).values
                arms = np.array([r[0] for r in group.responses])
                oracle = -np.mean(adv[:, None] * (np.eye(3)[arms] - 1 / 3), axis=0)
                _, grad, _, _ = grpo_objective(params, [group], gcfg)
                b2 = grad[params.slices()["b2"]]
                sign_ok &= bool(np.allclose(b2, oracle, atol=1e-12))
                sign_ok &= bool(policy_forward(new, [0])[2] > 1 / 3) == bool(oracle[2] < 0)
            params = new
        finals.append(float(policy_forward(params, [0])[2]))
    record(5, all(p > 0.9 for p in finals) and sign_ok,
           f"p(best arm) after 200 steps = {[round(p, 3) for p in finals]} (> 0.9 on 5/5), step-1 sign oracle {'ok' if sign_ok else 'violated'}")


# --- 6 and 7 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def paired_runs():
    runs = []
    for seed in range(N_PAIRS):
        cfg = RunConfig(seed=seed)
        start = time.perf_counter()
        data = pipelines.generate_data(cfg)
        base = pipelines.base_policy(cfg, data)
        curr = pipelines.rl_train(cfg, data, base)
        flat = pipelines.rl_train(cfg, data, base, flat=True)
        pair_seconds = time.perf_counter() - start
        sft = pipelines.sft_train(cfg, data, base)
        runs.append({"seed": seed, "pair_seconds": pair_seconds, "curr": curr, "flat": flat, "sft": sft,
                     "window": cfg.window})
    return runs


def test_criterion_6_brick_wall(paired_runs):
    std_wins = acc_wins = 0
    details, slowest = [], 0.0
    for run in paired_runs:
        s_c = pipelines.open_reward_std(run["curr"].metrics, run["window"])
        s_f = pipelines.open_reward_std(run["flat"].metrics, run["window"])
        a_c, a_f = run["curr"].eval_in["overall"], run["flat"].eval_in["overall"]
        std_wins += s_c < s_f
        acc_wins += a_c >= a_f
        slowest = max(slowest, run["pair_seconds"])
        details.append(f"seed {run['seed']}: std {s_c:.3f}/{s_f:.3f} acc {a_c:.3f}/{a_f:.3f}")
    ok = std_wins >= 4 and acc_wins >= 4 and slowest < 15 * 60
    record(6, ok, f"(a) std lower {std_wins}/{N_PAIRS}, (b) accuracy >= {acc_wins}/{N_PAIRS}, "
                  f"slowest pair {slowest:.0f}s; curriculum/flat: " + "; ".join(details))


def test_criterion_7_generalization_direction(paired_runs):
    wins, details = 0, []
    for run in paired_runs:
        drop = lambda r: r.eval_in["overall"] - r.eval_heldout["overall"]
        d_c, d_s = drop(run["curr"]), drop(run["sft"])
        wins += d_c <= d_s
        details.append(f"seed {run['seed']}: {d_c:+.3f}/{d_s:+.3f}")
    record(7, wins >= 4, f"curriculum drop <= SFT drop in {wins}/{N_PAIRS}; curriculum/SFT: " + "; ".join(details))


# --- 8 -------------------------------------------------------------------------------

def reachable_accuracies(max_labels):
    subsets = lambda xs: [frozenset(c) for k in range(len(xs) + 1) for c in combinations(xs, k)]
    accs = {Fraction(0), Fraction(1)}
    letters = subsets(LETTERS)
    accs |= {rewards.multi_choice_accuracy(s, g) for s in letters for g in letters if g}
    preds = subsets(SHAPES + COLORS)
    for g in subsets(SHAPES):
        if 1 <= len(g) <= max_labels:
            accs |= {rewards.category_iou(p, g) for p in preds}
    return accs


def test_criterion_8_self_improvement_contract():
    lattice_bad = [(a, f, r) for a in reachable_accuracies(IN_DOMAIN.max_objects)
                   for f in (0, 1) for r in (0, 1)
                   if ACCURACY_WEIGHT * a + FORMAT_WEIGHT * f + REASONING_WEIGHT * r >= DEFAULT_THRESHOLD
                   and a != 1]

    cfg = RunConfig.from_json({"data": {"train_per_kind": 40, "eval_per_kind": 1, "heldout_per_kind": 1,
                                        "text_tasks_per_domain": 60}})
    data = pipelines.generate_data(cfg)
    base = pipelines.base_policy(cfg, data)
    tasks = data.text_tasks + data.pools[Stage.OPEN][: len(data.text_tasks)]
    si = SelfImproveConfig(sft_steps=50)
    after, curated, report = self_improve(base, tasks, si, OracleJudge())
    by_id = {t.id: t for t in tasks}
    wrong = sum(rewards.score(s.text, by_id[s.task_id]).accuracy != 1 for s in curated.samples)
    curve = report["loss_curve"]
    decreasing = len(curve) == 51 and all(b < a for a, b in zip(curve, curve[1:]))
    ok = not lattice_bad and len(curated) > 0 and wrong == 0 and decreasing
    record(8, ok, f"lattice: {len(lattice_bad)} sub-1 accuracies reach {DEFAULT_THRESHOLD:g}; curated "
                  f"{len(curated)}/{report['candidates']}, {wrong} not fully correct; 50-step loss "
                  f"{curve[0]:.6f} -> {curve[-1]:.6f} (total decrease {curve[0] - curve[-1]:.2e} at lr {si.learning_rate:g}) "
                  f"{'strictly decreasing' if decreasing else 'NOT strictly decreasing'}")


# --- 9 -------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    config = tmp_path / "config.json"
    io.write_json(config, {"stage_budgets": [20, 20, 20], "eval_interval": 30, "eval_subset": 20,
                           "data": {"train_per_kind": 50, "eval_per_kind": 20, "heldout_per_kind": 20,
                                    "text_tasks_per_domain": 5},
                           "base": {"steps": 30}})
    outputs = []
    for name in ("a", "b"):
        proc = subprocess.run([sys.executable, "-m", "curriculum_grpo.harness.cli", "train-curr-rl",
                               "--config", str(config), "--seed", "7", "--out", str(tmp_path / name)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append((tmp_path / name / "metrics.csv").read_bytes())
    same = outputs[0] == outputs[1]
    rows = outputs[0].decode().count("\n") - 1
    record(9, same and rows == 60, f"two separate train-curr-rl processes, {rows} metric rows, "
                                   f"CSV {'byte-identical' if same else 'DIFFERENT'}")
