"""Command-line entry point.

Subcommands: gen-data, train-curr-rl, train-rl-flat, train-sft, self-improve,
eval, reward-check, report. Failures print one JSON object to stderr and exit
nonzero. Output directories default to ``<output_dir>/<subcommand>``; the
``CURRICULUM_GRPO_OUT`` environment variable overrides ``output_dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from curriculum_grpo import rewards
from curriculum_grpo.curriculum import CurriculumSchedule, Stage
from curriculum_grpo.harness import io, pipelines
from curriculum_grpo.harness.config import RunConfig
from curriculum_grpo.self_improvement import (
    CandidateSample, ExternalJudge, OracleJudge, sample_candidates, self_improve,
)
from curriculum_grpo.world.tasks import TaskInstance

log = logging.getLogger("curriculum_grpo")

EXIT_FAILURE, EXIT_USAGE = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(stage_budgets=CurriculumSchedule.split_evenly(args.steps).budgets)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return cfg.resolved_output_dir() / args.command


def _load_tasks(path) -> list[TaskInstance]:
    return [TaskInstance.from_json(d) for d in io.read_jsonl(path)]


def _load_data(args, cfg: RunConfig) -> pipelines.DataBundle:
    if not getattr(args, "data", None):
        return pipelines.generate_data(cfg)
    root = Path(args.data)
    names = [f"train_{s.label}" for s in Stage] + ["eval_in", "eval_heldout", "text"]
    splits = {}
    for name in names:
        path = root / f"{name}.jsonl"
        if not path.exists():
            if name == "text":
                continue
            raise FileNotFoundError(f"{path} missing; run gen-data first")
        splits[name] = _load_tasks(path)
    return pipelines.DataBundle.from_splits(splits)


def _base(args, cfg: RunConfig, data):
    if getattr(args, "init", None):
        return io.load_checkpoint(args.init, pipelines.policy_config(cfg), args.force)
    return pipelines.base_policy(cfg, data)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _read_responses(path) -> dict[str, str]:
    out = {}
    for d in io.read_jsonl(path):
        if "id" not in d or "response" not in d:
            raise ValueError(f"{path}: every record needs 'id' and 'response'")
        out[str(d["id"])] = str(d["response"])
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    data = pipelines.generate_data(cfg)
    counts = {}
    for name, tasks in data.splits().items():
        io.write_jsonl(out / f"{name}.jsonl", (t.to_json() for t in tasks))
        counts[name] = len(tasks)
    io.write_json(out / "manifest.json", {"seed": cfg.seed, "data": cfg.to_json()["data"], "counts": counts})
    _emit({"out": str(out), "counts": counts})
    return 0


def _train(args, mode: str) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    data = _load_data(args, cfg)
    base = _base(args, cfg, data)

    def progress(row):
        if row["step"] % 250 == 0:
            log.info("step %d stage %s reward %s", row["step"], row["stage"], row["mean_reward"])

    if mode == "sft":
        result = pipelines.sft_train(cfg, data, base, progress)
    else:
        result = pipelines.rl_train(cfg, data, base, flat=(mode == "flat"), progress=progress)
    io.write_csv(out / "metrics.csv", pipelines.METRIC_FIELDS, result.metrics)
    io.save_checkpoint(result.params, out / "checkpoint.json", {"mode": mode, "seed": cfg.seed})
    summary = {"mode": mode, "seed": cfg.seed, "steps": cfg.total_steps,
               "eval_in": result.eval_in, "eval_heldout": result.eval_heldout}
    if mode != "sft":
        summary["open_reward_std_last_window"] = pipelines.open_reward_std(result.metrics, cfg.window)
    io.write_json(out / "eval.json", summary)
    io.write_json(out / "run_config.json", cfg.to_json())
    _emit({"out": str(out), **summary})
    return 0


def cmd_self_improve(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    params = io.load_checkpoint(args.checkpoint, pipelines.policy_config(cfg), args.force)
    if args.tasks:
        task_list = _load_tasks(args.tasks)
    else:
        data = _load_data(args, cfg)
        task_list = data.text_tasks + data.pools[Stage.OPEN][: len(data.text_tasks)]
    si = cfg.self_improve
    if args.emit_candidates:
        cands = sample_candidates(params, task_list, si.samples_per_task, si.temperature,
                                  np.random.default_rng(si.seed))
        io.write_jsonl(out / "candidates.jsonl", (c.to_json() for c in cands))
        _emit({"out": str(out / "candidates.jsonl"), "candidates": len(cands)})
        return 0
    candidates = None
    if args.candidates:
        candidates = [CandidateSample.from_json(d) for d in io.read_jsonl(args.candidates)]
    judge = ExternalJudge.from_file(args.judge_scores) if args.judge_scores else OracleJudge(cfg.tau)
    new_params, curated, report = self_improve(params, task_list, si, judge, candidates)
    curated.save(out / "curated.jsonl")
    io.save_checkpoint(new_params, out / "checkpoint.json", {"mode": "self-improve", "seed": si.seed})
    io.write_json(out / "report.json", report)
    _emit({"out": str(out), **{k: report[k] for k in ("candidates", "accepted", "acceptance_rate", "warning")}})
    return 0


def cmd_eval(args) -> int:
    task_list = _load_tasks(args.tasks)
    if bool(args.checkpoint) == bool(args.responses):
        raise UsageError("eval needs exactly one of --checkpoint or --responses")
    if args.responses:
        by_id = _read_responses(args.responses)
        missing = [t.id for t in task_list if t.id not in by_id]
        if missing:
            raise ValueError(f"no response for {len(missing)} task(s), first: {missing[0]}")
        responses = [by_id[t.id] for t in task_list]
    else:
        cfg = _load_config(args)
        expected = pipelines.policy_config(cfg) if args.config else None
        params = io.load_checkpoint(args.checkpoint, expected, args.force)
        responses = pipelines.greedy_responses(params, task_list)
    acc = pipelines.accuracy_by_kind(task_list, responses, args.tau)
    result = {"tasks": len(task_list), "accuracy": acc}
    if args.out:
        io.write_json(args.out, result)
    _emit(result)
    return 0


def cmd_reward_check(args) -> int:
    tasks_by_id = {t.id: t for t in _load_tasks(args.tasks)}
    lines = []
    for d in io.read_jsonl(args.responses):
        tid = str(d.get("id"))
        if tid not in tasks_by_id:
            raise KeyError(f"response for unknown task id {tid!r}")
        task = tasks_by_id[tid]
        r = rewards.score(str(d.get("response", "")), task, args.tau)
        lines.append({"id": tid, **r.as_dict(),
                      "accuracy_exact": str(r.accuracy), "total_exact": str(r.total)})
    if args.out:
        io.write_jsonl(args.out, lines)
    for rec in lines:
        sys.stdout.write(io.dumps_line(rec) + "\n")
    return 0


def cmd_report(args) -> int:
    from curriculum_grpo.harness import plotting
    runs = {}
    for run in args.runs:
        path = Path(run)
        runs[path.name] = io.read_csv(path / "metrics.csv" if path.is_dir() else path)
    out = Path(args.out) if args.out else Path(args.runs[0]).parent / "report"
    figs = [plotting.plot_reward_curves(runs, out / "reward_curves.png"),
            plotting.plot_eval_curves(runs, out / "eval_curves.png")]
    rows = []
    for name, metrics in runs.items():
        try:
            std = pipelines.open_reward_std(metrics, args.window)
        except ValueError:
            std = None
        last_eval = [r for r in metrics if r.get("eval_in")]
        rows.append({"run": name, "steps": len(metrics),
                     "open_reward_std_last_window": "" if std is None else f"{std:.6f}",
                     "eval_in": last_eval[-1]["eval_in"] if last_eval else "",
                     "eval_heldout": last_eval[-1]["eval_heldout"] if last_eval else ""})
    fields = ["run", "steps", "open_reward_std_last_window", "eval_in", "eval_heldout"]
    io.write_csv(out / "summary.csv", fields, rows)
    sys.stdout.write((out / "summary.csv").read_text(encoding="utf-8"))
    for f in figs:
        log.info("wrote %s", f)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="curriculum-grpo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, out=True):
        sp.add_argument("--config", help="RunConfig JSON file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if out:
            sp.add_argument("--out", help="output directory")
        return sp

    with_config(sub.add_parser("gen-data", help="write stage pools and eval splits as JSONL"))
    for name, help_ in (("train-curr-rl", "GRPO with the three-stage curriculum"),
                        ("train-rl-flat", "GRPO on the merged task pool"),
                        ("train-sft", "supervised baseline on ground-truth answers")):
        sp = with_config(sub.add_parser(name, help=help_))
        sp.add_argument("--data", help="directory written by gen-data (generated in memory if omitted)")
        sp.add_argument("--steps", type=int, help="total steps, split evenly over the stages")
        sp.add_argument("--init", help="start from this checkpoint instead of the warmed-up base")
        sp.add_argument("--force", action="store_true", help="accept a checkpoint config-hash mismatch")

    sp = with_config(sub.add_parser("self-improve", help="sample, judge, filter and fine-tune"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="directory written by gen-data")
    sp.add_argument("--tasks", help="task JSONL to sample on (default: text tasks plus open-ended pool)")
    sp.add_argument("--candidates", help="reuse candidates from a previous --emit-candidates")
    sp.add_argument("--judge-scores", help='JSONL of {"candidate_id", "score"} from an external judge')
    sp.add_argument("--emit-candidates", action="store_true", help="write candidates.jsonl and stop")
    sp.add_argument("--force", action="store_true")

    sp = with_config(sub.add_parser("eval", help="accuracy per task kind"), out=False)
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--responses", help='JSONL of {"id", "response"}')
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--out", help="write the result JSON here too")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("reward-check", help="score a response file, one breakdown per line")
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--responses", required=True, help='JSONL of {"id", "response"}')
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--out", help="also write the breakdowns as JSONL")

    sp = sub.add_parser("report", help="plot reward curves and summarise finished runs")
    sp.add_argument("runs", nargs="+", help="run directories (or metrics CSV files)")
    sp.add_argument("--out", help="directory for figures and summary.csv")
    sp.add_argument("--window", type=int, default=100)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-curr-rl": lambda a: _train(a, "curriculum"),
    "train-rl-flat": lambda a: _train(a, "flat"),
    "train-sft": lambda a: _train(a, "sft"),
    "self-improve": cmd_self_improve,
    "eval": cmd_eval,
    "reward-check": cmd_reward_check,
    "report": cmd_report,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except Exception as exc:  # every failure surfaces as JSON
        log.debug("command failed", exc_info=True)
        return _fail("runtime", exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
