"""Reward-curve figures for finished runs, rendered off-screen to PNG."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _column(rows: Sequence[dict], name: str) -> tuple[np.ndarray, np.ndarray]:
    steps, vals = [], []
    for r in rows:
        v = r.get(name, "")
        if v not in ("", None):
            steps.append(int(r["step"]))
            vals.append(float(v))
    return np.array(steps), np.array(vals)


def _stage_bounds(rows: Sequence[dict]) -> list[int]:
    return [int(b["step"]) for a, b in zip(rows, rows[1:]) if a["stage"] != b["stage"]]


def plot_reward_curves(runs: dict[str, Sequence[dict]], path, window: int = 20) -> Path:
    """Open-ended reward per step (smoothed) and its rolling std, one line per run."""
    fig, (ax_r, ax_s) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for name, rows in runs.items():
        steps, vals = _column(rows, "open_reward")
        if len(vals):
            k = max(1, min(window, len(vals) // 5))
            smooth = np.convolve(vals, np.ones(k) / k, mode="valid")
            ax_r.plot(steps[k - 1:], smooth, label=name, lw=1.2)
        steps, std = _column(rows, "open_reward_std_window")
        if len(std):
            ax_s.plot(steps, std, label=name, lw=1.2)
        for b in _stage_bounds(rows):
            ax_r.axvline(b, color="grey", ls=":", lw=0.8)
    ax_r.set_ylabel("open-ended reward")
    ax_s.set_ylabel("windowed reward std")
    ax_s.set_xlabel("step")
    ax_r.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_eval_curves(runs: dict[str, Sequence[dict]], path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    for name, rows in runs.items():
        for col, ls in (("eval_in", "-"), ("eval_heldout", "--")):
            steps, vals = _column(rows, col)
            if len(vals):
                ax.plot(steps, vals, ls, marker="o", ms=3, label=f"{name} {col}")
    ax.set_xlabel("step")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
