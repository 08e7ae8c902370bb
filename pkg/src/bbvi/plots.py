"""Figure rendering for the CLI report paths (written next to the CSVs)."""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from bbvi.bench import ComparisonResult, SuiteRow
from bbvi.optimize import OptimizationTrace


def render_ccdf(result: ComparisonResult, path, label_a: str = "A", label_b: str = "B") -> None:
    """Complementary CDF of per-model improvements, as a step curve."""
    deltas = np.array([p[0] for p in result.points])
    fracs = np.array([p[1] for p in result.points])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(deltas, fracs, where="post")
    ax.axvline(0.0, color="gray", lw=0.8, ls=":")
    ax.set_xlabel(f"improvement of {label_a} over {label_b} (nats)")
    ax.set_ylabel("fraction of models with at least that gain")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_trace(trace: OptimizationTrace, path) -> None:
    """Objective per iteration for every step size in a search."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run in trace.runs:
        marker = " (diverged)" if run.diverged else ""
        ax.plot(run.objectives, lw=0.9, label=f"eta={run.step_size:.3g}{marker}")
    if trace.selected_step_size is not None:
        ax.set_title(f"selected step size: {trace.selected_step_size:.3g}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective estimate (nats)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_suite(rows: Sequence[SuiteRow], path) -> None:
    """Per-model bound estimates grouped by preset, with SE error bars."""
    by_preset: dict[str, list[SuiteRow]] = defaultdict(list)
    for r in rows:
        by_preset[r.preset].append(r)
    models = sorted({r.model for r in rows})
    pos = {m: i for i, m in enumerate(models)}
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(models)), 3.5))
    width = 0.8 / max(len(by_preset), 1)
    for j, (preset, rs) in enumerate(sorted(by_preset.items())):
        xs = [pos[r.model] + j * width for r in rs if np.isfinite(r.estimate)]
        ys = [r.estimate for r in rs if np.isfinite(r.estimate)]
        es = [3 * r.se for r in rs if np.isfinite(r.estimate)]
        ax.errorbar(xs, ys, yerr=es, fmt="o", ms=3, capsize=2, label=preset)
    ax.set_xticks([pos[m] + 0.4 for m in models])
    ax.set_xticklabels(models, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("bound estimate (nats)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
