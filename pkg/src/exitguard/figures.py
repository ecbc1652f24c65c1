"""Matplotlib renderings of the report tables.

Each CSV emitted by the CLI report path gets a PNG next to it: the risk
validity curve against the diagonal, per-exit reliability diagrams, exit
rate bars, and Monte Carlo validity bars. Rendering is deterministic for
fixed inputs (fixed dpi, no timestamps), so figure files participate in the
byte-identical-output guarantee.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .calib import RiskCurve
from .metrics import BinStat
from .policy import PolicyReport, ValidityResult

DPI = 150

_EXIT_COLORS = ["#0072b2", "#d55e00", "#009e73", "#cc79a7", "#f0e442", "#56b4e9"]


def _new_axes(width=6.0, height=4.5):
    fig, ax = plt.subplots(figsize=(width, height), dpi=DPI)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path) -> None:
    fig.savefig(path, format="png", dpi=DPI, bbox_inches="tight")
    plt.close(fig)


def save_risk_curve_figure(curve: RiskCurve, path) -> None:
    """Observed selective risk vs target budget, one line per exit."""
    fig, ax = _new_axes()
    deltas = [row.delta for row in curve.rows]
    num_exits = len(curve.rows[0].exit_rates)
    for j in range(num_exits):
        risks = [row.exit_risks[j] for row in curve.rows]
        xs = [d for d, r in zip(deltas, risks) if r is not None]
        ys = [r for r in risks if r is not None]
        label = f"exit {j + 1}" + (" (final)" if j == num_exits - 1 else "")
        ax.plot(xs, ys, marker="o", markersize=4,
                color=_EXIT_COLORS[j % len(_EXIT_COLORS)], label=label)
    overall = [(d, row.overall_risk) for d, row in zip(deltas, curve.rows)
               if row.overall_risk is not None]
    if overall:
        ax.plot([p[0] for p in overall], [p[1] for p in overall],
                marker="s", markersize=4, color="black", linestyle="--",
                label="overall early-exit")
    lim = max(deltas)
    ax.plot([0, lim], [0, lim], color="gray", linestyle=":", label="target (y = x)")
    ax.set_xlabel("target risk budget")
    ax.set_ylabel("observed selective risk")
    ax.set_title("risk validity")
    ax.legend(fontsize=8)
    _save(fig, path)


def save_reliability_figure(table: dict[int, list[BinStat]], path) -> None:
    """Per-exit reliability diagrams: bin accuracy vs mean confidence."""
    exits = sorted(table)
    fig, axes = plt.subplots(
        1, len(exits), figsize=(3.4 * len(exits), 3.4), dpi=DPI, squeeze=False
    )
    for ax, exit_index in zip(axes[0], exits):
        stats = table[exit_index]
        width = stats[0].upper - stats[0].lower
        centers = [s.lower + width / 2 for s in stats]
        accs = [s.accuracy if s.count else 0.0 for s in stats]
        ax.bar(centers, accs, width=width * 0.9, color="#0072b2", alpha=0.8)
        ax.plot([0, 1], [0, 1], color="gray", linestyle=":")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_title(f"exit {exit_index}", fontsize=9)
        ax.set_xlabel("confidence", fontsize=8)
        ax.set_ylabel("accuracy", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    _save(fig, path)


def save_exit_rate_figure(report: PolicyReport, path) -> None:
    """Exit rate bars annotated with the policy's expected compute."""
    fig, ax = _new_axes(5.0, 3.6)
    k = len(report.exit_rates)
    positions = np.arange(1, k + 1)
    ax.bar(positions, report.exit_rates,
           color=[_EXIT_COLORS[j % len(_EXIT_COLORS)] for j in range(k)], alpha=0.85)
    ax.set_xticks(positions)
    ax.set_xlabel("exit")
    ax.set_ylabel("exit rate")
    ax.set_ylim(0, 1)
    ax.set_title(
        f"{report.policy}: acc {report.accuracy:.3f}, "
        f"expected compute {report.expected_compute:.3f}"
    )
    _save(fig, path)


def save_validity_figure(result: ValidityResult, path) -> None:
    """Mean MC risk per exit with 3-standard-error whiskers vs the budget."""
    fig, ax = _new_axes(5.0, 3.6)
    xs, means, errs = [], [], []
    for e in result.exits:
        if e.mean_risk is None:
            continue
        xs.append(e.exit_index)
        means.append(e.mean_risk)
        errs.append(3.0 * (e.std_error or 0.0))
    ax.errorbar(xs, means, yerr=errs, fmt="o", color="#0072b2", capsize=4,
                label="mean observed risk (3 SE)")
    ax.axhline(result.delta, color="#d55e00", linestyle="--",
               label=f"budget {result.delta:g}")
    ax.set_xticks([e.exit_index for e in result.exits])
    ax.set_xlabel("exit")
    ax.set_ylabel("selective risk")
    ax.set_title(f"validity over {result.trials} resplits")
    ax.legend(fontsize=8)
    _save(fig, path)
