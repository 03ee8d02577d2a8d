"""Report figures rendered to PNG files alongside the CSV output.

The CSV and plain-text tables remain the authoritative report artifacts;
these charts are a convenience view of the same rows. Rendering is
headless (Agg) and deterministic: no timestamps land in the output files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

# Omit the Software tag so identical inputs produce identical bytes across
# matplotlib patch versions.
_PNG_METADATA = {"Software": None}


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def render_stone_scores(path: Path, score_rows: Sequence[Sequence]) -> Path | None:
    """Scatter of per-stone full means by pool position, one color per
    problem, chosen stones starred. Row shape matches scores.csv."""
    if not score_rows:
        return None
    by_problem: dict[str, list[tuple[int, float, bool]]] = {}
    for row in score_rows:
        pid, _stone_id, position, _sel, _rep, full, chosen = row
        by_problem.setdefault(str(pid), []).append(
            (int(position), float(full), str(chosen) == "true")
        )
    fig, ax = plt.subplots(figsize=(8, 4.5))
    cycle = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, pid in enumerate(sorted(by_problem)):
        points = by_problem[pid]
        color = cycle[i % len(cycle)]
        xs = [p for p, _f, _c in points]
        ys = [f for _p, f, _c in points]
        ax.scatter(xs, ys, s=24, color=color, label=pid if i < 10 else None, alpha=0.8)
        for p, f, c in points:
            if c:
                ax.scatter([p], [f], marker="*", s=140, facecolor="none", edgecolor=color)
    ax.set_xlabel("stone position in pool")
    ax.set_ylabel("full mean reward")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("Per-stone scores (star = selected)")
    if len(by_problem) <= 10:
        ax.legend(fontsize=8, loc="best")
    fig.tight_layout()
    _save(fig, path)
    return path


def render_method_means(path: Path, summary_rows: Sequence[Sequence]) -> Path | None:
    """Bar chart of dataset-level mean reward per method, with the fallback
    fraction annotated. Row shape matches summary.csv."""
    if not summary_rows:
        return None
    methods = [str(row[0]) for row in summary_rows]
    means = [float(row[2]) for row in summary_rows]
    fallback = [float(row[4]) for row in summary_rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(methods)), 4.0))
    bars = ax.bar(methods, means, color="#4878d0")
    for bar, fb in zip(bars, fallback):
        label = f"{bar.get_height():.3f}"
        if fb > 0:
            label += f"\nfb {fb:.2f}"
        ax.annotate(
            label,
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center",
            va="bottom",
            fontsize=8,
        )
    ax.set_ylabel("mean reward")
    ax.set_ylim(0, 1.05)
    ax.set_title("Dataset mean by method")
    fig.tight_layout()
    _save(fig, path)
    return path


def render_report_figures(
    out_dir: Path,
    score_rows: Sequence[Sequence],
    per_problem_rows: Sequence[Sequence],
    summary_rows: Sequence[Sequence],
) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    stones = render_stone_scores(out_dir / "stone_scores.png", score_rows)
    if stones:
        written.append(stones)
    means = render_method_means(out_dir / "method_means.png", summary_rows)
    if means:
        written.append(means)
    return written


__all__ = ["render_stone_scores", "render_method_means", "render_report_figures"]
