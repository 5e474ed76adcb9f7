"""Figure rendering for report output; every function writes a PNG file.

Uses the Agg backend so rendering works headless.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .harness import CellSummary

_METHOD_ORDER = ("source_only", "target_st", "gst", "gdo")


def render_summary(summaries: Sequence[CellSummary], out_path: str | Path) -> Path:
    """Grouped bars of mean target accuracy per method, one group per
    (n_given, inter_steps) cell, with the 95% halfwidth as error bars."""
    cells = sorted({(s.n_given, s.inter_steps) for s in summaries})
    methods = [m for m in _METHOD_ORDER if any(s.method == m for s in summaries)]
    methods += sorted({s.method for s in summaries} - set(methods))
    by_key = {(s.method, s.n_given, s.inter_steps): s for s in summaries}

    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(cells), 4.0))
    width = 0.8 / max(len(methods), 1)
    for j, method in enumerate(methods):
        xs, ys, errs = [], [], []
        for i, (ng, ist) in enumerate(cells):
            s = by_key.get((method, ng, ist))
            if s is None:
                continue
            xs.append(i + (j - (len(methods) - 1) / 2) * width)
            ys.append(s.mean * 100)
            errs.append(s.halfwidth * 100)
        ax.bar(xs, ys, width=width, label=method, yerr=errs, capsize=2)
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels([f"n_given={ng}\ninter={ist}" for ng, ist in cells])
    ax.set_ylabel("target accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title("target accuracy by method")
    return _save(fig, out_path)


def render_ablation(summaries: Sequence[CellSummary], method: str,
                    out_path: str | Path) -> Path:
    """Mean accuracy against n_given, one line per inter_steps value."""
    mine = [s for s in summaries if s.method == method]
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for ist in sorted({s.inter_steps for s in mine}):
        pts = sorted((s.n_given, s.mean, s.halfwidth)
                     for s in mine if s.inter_steps == ist)
        ax.errorbar([p[0] for p in pts], [p[1] * 100 for p in pts],
                    yerr=[p[2] * 100 for p in pts], marker="o", capsize=2,
                    label=f"inter_steps={ist}")
    ax.set_xlabel("given domains")
    ax.set_ylabel("target accuracy (%)")
    ax.set_title(f"{method}: accuracy vs. domain count")
    ax.legend(fontsize=8)
    return _save(fig, out_path)


def render_bound_curve(rows: Sequence[dict[str, Any]], out_path: str | Path) -> Path:
    """The error bound against the horizon T."""
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.plot([r["T"] for r in rows], [r["bound"] for r in rows], marker=".")
    ax.set_xlabel("T")
    ax.set_ylabel("bound")
    ax.set_title("error bound vs. horizon")
    return _save(fig, out_path)


def render_trace(trace_csv: str, out_path: str | Path) -> Path:
    """Stability values over training steps, log scale."""
    lines = trace_csv.strip().splitlines()[1:]
    vs = [float(line.split(",")[4]) for line in lines]
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.semilogy(range(len(vs)), vs, marker=".")
    ax.set_xlabel("outer step")
    ax.set_ylabel("V")
    ax.set_title("stability trace")
    return _save(fig, out_path)


def _save(fig, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
