"""Evaluation reports: delimited tables, text summaries and rendered figures.

The eval path always emits machine-readable TSV (one metrics table plus
plot-ready per-bin and per-category series) and, unless disabled, renders
the bin and category charts to PNG files next to the tables.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, TextIO

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_metrics_table(fh: TextIO, rows: Sequence[tuple[str, float]]) -> None:
    fh.write("metric\tvalue\n")
    for name, value in rows:
        fh.write(f"{name}\t{value:.6f}\n")


def write_bin_series(path: str | Path, contributions: np.ndarray, masses: np.ndarray) -> None:
    """Columnar per-bin series: bin index, pair mass, contribution to R@k."""
    lines = ["bin\tpair_mass\tcontribution"]
    for b, (mass, contrib) in enumerate(zip(masses, contributions)):
        lines.append(f"{b}\t{mass:.0f}\t{contrib:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_category_series(path: str | Path, table: Mapping[str, float]) -> None:
    lines = ["category\tprecision"]
    for cat, value in table.items():
        lines.append(f"{cat}\t{value:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary(
    path: str | Path,
    metrics: Sequence[tuple[str, float]],
    contributions: np.ndarray | None,
    categories: Mapping[str, float] | None,
) -> None:
    parts = ["evaluation summary", "==================", ""]
    for name, value in metrics:
        parts.append(f"{name:>12}: {value:.4f}")
    if contributions is not None:
        parts.append("")
        parts.append("recall contribution by label-frequency bin (rare -> popular):")
        parts.append("  " + "  ".join(f"{c:.4f}" for c in contributions))
    if categories:
        parts.append("")
        parts.append("per-category precision:")
        for cat, value in categories.items():
            parts.append(f"  {cat:>20}: {value:.4f}")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def render_bin_figure(path: str | Path, contributions: np.ndarray, k: int) -> None:
    """Bar chart of per-bin contributions to R@k, rarest bin first."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(contributions))
    ax.bar(x, contributions, color="#4878cf")
    ax.set_xticks(x)
    ax.set_xticklabels([f"bin {b}" for b in x])
    ax.set_xlabel("label-frequency bin (rare → popular)")
    ax.set_ylabel(f"contribution to R@{k}")
    ax.set_title(f"Recall@{k} decomposition over label-frequency bins")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_category_figure(path: str | Path, table: Mapping[str, float], k: int) -> None:
    """Horizontal bars of per-category P@k, best category on top."""
    if not table:
        return
    items = sorted(table.items(), key=lambda kv: kv[1])
    names = [kv[0] for kv in items]
    values = [kv[1] for kv in items]
    fig, ax = plt.subplots(figsize=(6, max(2.5, 0.35 * len(items) + 1.5)))
    ax.barh(np.arange(len(items)), values, color="#6acc64")
    ax.set_yticks(np.arange(len(items)))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel(f"P@{k}")
    ax.set_title(f"Per-category precision@{k}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
