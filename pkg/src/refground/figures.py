"""Matplotlib renderings of a benchmark report, written alongside the tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .evaluation import AGGREGATIONS, PROPOSAL_MODES, BenchmarkReport

_CELL_LABEL = {"noisy_or": "Noisy-Or", "max": "Max",
               "ground_truth": "GT", "degraded": "Degraded"}


def render_report_figures(report: BenchmarkReport, out_dir: str | Path) -> list[Path]:
    """Write prec_at_1.png and kinds.png; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    partitions = sorted({key[0] for key in report.cells})
    paths = []

    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = np.arange(len(partitions))
    combos = [(m, a) for m in PROPOSAL_MODES for a in AGGREGATIONS]
    width = 0.8 / len(combos)
    for i, (mode, aggregation) in enumerate(combos):
        values = [100 * report.cells[(p, mode, aggregation)].prec_at_1
                  if (p, mode, aggregation) in report.cells else 0.0
                  for p in partitions]
        ax.bar(x + (i - (len(combos) - 1) / 2) * width, values, width,
               label=f"{_CELL_LABEL[mode]} / {_CELL_LABEL[aggregation]}")
    ax.set_xticks(x, partitions)
    ax.set_ylabel("Prec@1 (%)")
    ax.set_ylim(0, 100)
    ax.set_title("Comprehension Prec@1 by partition")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "prec_at_1.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    kinds = ("semantic_only", "spatio_semantic")
    width = 0.8 / (2 * len(kinds))
    for i, mode in enumerate(PROPOSAL_MODES):
        for j, kind in enumerate(kinds):
            values = [100 * report.cells[(p, mode, "noisy_or")].kind_prec(kind)
                      if (p, mode, "noisy_or") in report.cells else 0.0
                      for p in partitions]
            slot = i * len(kinds) + j
            ax.bar(x + (slot - (2 * len(kinds) - 1) / 2) * width, values, width,
                   label=f"{_CELL_LABEL[mode]} / {kind}")
    ax.set_xticks(x, partitions)
    ax.set_ylabel("Prec@1 (%)")
    ax.set_ylim(0, 100)
    ax.set_title("Noisy-Or Prec@1 by expression kind")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "kinds.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths
