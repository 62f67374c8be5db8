"""Static figures for a report table."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import DISPLAY  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def accuracy_bars(table, path):
    """Grouped bars: one group per method, one bar per scorer, seed std as error bars."""
    ms, cols = table.methods(), table.columns()
    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(ms)), 4))
    width = 0.8 / max(len(cols), 1)
    x = np.arange(len(ms))
    for j, c in enumerate(cols):
        mean = [np.nan if table.get(m, c) is None or not table.get(m, c).ok
                else 100 * table.get(m, c).mean for m in ms]
        std = [0.0 if table.get(m, c) is None or not table.get(m, c).ok
               else 100 * table.get(m, c).std for m in ms]
        ax.bar(x + (j - (len(cols) - 1) / 2) * width, mean, width, yerr=std, capsize=2,
               label=DISPLAY.get(c, c))
    ax.set_xticks(x, [DISPLAY.get(m, m) for m in ms])
    ax.set_ylabel("target accuracy (%)")
    ax.set_title(f"{table.task}: selected-checkpoint accuracy, {len(table.seeds)} seeds")
    ax.legend(ncol=4, fontsize=7)
    _save(fig, path)


def oracle_gap(table, path):
    """Worst and best no-target-label scorer per method, as a drop below ORACLE."""
    gaps = {m: g for m, g in table.gap_summary().items() if g["oracle"] is not None}
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(gaps)), 3.5))
    x = np.arange(len(gaps))
    ax.bar(x - 0.2, [100 * g["worst_gap"] for g in gaps.values()], 0.4, label="worst")
    ax.bar(x + 0.2, [100 * g["best_gap"] for g in gaps.values()], 0.4, label="best")
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(x, [DISPLAY.get(m, m) for m in gaps])
    ax.set_ylabel("accuracy minus ORACLE (points)")
    ax.legend(fontsize=8)
    _save(fig, path)


def render_figures(table, out_dir, stem="report"):
    out = Path(out_dir)
    paths = {"fig_accuracy": out / f"{stem}_accuracy.png"}
    accuracy_bars(table, paths["fig_accuracy"])
    if "ORACLE" in table.columns() and table.gap_summary():
        paths["fig_gap"] = out / f"{stem}_oracle_gap.png"
        oracle_gap(table, paths["fig_gap"])
    return paths
