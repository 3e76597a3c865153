#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_plot.py                                                      #
#                                                                             #
# PURPOSE:  Static figures of one or more runs: NL forgetting after each      #
#           task, cumulative VL accuracy after each task and a comparison     #
#           of the final rows.                                                #
#                                                                             #
# REQUIRED: Requires matplotlib and numpy.                                    #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  tweakAxFormat        ... tick and legend formatting                        #
#  RunCurves            ... per-row series of one run                         #
#  run_curves           ... series from a report directory                    #
#  plot_nl_delta_ax     ... NL delta vs task                                  #
#  plot_vl_accuracy_ax  ... cumulative VL accuracy vs task                    #
#  plot_comparison_ax   ... final VL accuracy and NL delta per run            #
#  write_plot_data      ... the report rows behind the figures                #
#  plot_runs            ... all three figures as SVG + plot_data.csv          #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import csv
from pathlib import Path
from typing import NamedTuple, Tuple

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from CLutils.util_eval import NL_TASK, load_report, task_score  # noqa: E402

# Alter the default linewidths etc.
mpl.rcParams["lines.linewidth"] = 1.0
mpl.rcParams["axes.linewidth"] = 0.8
mpl.rcParams["font.family"] = "sans-serif"
mpl.rcParams["font.size"] = 12.0
mpl.rcParams["svg.hashsalt"] = "cltools"

PLOT_COLUMNS = ("run_id", "after_task_k", "eval_task_t", "dataset", "accuracy", "omega", "delta")
FIGURES = ("nl_delta_per_task.svg", "vl_accuracy_per_task.svg", "method_comparison.svg")


# -----------------------------------------------------------------------------#
def tweakAxFormat(ax, pad=10, loc="upper left", linewidth=1, showLeg=True):
    ax.tick_params(pad=pad)
    for line in ax.get_xticklines() + ax.get_yticklines():
        line.set_markeredgewidth(linewidth)
    if showLeg:
        leg = ax.legend(numpoints=1, loc=loc, shadow=False, borderaxespad=0.3)
        for t in leg.get_texts():
            t.set_fontsize("small")
        leg.get_frame().set_linewidth(0.5)
        leg.get_frame().set_alpha(0.5)
    return ax


class RunCurves(NamedTuple):
    """Series of one run, one entry per matrix row"""

    label: str
    tasks: Tuple[int, ...]
    nl_delta: Tuple[float, ...]
    vl_cumulative: Tuple[float, ...]
    """NaN where no VL test set has been seen yet"""
    final_vl: float
    final_nl_delta: float


def run_curves(run_dir, label=None):
    """Read a run's report.csv into plottable series."""
    run_dir = Path(run_dir)
    matrix, run_id = load_report(run_dir)
    vl = []
    for row in matrix.rows:
        accs = [r.accuracy for r in row.vl_results()]
        vl.append(task_score(accs) if accs else np.nan)
    return RunCurves(
        label=label or run_id or run_dir.name,
        tasks=tuple(row.after_task for row in matrix.rows),
        nl_delta=tuple(100 * row.delta[NL_TASK] for row in matrix.rows),
        vl_cumulative=tuple(100 * v for v in vl),
        final_vl=100 * vl[-1] if not np.isnan(vl[-1]) else 0.0,
        final_nl_delta=100 * matrix.rows[-1].delta[NL_TASK],
    )


# -----------------------------------------------------------------------------#
def plot_nl_delta_ax(ax, curves):
    for c in curves:
        ax.plot(c.tasks, c.nl_delta, marker="o", ms=4, label=c.label)
    ax.axhline(0, color="grey", lw=0.5)
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("After task k")
    ax.set_ylabel(r"NL $\Delta$ (%)")
    tweakAxFormat(ax)


def plot_vl_accuracy_ax(ax, curves):
    for c in curves:
        ax.plot(c.tasks, c.vl_cumulative, marker="s", ms=4, label=c.label)
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylim(0, 100)
    ax.set_xlabel("After task k")
    ax.set_ylabel("Cumulative VL accuracy (%)")
    tweakAxFormat(ax, loc="lower right")


def plot_comparison_ax(ax, curves):
    x = np.arange(len(curves))
    width = 0.38
    ax.bar(x - width / 2, [c.final_vl for c in curves], width, label="VL accuracy")
    ax.bar(x + width / 2, [c.final_nl_delta for c in curves], width, label=r"NL $\Delta$")
    ax.axhline(0, color="grey", lw=0.5)
    ax.set_xticks(x)
    ax.set_xticklabels([c.label for c in curves], rotation=30, ha="right")
    ax.set_ylabel("%")
    tweakAxFormat(ax, loc="upper right")


# -----------------------------------------------------------------------------#
def write_plot_data(run_dirs, path):
    """Copy the plotted columns of every run's report.csv into one file."""
    with open(path, "w", newline="") as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(PLOT_COLUMNS)
        for run_dir in run_dirs:
            with open(Path(run_dir) / "report.csv", newline="") as f:
                for rec in csv.DictReader(f):
                    writer.writerow([rec[c] for c in PLOT_COLUMNS])
    return path


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_runs(run_dirs, out_dir, labels=None, verbose=False, log=print):
    """Write the three figures and plot_data.csv for a list of runs.

    Returns:
        list of written paths
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("plot needs at least one run directory")
    for d in run_dirs:
        if not (d / "report.csv").exists():
            raise FileNotFoundError(f"Report not found: {d / 'report.csv'}")
    labels = labels or [None] * len(run_dirs)
    curves = [run_curves(d, lab) for d, lab in zip(run_dirs, labels)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, plotter in zip(
        FIGURES, (plot_nl_delta_ax, plot_vl_accuracy_ax, plot_comparison_ax)
    ):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        plotter(ax, curves)
        written.append(_save(fig, out_dir / name))
    written.append(write_plot_data(run_dirs, out_dir / "plot_data.csv"))
    if verbose:
        for p in written:
            log(f"> Wrote {p}")
    return written
