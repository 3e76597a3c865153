#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     do_plot.py                                                        #
#                                                                             #
# PURPOSE:  Render the figures of one or more finished runs.                  #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import sys

from CLtools.common import parse_args, run_guarded
from CLutils.util_plot import plot_runs


def run_plot(run_dirs, out_dir="plots", labels=None, verbose=False, log=print):
    """Write nl_delta_per_task.svg, vl_accuracy_per_task.svg,
    method_comparison.svg and plot_data.csv to out_dir."""
    if labels and len(labels) != len(run_dirs):
        raise ValueError(f"{len(labels)} labels given for {len(run_dirs)} runs")
    return plot_runs(run_dirs, out_dir, labels, verbose, log)


# -----------------------------------------------------------------------------#
def _cmd(args):
    run_plot(args.run_dirs, args.out, args.labels, args.verbose)


def add_arguments(parser):
    parser.add_argument(
        "run_dirs",
        metavar="RUN_DIR",
        nargs="+",
        help="Run directories containing report.csv.",
    )
    parser.add_argument(
        "--out", dest="out", default="plots", help="Output directory [plots]."
    )
    parser.add_argument(
        "--labels",
        dest="labels",
        nargs="+",
        default=None,
        help="Legend label of each run [run id].",
    )
    parser.add_argument(
        "-v", dest="verbose", action="store_true", help="Print verbose messages"
    )
    return parser


def main(argv=None):
    import argparse

    """
    Start the function to plot runs if called from the command line.
    """

    # Help string to be shown using the -h option
    descStr = """
    Plot the NL delta after each task, the cumulative VL accuracy after each
    task and a comparison of the final rows for one or more run directories.
    """

    parser = argparse.ArgumentParser(
        description=descStr, formatter_class=argparse.RawTextHelpFormatter
    )
    add_arguments(parser)
    args = parse_args(parser, argv)
    sys.exit(run_guarded(_cmd, args, debug=args.verbose))


# -----------------------------------------------------------------------------#
if __name__ == "__main__":
    main()
