#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     cli.py                                                            #
#                                                                             #
# PURPOSE:  Single entry point dispatching the gen-data, pretrain, run,       #
#           sweep and plot subcommands.                                       #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import argparse
import sys

from CLtools import do_gen_data, do_plot, do_pretrain, do_run, do_sweep
from CLtools.common import parse_args, run_guarded

SUBCOMMANDS = {
    "gen-data": (do_gen_data, "Generate the datasets and their manifest."),
    "pretrain": (do_pretrain, "Pretrain the text-only base LM (task 1)."),
    "run": (do_run, "Run a two-task or continual experiment."),
    "sweep": (do_sweep, "Run method variants and tabulate them."),
    "plot": (do_plot, "Plot the reports of finished runs."),
}


def build_parser():
    descStr = """
    Continual-learning experiments on a toy multimodal LM: measure how much
    natural-language ability a text-only base LM loses while it learns
    vision-language tasks, under several forgetting-mitigation methods.

    Exit codes: 0 success, 1 configuration error, 2 numerical failure,
    3 I/O error.
    """
    parser = argparse.ArgumentParser(
        prog="cltools",
        description=descStr,
        formatter_class=argparse.RawTextHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (module, helpStr) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=helpStr, description=helpStr)
        module.add_arguments(p)
        p.set_defaults(handler=module._cmd)
    return parser


def main(argv=None):
    args = parse_args(build_parser(), argv)
    sys.exit(run_guarded(args.handler, args, debug=args.verbose))


# -----------------------------------------------------------------------------#
if __name__ == "__main__":
    main()
