#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     do_run.py                                                         #
#                                                                             #
# PURPOSE:  Run a two-task or continual experiment under one mitigation       #
#           method and write its forgetting report.                           #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import sys
import time
from pathlib import Path

from CLtools.common import (
    add_common_arguments,
    load_run_config,
    parse_args,
    run_dir,
    run_guarded,
    run_id,
    set_threads,
)
from CLtools.do_gen_data import ensure_datasets
from CLtools.do_pretrain import ensure_pretrained
from CLutils import __version__
from CLutils.util_config import config_hash, config_to_dict, save_config
from CLutils.util_continual import run_sequence
from CLutils.util_eval import serialize_report
from CLutils.util_misc import prepare_dir


def run_manifest(cfg, base, data_hash, steps_cap):
    return {
        "run_id": run_id(cfg),
        "config_hash": config_hash(cfg),
        "data_hash": data_hash,
        "pretrain_hash": base.config_hash,
        "steps_cap": steps_cap,
        "mode": cfg.mode,
        "method": config_to_dict(cfg.method),
        "seeds": config_to_dict(cfg.seeds),
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def run_experiment(
    cfg, steps_cap=None, out_dir=None, force=False, data_dir=None, verbose=False, log=print
):
    """Run one experiment end to end.

    Missing datasets and base LM are built first. An interrupted run in the
    same directory resumes from its last completed task unless force is set.

    Returns:
        (run directory, ForgettingMatrix)
    """
    set_threads(cfg)
    bundle = ensure_datasets(cfg, data_dir, verbose, log)
    base, _ = ensure_pretrained(cfg, bundle, steps_cap, verbose, log)
    out_dir = Path(out_dir or run_dir(cfg))
    if force:
        prepare_dir(out_dir, force=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")
    matrix, _ = run_sequence(base, bundle, cfg, out_dir, verbose, log)
    serialize_report(
        matrix, run_manifest(cfg, base, bundle.data_hash, steps_cap), out_dir, run_id(cfg)
    )
    if verbose:
        last = matrix.rows[-1]
        log(f"> {run_id(cfg)}: NL delta after task {last.after_task} = {last.delta[1]:.4f}")
        log(f"> Report written to {out_dir / 'report.csv'}")
    return out_dir, matrix


# -----------------------------------------------------------------------------#
def _cmd(args):
    cfg = load_run_config(args)
    if args.mode:
        cfg = cfg.with_options(mode=args.mode).validate()
    if args.method:
        cfg = cfg.with_options(method=cfg.method.with_options(variant=args.method)).validate()
    run_experiment(cfg, args.steps_cap, args.run_dir, args.force, args.data_dir, args.verbose)


def add_arguments(parser):
    add_common_arguments(parser)
    parser.add_argument(
        "--mode",
        dest="mode",
        choices=("two_task", "continual"),
        default=None,
        help="Task sequence [mode of the config].",
    )
    parser.add_argument(
        "--method",
        dest="method",
        default=None,
        help="Mitigation method variant [method.variant of the config].",
    )
    parser.add_argument(
        "--data-dir",
        dest="data_dir",
        default=None,
        help="Dataset directory [<out>/data/<data hash>].",
    )
    parser.add_argument(
        "--run-dir",
        dest="run_dir",
        default=None,
        help="Run directory [<out>/runs/<run id>].",
    )
    return parser


def main(argv=None):
    import argparse

    """
    Start the function to run an experiment if called from the command line.
    """

    # Help string to be shown using the -h option
    descStr = """
    Run the two-task experiment (alignment stage, then one pass over the
    mixture of all vision-language tasks) or the continual experiment
    (alignment stage, then caption_instruct, vqa, ocr and refgrounding in
    order) under one forgetting-mitigation method: naive, soft_targets, lora,
    rehearsal, msgm or msgm_rehearsal.
    """

    epilog_text = """
    Writes to the run directory:
    config.json: the configuration of the run
    metrics.csv: per-step loss and learning rate
    checkpoints/task_<k>.pt: checkpoint after each task (used for resuming)
    matrix_rows.jsonl: evaluation rows as they complete
    report.csv: accuracy, omega and delta per (k, t, dataset)
    summary.json: per-row task scores, NL delta and NLU/NLG split
    run_manifest.json: hashes, seeds and creation time
    """

    parser = argparse.ArgumentParser(
        description=descStr,
        epilog=epilog_text,
        formatter_class=argparse.RawTextHelpFormatter,
    )
    add_arguments(parser)
    args = parse_args(parser, argv)
    sys.exit(run_guarded(_cmd, args, debug=args.verbose))


# -----------------------------------------------------------------------------#
if __name__ == "__main__":
    main()
