#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     do_pretrain.py                                                    #
#                                                                             #
# PURPOSE:  Train the text-only base LM (task 1) and record its baseline      #
#           accuracies on the NL suite and the VL test sets.                  #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import sys
from pathlib import Path

from CLtools.common import (
    add_common_arguments,
    load_run_config,
    parse_args,
    pretrain_dir,
    run_guarded,
    set_threads,
)
from CLtools.do_gen_data import ensure_datasets
from CLutils.util_config import data_hash, pretrain_hash
from CLutils.util_continual import evaluate_sets, pretrain_base_lm
from CLutils.util_data import TASK_IDS
from CLutils.util_eval import task_score
from CLutils.util_misc import ConfigError, prepare_dir, read_json, write_json
from CLutils.util_model import load_checkpoint, save_checkpoint

CHECKPOINT_NAME = "base_lm.pt"
BASELINES_NAME = "baselines.json"
BASELINE_VL_TASKS = ("vqa", "ocr", "refgrounding")


def run_pretrain(
    cfg, bundle=None, steps_cap=None, out_dir=None, force=False, verbose=False, log=print
):
    """Pretrain the base LM and write base_lm.pt and baselines.json.

    The VL accuracies of the base LM are recorded for the sweep table; they
    are not part of the forgetting matrix.

    Returns:
        (Checkpoint, baselines dict)
    """
    set_threads(cfg)
    if bundle is None:
        bundle = ensure_datasets(cfg, verbose=verbose, log=log)
    if bundle.data_hash != data_hash(cfg):
        raise ConfigError("datasets were generated from a different configuration")
    out_dir = prepare_dir(out_dir or pretrain_dir(cfg, steps_cap), force)
    checkpoint, nl_results = pretrain_base_lm(
        cfg, bundle.pretrain, bundle.nl_suite, steps_cap, verbose, log
    )
    by_kind = {d.kind: d for d in bundle.vl_tasks}
    vl_results = evaluate_sets(
        checkpoint, [(TASK_IDS[k], by_kind[k]) for k in BASELINE_VL_TASKS]
    )
    baselines = {
        "pretrain_hash": checkpoint.config_hash,
        "data_hash": bundle.data_hash,
        "steps": checkpoint.metadata["steps"],
        "nl": [r._asdict() for r in nl_results],
        "vl": [r._asdict() for r in vl_results],
        "nl_omega": task_score([r.accuracy for r in nl_results]),
    }
    save_checkpoint(checkpoint, out_dir / CHECKPOINT_NAME)
    write_json(out_dir / BASELINES_NAME, baselines)
    if verbose:
        for r in nl_results + vl_results:
            log(f"> {r.dataset:>14s}: {r.accuracy:.4f} ({r.n_correct}/{r.n})")
        log(f"> Wrote {out_dir / CHECKPOINT_NAME}")
    return checkpoint, baselines


def ensure_pretrained(cfg, bundle, steps_cap=None, verbose=False, log=print):
    """Load the base LM of a config, pretraining it if absent."""
    path = pretrain_dir(cfg, steps_cap)
    if (path / CHECKPOINT_NAME).exists():
        checkpoint = load_checkpoint(path / CHECKPOINT_NAME)
        if checkpoint.config_hash != pretrain_hash(cfg, steps_cap):
            raise ConfigError(
                f"base LM in {path} was trained from a different configuration"
            )
        return checkpoint, read_json(path / BASELINES_NAME)
    if verbose:
        log(f"> No base LM in {path}; pretraining it.")
    return run_pretrain(cfg, bundle, steps_cap, path, verbose=verbose, log=log)


# -----------------------------------------------------------------------------#
def _cmd(args):
    cfg = load_run_config(args)
    bundle = ensure_datasets(cfg, args.data_dir, args.verbose)
    out = Path(args.pretrain_dir) if args.pretrain_dir else None
    run_pretrain(cfg, bundle, args.steps_cap, out, args.force, args.verbose)


def add_arguments(parser):
    add_common_arguments(parser)
    parser.add_argument(
        "--data-dir",
        dest="data_dir",
        default=None,
        help="Dataset directory [<out>/data/<data hash>].",
    )
    parser.add_argument(
        "--pretrain-dir",
        dest="pretrain_dir",
        default=None,
        help="Output directory of the base LM [<out>/pretrain/<pretrain hash>].",
    )
    return parser


def main(argv=None):
    import argparse

    """
    Start the function to pretrain the base LM if called from the command line.
    """

    # Help string to be shown using the -h option
    descStr = """
    Pretrain the text-only base LM (task 1) on the grammar corpus until it
    clears its accuracy floor on the NL evaluation suite or reaches the step
    cap. Datasets are generated first if the dataset directory is empty; a
    dataset directory built from a different configuration is refused.
    """

    epilog_text = """
    Writes to the pretrain directory:
    base_lm.pt: task-1 checkpoint with the NL baselines in its metadata
    baselines.json: NL and VL accuracies of the base LM
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
