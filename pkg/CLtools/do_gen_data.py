#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     do_gen_data.py                                                    #
#                                                                             #
# PURPOSE:  Generate every dataset of an experiment (pretraining corpus, NL   #
#           evaluation suite and the four vision-language tasks) and write    #
#           them with a hashed manifest.                                      #
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
    data_dir,
    load_run_config,
    parse_args,
    run_guarded,
)
from CLutils.util_config import config_to_dict, data_hash
from CLutils.util_data import generate_datasets, load_datasets, save_datasets
from CLutils.util_misc import prepare_dir


def generator_config(cfg):
    """Generator settings recorded in the dataset manifest."""
    return {
        "n_patches": cfg.model.n_patches,
        "patch_dim": cfg.model.patch_dim,
        "vocab_size": cfg.model.vocab_size,
        "data": config_to_dict(cfg.data),
        "seeds": {"data": cfg.seeds.data, "eval": cfg.seeds.eval},
    }


def run_gen_data(cfg, out_dir=None, force=False, verbose=False, log=print):
    """Generate and write the datasets of a RunConfig.

    Args:
        cfg (RunConfig): configuration of the experiment.

    Kwargs:
        out_dir (str): dataset directory [<out_dir>/data/<data hash>].
        force (bool): overwrite an existing dataset directory.

    Returns:
        (DataBundle, manifest dict)
    """
    out_dir = prepare_dir(out_dir or data_dir(cfg), force)
    bundle = generate_datasets(cfg, verbose=verbose, log=log)
    manifest = save_datasets(bundle, out_dir, generator_config(cfg), verbose, log)
    if verbose:
        log(f"> Dataset manifest hash: {manifest['manifest_hash']}")
    return bundle, manifest


def ensure_datasets(cfg, path=None, verbose=False, log=print):
    """Load the datasets of a config, generating them if absent.

    An existing directory built from a different configuration is rejected.
    """
    path = Path(path or data_dir(cfg))
    if (path / "manifest.json").exists():
        return load_datasets(path, expected_hash=data_hash(cfg))
    if verbose:
        log(f"> No datasets in {path}; generating them.")
    bundle, _ = run_gen_data(cfg, path, verbose=verbose, log=log)
    return bundle


# -----------------------------------------------------------------------------#
def _cmd(args):
    cfg = load_run_config(args)
    run_gen_data(cfg, args.data_dir, args.force, args.verbose)


def add_arguments(parser):
    add_common_arguments(parser, steps_cap=False)
    parser.add_argument(
        "--data-dir",
        dest="data_dir",
        default=None,
        help="Dataset directory [<out>/data/<data hash>].",
    )
    return parser


def main(argv=None):
    import argparse

    """
    Start the function to generate the datasets if called from the command line.
    """

    # Help string to be shown using the -h option
    descStr = """
    Generate the datasets of an experiment: the text-only pretraining corpus,
    the natural-language evaluation suite (cloze, agreement, adjective,
    coreference, plausibility) and the four vision-language tasks
    (caption_instruct with its alignment subset, vqa, ocr, refgrounding).
    """

    epilog_text = """
    Writes to the dataset directory:
    vocab.json: token ids, surface forms and categories
    <name>.<split>.jsonl: one record per sample
    manifest.json: file hashes, data hash and generator settings
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
