#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     common.py                                                         #
#                                                                             #
# PURPOSE:  Pieces shared by the command-line tools: common flags, config     #
#           loading, the artifact layout under the output directory and the   #
#           mapping of errors to exit codes.                                  #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import sys
import traceback
from pathlib import Path

import torch

from CLutils.util_config import (
    RunConfig,
    apply_seed_overrides,
    config_hash,
    data_hash,
    load_config,
    pretrain_hash,
)
from CLutils.util_misc import ConfigError, NumericalError, slugify

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def add_common_arguments(parser, steps_cap=True):
    parser.add_argument(
        "--config",
        dest="config",
        default=None,
        help="JSON run configuration [built-in defaults].",
    )
    parser.add_argument(
        "--out",
        dest="out",
        default=None,
        help="Output root directory [out_dir of the config].",
    )
    parser.add_argument(
        "--seed-override",
        dest="seed_override",
        action="append",
        default=[],
        metavar="K=V",
        help="Override seeds.K (K in data, init, train, eval); repeatable.",
    )
    parser.add_argument(
        "--force",
        dest="force",
        action="store_true",
        help="Overwrite existing outputs [False].",
    )
    if steps_cap:
        parser.add_argument(
            "--steps-cap",
            dest="steps_cap",
            type=int,
            default=None,
            help="Cap on the base-LM pretraining steps [pretrain.max_steps].",
        )
    parser.add_argument(
        "-v", dest="verbose", action="store_true", help="Print verbose messages"
    )
    return parser


def parse_args(parser, argv=None):
    """parser.parse_args with usage errors exiting with code 1, not 2."""
    try:
        return parser.parse_args(argv)
    except SystemExit as err:
        if err.code == 2:
            raise SystemExit(EXIT_CONFIG) from None
        raise


def load_run_config(args):
    """RunConfig from --config, --seed-override and --out."""
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_seed_overrides(cfg, args.seed_override)
    if args.out:
        cfg = cfg.with_options(out_dir=str(args.out))
    return cfg.validate()


def set_threads(cfg):
    torch.set_num_threads(cfg.threads)


# -----------------------------------------------------------------------------#
def data_dir(cfg):
    return Path(cfg.out_dir) / "data" / data_hash(cfg)[:12]


def pretrain_dir(cfg, steps_cap=None):
    return Path(cfg.out_dir) / "pretrain" / pretrain_hash(cfg, steps_cap)[:12]


def run_id(cfg):
    return f"{cfg.mode}_{slugify(cfg.method.variant)}_{config_hash(cfg)[:8]}"


def run_dir(cfg):
    return Path(cfg.out_dir) / "runs" / run_id(cfg)


def sweep_dir(cfg, name):
    return Path(cfg.out_dir) / "sweeps" / slugify(name)


# -----------------------------------------------------------------------------#
def run_guarded(func, *args, debug=False):
    """Call func and translate failures into exit codes.

    ConfigError and other ValueErrors -> 1, NumericalError -> 2,
    OSError -> 3.
    """
    try:
        func(*args)
    except NumericalError as err:
        return _fail(err, EXIT_NUMERIC, debug)
    except (ConfigError, ValueError) as err:
        return _fail(err, EXIT_CONFIG, debug)
    except OSError as err:
        return _fail(err, EXIT_IO, debug)
    return EXIT_OK


def _fail(err, code, debug):
    if debug:
        traceback.print_exc()
    print(f"Err: {err}", file=sys.stderr)
    return code
