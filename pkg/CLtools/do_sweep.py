#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     do_sweep.py                                                       #
#                                                                             #
# PURPOSE:  Run a list of method variants with shared data and base LM and    #
#           write a side-by-side comparison table.                            #
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
from typing import NamedTuple, Tuple

from tqdm.contrib.concurrent import process_map

from CLtools.common import (
    add_common_arguments,
    load_run_config,
    parse_args,
    run_guarded,
    set_threads,
    sweep_dir,
)
from CLtools.do_gen_data import ensure_datasets
from CLtools.do_pretrain import ensure_pretrained
from CLtools.do_run import run_experiment
from CLutils.util_config import MethodSpec, config_from_dict, config_to_dict
from CLutils.util_eval import (
    ComparisonRow,
    EvalResult,
    comparison_row,
    comparison_table,
    load_report,
)
from CLutils.util_misc import ConfigError, read_json, write_json

BASELINE_LABEL = "Language Only LLM"


class SweepVariant(NamedTuple):
    label: str
    method: MethodSpec


class SweepSpec(NamedTuple):
    """Method variants compared under shared seeds"""

    name: str
    variants: Tuple[SweepVariant, ...]


def _merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_sweep_spec(path, base_method=MethodSpec()):
    """Read a sweep spec.

    The file holds {"name": ..., "variants": [{"label": ..., "method":
    {...}}, ...]}; each method dictionary overrides base_method.
    """
    raw = read_json(path)
    variants = raw.get("variants") or []
    if not variants:
        raise ConfigError(f"sweep spec {path} lists no variants")
    base = config_to_dict(base_method)
    parsed = []
    for i, entry in enumerate(variants):
        if "method" not in entry:
            raise ConfigError(f"sweep variant {i} has no 'method' section")
        method = config_from_dict(MethodSpec, _merge(base, entry["method"]), f"variants[{i}].method")
        parsed.append(SweepVariant(entry.get("label", method.variant), method))
    return SweepSpec(raw.get("name", Path(path).stem), tuple(parsed))


def _run_variant(job):
    cfg, steps_cap, force = job
    out, _ = run_experiment(cfg, steps_cap, force=force)
    return str(out)


def baseline_row(baselines):
    vl = [EvalResult(**r) for r in baselines["vl"]]
    return ComparisonRow(
        label=BASELINE_LABEL,
        vl_accuracy={r.dataset: r.accuracy for r in vl},
        nl_omega=baselines["nl_omega"],
        nl_delta=0.0,
    )


def run_sweep(cfg, spec, steps_cap=None, workers=1, force=False, verbose=False, log=print):
    """Run every variant of a sweep and write the comparison table.

    Variants share the data, init, train and eval seeds, so only the method
    differs. Datasets and the base LM are built once before the variants
    start; with workers > 1 the variants run in separate processes.

    Returns:
        (csv path, markdown path)
    """
    if not spec.variants:
        raise ConfigError("sweep spec lists no variants")
    set_threads(cfg)
    bundle = ensure_datasets(cfg, verbose=verbose, log=log)
    _, baselines = ensure_pretrained(cfg, bundle, steps_cap, verbose, log)
    configs = [cfg.with_options(method=v.method).validate() for v in spec.variants]
    jobs = [(c, steps_cap, force) for c in configs]
    if workers > 1:
        dirs = process_map(
            _run_variant, jobs, max_workers=workers, desc="Sweep", disable=not verbose
        )
    else:
        dirs = []
        for v, job in zip(spec.variants, jobs):
            if verbose:
                log(f"> Variant: {v.label}")
            dirs.append(_run_variant(job))
    rows = [baseline_row(baselines)]
    index = []
    for v, d in zip(spec.variants, dirs):
        matrix, _ = load_report(d)
        rows.append(comparison_row(v.label, matrix))
        index.append({"label": v.label, "run_dir": d, "method": config_to_dict(v.method)})
    out = sweep_dir(cfg, spec.name)
    paths = comparison_table(rows, out)
    write_json(out / "sweep_index.json", {"name": spec.name, "variants": index})
    if verbose:
        log(f"> Sweep table written to {paths[1]}")
    return paths


# -----------------------------------------------------------------------------#
def _cmd(args):
    cfg = load_run_config(args)
    spec = load_sweep_spec(args.spec, cfg.method)
    run_sweep(cfg, spec, args.steps_cap, args.workers, args.force, args.verbose)


def add_arguments(parser):
    add_common_arguments(parser)
    parser.add_argument(
        "--spec",
        dest="spec",
        required=True,
        help="JSON sweep spec listing the method variants.",
    )
    parser.add_argument(
        "--workers",
        dest="workers",
        type=int,
        default=1,
        help="Variants run in parallel processes [1].",
    )
    return parser


def main(argv=None):
    import argparse

    """
    Start the function to run a sweep if called from the command line.
    """

    # Help string to be shown using the -h option
    descStr = """
    Run each method variant of a sweep spec on the same datasets, base LM and
    seeds, then tabulate the final accuracy on every VL test set, the VL
    average (harmonic mean), the NL average and the NL delta, with the base
    LM as the first row.
    """

    epilog_text = """
    Writes to <out>/sweeps/<name>:
    sweep_table.csv, sweep_table.md: the comparison table (percent)
    sweep_index.json: label, method and run directory of each variant
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
