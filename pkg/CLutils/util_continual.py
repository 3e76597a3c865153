#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_continual.py                                                 #
#                                                                             #
# PURPOSE:  Orchestrate the base-LM pretraining, the two-task experiment and  #
#           the five-task continual experiment with checkpoint handoff.       #
#                                                                             #
# REQUIRED: Requires numpy, torch and tqdm.                                   #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  TaskSpec             ... one task of a sequence and its evaluation sets    #
#  TaskSequence         ... tasks 1..T of a run                               #
#  build_task_sequence  ... two_task (merged VL mixture) or continual (T=5)   #
#  RunState             ... checkpoint, rehearsal buffer and matrix           #
#  nl_floor             ... accuracy each NL dataset must reach               #
#  pretrain_base_lm     ... text-only LM of task 1 with NL baselines          #
#  evaluate_sets        ... accuracies of (task id, dataset) pairs            #
#  evaluate_all_seen    ... NL suite + every seen VL test set -> matrix row   #
#  run_two_task         ... alignment + one pass over the VL mixture          #
#  run_continual        ... alignment + tasks 2..5 in order                   #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import json
import math
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

from tqdm.auto import trange

from CLutils.util_config import config_hash, pretrain_hash
from CLutils.util_data import GENERATIVE, TASK_IDS, VL_TASK_ORDER, TaskDataset
from CLutils.util_eval import EvalResult, ForgettingMatrix, NL_TASK, evaluate_dataset
from CLutils.util_misc import ConfigError, PretrainFloorError, seeded_rng
from CLutils.util_mitigation import RehearsalBuffer, rehearsal_mix
from CLutils.util_model import (
    PRETRAIN_MASK,
    draw_seed,
    init_parameters,
    initial_rng_state,
    load_checkpoint,
    load_model,
    loss_and_gradients,
    make_checkpoint,
    one_hot_targets,
    save_checkpoint,
    set_trainable,
)
from CLutils.util_train import (
    MetricsLog,
    lr_at,
    make_optimizer,
    optimizer_step,
    train_alignment_stage,
    train_task,
)

MIXTURE_KIND = "vl_mixture"


class TaskSpec(NamedTuple):
    """One task of a sequence"""

    task_id: int
    name: str
    dataset: Optional[TaskDataset]
    """Training data, None for the pretrained task 1"""
    eval_sets: Tuple[TaskDataset, ...] = ()
    """Test sets scored as this task"""


class TaskSequence(NamedTuple):
    mode: str
    tasks: Tuple[TaskSpec, ...]

    def validate(self):
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"task ids must run 1..T in order, got {ids}")
        if len(ids) < 2 or not self.tasks[1].dataset.alignment:
            raise ValueError("task 2 must carry the alignment subset")
        return self


def build_task_sequence(mode, vl_tasks, seed):
    """Tasks of a run.

    continual: 1 = base LM, then caption_instruct, vqa, ocr, refgrounding.
    two_task:  1 = base LM, 2 = the shuffled union of all four VL train
    splits, evaluated on the vqa, ocr and refgrounding test sets.
    """
    by_kind = {d.kind: d for d in vl_tasks}
    missing = [k for k in VL_TASK_ORDER if k not in by_kind]
    if missing:
        raise ValueError(f"missing vision-language task(s): {', '.join(missing)}")
    base = TaskSpec(NL_TASK, "base_lm", None)
    if mode == "continual":
        tasks = [base] + [
            TaskSpec(
                TASK_IDS[kind],
                kind,
                by_kind[kind],
                () if kind == "caption_instruct" else (by_kind[kind],),
            )
            for kind in VL_TASK_ORDER
        ]
    elif mode == "two_task":
        union = tuple(s for kind in VL_TASK_ORDER for s in by_kind[kind].train)
        order = seeded_rng(seed, TASK_IDS[MIXTURE_KIND], 5).permutation(len(union))
        mixture = TaskDataset(
            task_id=TASK_IDS[MIXTURE_KIND],
            kind=MIXTURE_KIND,
            name=MIXTURE_KIND,
            train=tuple(union[i] for i in order),
            test=(),
            mode=GENERATIVE,
            tag="VL",
            alignment=by_kind["caption_instruct"].alignment,
        )
        evals = tuple(by_kind[k] for k in VL_TASK_ORDER if k != "caption_instruct")
        tasks = [base, TaskSpec(mixture.task_id, MIXTURE_KIND, mixture, evals)]
    else:
        raise ValueError(f"unknown mode '{mode}'")
    return TaskSequence(mode, tuple(tasks)).validate()


class RunState(NamedTuple):
    """Everything carried from one task boundary to the next"""

    checkpoint: object
    buffer: RehearsalBuffer
    matrix: ForgettingMatrix
    after_task: int = NL_TASK


# -----------------------------------------------------------------------------#
def nl_floor(dataset, cfg):
    """Accuracy floor of an NL dataset for the base LM.

    NLG: the configured floor. NLU: factor x chance, capped at halfway
    between chance and 1 so that 2-way sets stay attainable.
    """
    if dataset.tag == "NLG":
        return cfg.nlg_floor
    chance = 1.0 / len(dataset.test[0].candidates)
    return min(cfg.nlu_floor_factor * chance, (1.0 + chance) / 2.0)


def _floor_shortfall(results, nl_suite, cfg):
    floors = {d.name: nl_floor(d, cfg) for d in nl_suite}
    return [r for r in results if r.accuracy < floors[r.dataset]]


def evaluate_sets(model, pairs, verbose=False):
    """Accuracies of [(task id, dataset), ...] on one model."""
    model = load_model(model) if not hasattr(model, "config") else model
    return [evaluate_dataset(model, d, task_id, verbose) for task_id, d in pairs]


def _nl_pairs(nl_suite):
    return [(NL_TASK, d) for d in nl_suite]


def _results_to_records(results):
    return [r._asdict() for r in results]


def _records_to_results(records):
    return [EvalResult(**r) for r in records]


def pretrain_base_lm(
    cfg, corpus, nl_suite, steps_cap=None, verbose=False, log=print
):
    """Train the text-only LM of task 1.

    Batches cycle over the corpus (reshuffled every pass) for up to
    max_steps (or steps_cap) steps. The NL suite is scored every
    eval_every steps and training stops once every dataset clears its
    floor.

    Returns:
        (Checkpoint, list of EvalResult): checkpoint with the NL baselines
        recorded in its metadata, and the baseline accuracies.
    """
    if not corpus.train:
        raise ValueError("pretraining corpus is empty")
    pcfg = cfg.pretrain
    stage = pcfg.stage()
    total = pcfg.max_steps if steps_cap is None else min(pcfg.max_steps, steps_cap)
    if total < 1:
        raise ValueError(f"pretraining needs at least one step (steps cap {steps_cap})")
    model = init_parameters(cfg.model, cfg.seeds.init)
    params = set_trainable(model, PRETRAIN_MASK)
    optimizer = make_optimizer(params, stage)
    samples = corpus.train
    per_pass = math.ceil(len(samples) / stage.batch_size)
    order = []
    results = None
    step = 0
    for step in trange(total, desc="Pretraining", disable=not verbose):
        epoch, offset = divmod(step, per_pass)
        if offset == 0:
            order = seeded_rng(cfg.seeds.train, 1, 100 + epoch).permutation(len(samples))
        batch = [
            samples[i] for i in order[offset * stage.batch_size : (offset + 1) * stage.batch_size]
        ]
        value, grads = loss_and_gradients(
            model, batch, PRETRAIN_MASK, one_hot_targets, micro_batch_size=None
        )
        optimizer_step(optimizer, params, grads, lr_at(step, total, stage), stage)
        if (step + 1) % pcfg.eval_every == 0 and step + 1 < total:
            results = evaluate_sets(model, _nl_pairs(nl_suite))
            if verbose:
                accs = ", ".join(f"{r.dataset}={r.accuracy:.3f}" for r in results)
                log(f"> step {step + 1}: loss {value:.4f}; {accs}")
            if not _floor_shortfall(results, nl_suite, pcfg):
                break
            results = None
    if results is None:
        results = evaluate_sets(model, _nl_pairs(nl_suite))
    short = _floor_shortfall(results, nl_suite, pcfg)
    if short:
        names = ", ".join(f"{r.dataset} ({r.accuracy:.3f})" for r in short)
        msg = f"base LM below its accuracy floor after {step + 1} steps: {names}"
        if pcfg.require_floor:
            raise PretrainFloorError(msg)
        log(f"Warn: {msg}")
    checkpoint = make_checkpoint(
        model,
        pretrain_hash(cfg, steps_cap),
        initial_rng_state(cfg.seeds.train),
        metadata={
            "after_task": NL_TASK,
            "steps": step + 1,
            "nl_baseline": _results_to_records(results),
        },
    )
    return checkpoint, results


# -----------------------------------------------------------------------------#
def evaluate_all_seen(checkpoint, sequence, nl_suite, matrix, after_task, verbose=False):
    """Score the NL suite and the test sets of every task <= after_task.

    The checkpoint never carries adapters (they are merged before handoff).

    Returns:
        MatrixRow (not appended to the matrix)
    """
    pairs = _nl_pairs(nl_suite)
    for task in sequence.tasks:
        if 1 < task.task_id <= after_task:
            pairs += [(task.task_id, d) for d in task.eval_sets]
    results = evaluate_sets(checkpoint, pairs, verbose)
    learned = sequence.tasks[after_task - 1].name
    return matrix.build_row(after_task, results, learned)


def _run_files(run_dir):
    run_dir = Path(run_dir)
    return run_dir / "checkpoints", run_dir / "matrix_rows.jsonl", run_dir / "metrics.csv"


def _append_row(path, row):
    with open(path, "a") as f:
        record = {
            "after_task": row.after_task,
            "learned": row.learned,
            "results": _results_to_records(row.results),
        }
        f.write(json.dumps(record, sort_keys=True))
        f.write("\n")


def _read_rows(rows_path):
    """Leading run of rows 1, 2, ... from matrix_rows.jsonl."""
    records = []
    with open(rows_path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                if rec["after_task"] != len(records) + 1:
                    break
                records.append(rec)
    return records


def _resume(run_dir, cfg, sequence, log):
    """Latest completed task of an interrupted run, or None.

    A task counts as completed when both its checkpoint and its matrix row
    are on disk.
    """
    ckpt_dir, rows_path, metrics_path = _run_files(run_dir)
    if not rows_path.exists():
        return None
    records = _read_rows(rows_path)
    done = sorted(
        int(p.stem.split("_")[1]) for p in ckpt_dir.glob("task_*.pt") if p.stem[5:].isdigit()
    )
    done = [k for k in done if 1 < k <= min(len(sequence.tasks), len(records))]
    if not done:
        return None
    last = done[-1]
    checkpoint = load_checkpoint(ckpt_dir / f"task_{last}.pt")
    if checkpoint.config_hash != config_hash(cfg):
        raise ConfigError(
            f"checkpoint in {ckpt_dir} was produced by a different configuration"
        )
    matrix = ForgettingMatrix()
    for rec in records[:last]:
        matrix.add_row(rec["after_task"], _records_to_results(rec["results"]), rec["learned"])
    with open(rows_path, "w") as f:
        pass
    for row in matrix.rows:
        _append_row(rows_path, row)
    if metrics_path.exists():
        MetricsLog(metrics_path).truncate(last)
    buffer = RehearsalBuffer.from_state(
        checkpoint.metadata["buffer"], cfg.model.n_patches, cfg.model.patch_dim
    )
    log(f"> Resuming after task {last} from {ckpt_dir / f'task_{last}.pt'}.")
    return RunState(checkpoint.with_options(optimizer_state=None), buffer, matrix, last)


def _run_sequence(base, sequence, nl_suite, cfg, run_dir=None, verbose=False, log=print):
    method = cfg.method
    if not (base.metadata or {}).get("nl_baseline"):
        raise ValueError("missing baseline: base checkpoint has no recorded NL accuracies")
    metrics = None
    state = None
    if run_dir is not None:
        ckpt_dir, rows_path, metrics_path = _run_files(run_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        state = _resume(run_dir, cfg, sequence, log)
        metrics = MetricsLog(metrics_path)
    if state is None:
        matrix = ForgettingMatrix()
        row = matrix.add_row(
            NL_TASK, _records_to_results(base.metadata["nl_baseline"]), "base_lm"
        )
        checkpoint = base._replace(
            config_hash=config_hash(cfg), optimizer_state=None, metadata={}
        )
        state = RunState(checkpoint, RehearsalBuffer(method.rehearsal.fraction), matrix)
        if run_dir is not None:
            with open(rows_path, "w"):
                pass
            _append_row(rows_path, row)
    checkpoint, buffer, matrix = state.checkpoint, state.buffer, state.matrix

    for task in sequence.tasks[state.after_task :]:
        k = task.task_id
        if verbose:
            log(f"> Task {k}: {task.name} ({len(task.dataset.train)} samples)")
        if k == 2:
            checkpoint = train_alignment_stage(
                checkpoint, task.dataset.alignment, cfg.alignment, method, metrics, verbose, log
            )
        order_seed, checkpoint = draw_seed(checkpoint)
        stream = rehearsal_mix(
            task.dataset.train, buffer if method.uses_rehearsal else (), order_seed
        )
        checkpoint = train_task(
            checkpoint, stream, method, cfg.finetune, k, metrics, verbose, log
        )
        if method.uses_rehearsal:
            buffer.add(task.dataset, cfg.seeds.train)
        row = evaluate_all_seen(checkpoint, sequence, nl_suite, matrix, k, verbose)
        matrix.rows.append(row)
        if verbose:
            log(
                f"> After task {k}: NL omega {row.omega[NL_TASK]:.4f}, "
                f"NL delta {row.delta[NL_TASK]:.4f}"
            )
        checkpoint = checkpoint._replace(
            metadata={"after_task": k, "buffer": buffer.state_dict()}
        )
        if run_dir is not None:
            _append_row(rows_path, row)
            save_checkpoint(checkpoint, ckpt_dir / f"task_{k}.pt")
    return matrix, checkpoint


def run_two_task(base, bundle, cfg, run_dir=None, verbose=False, log=print):
    """Alignment stage, then one fine-tuning pass over the VL mixture.

    Returns:
        (ForgettingMatrix with rows k = 1, 2; final Checkpoint)
    """
    sequence = build_task_sequence("two_task", bundle.vl_tasks, cfg.seeds.train)
    return _run_sequence(base, sequence, bundle.nl_suite, cfg, run_dir, verbose, log)


def run_continual(base, bundle, cfg, run_dir=None, verbose=False, log=print):
    """Alignment stage, then caption_instruct, vqa, ocr and refgrounding.

    LoRA adapters are merged after every task; rehearsal samples of tasks
    2..i-1 are mixed into task i.

    Returns:
        (ForgettingMatrix with rows k = 1..5; final Checkpoint)
    """
    sequence = build_task_sequence("continual", bundle.vl_tasks, cfg.seeds.train)
    return _run_sequence(base, sequence, bundle.nl_suite, cfg, run_dir, verbose, log)


def run_sequence(base, bundle, cfg, run_dir=None, verbose=False, log=print):
    """run_two_task or run_continual, following cfg.mode."""
    runner = run_two_task if cfg.mode == "two_task" else run_continual
    return runner(base, bundle, cfg, run_dir, verbose, log)
