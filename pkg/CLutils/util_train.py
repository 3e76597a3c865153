#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_train.py                                                     #
#                                                                             #
# PURPOSE:  The two-stage training protocol: learning-rate schedule, Adam     #
#           updates, the alignment stage and the per-task fine-tuning pass.   #
#                                                                             #
# REQUIRED: Requires torch and tqdm.                                          #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  lr_at                ... linear warmup then cosine decay                   #
#  make_optimizer       ... Adam over the trainable tensors                   #
#  optimizer_step       ... one clipped Adam update at a given lr             #
#  MetricsLog           ... CSV log of step, task, loss and lr                #
#  StageResult          ... steps, losses and final optimizer state           #
#  run_stage            ... one pass over a stream on a live model            #
#  train_alignment_stage ... projector-only pass over the caption subset      #
#  train_task           ... one fine-tuning pass under a mitigation method    #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import csv
import math
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

import torch
from tqdm.auto import trange

from CLutils.util_config import MethodSpec
from CLutils.util_misc import NumericalError
from CLutils.util_mitigation import lora_attach, lora_merge, target_builder
from CLutils.util_model import (
    ALIGNMENT_MASK,
    FINETUNE_MASK,
    draw_seed,
    load_model,
    loss_and_gradients,
    make_checkpoint,
    set_trainable,
)

METRICS_COLUMNS = ("step", "task", "loss", "lr")


def warmup_steps(total, ratio):
    """ceil(ratio * total), at least 1."""
    return max(1, math.ceil(round(ratio * total, 9)))


def lr_at(step, total, cfg):
    """Learning rate at a step of a stage with `total` steps.

    lr = peak * (step + 1) / W during the W = ceil(ratio * total) warmup steps,
    then peak * 0.5 * (1 + cos(pi * (step - W) / (total - W))).
    """
    if total <= 0:
        raise ValueError("a stage needs at least one step (total = 0)")
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    n_warm = warmup_steps(total, cfg.warmup_ratio)
    if step < n_warm:
        return cfg.peak_lr * (step + 1) / n_warm
    progress = (step - n_warm) / (total - n_warm)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -----------------------------------------------------------------------------#
def make_optimizer(params, cfg):
    """Adam over the trainable tensors (state kept for these only)."""
    return torch.optim.Adam(
        list(params.values()),
        lr=cfg.peak_lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def optimizer_step(optimizer, params, grads, lr, cfg):
    """Apply one Adam update.

    Args:
        optimizer: torch.optim.Adam built by make_optimizer over params.
        params (dict): name -> trainable tensor.
        grads (dict): name -> gradient, exactly the keys of params.
        lr (float): learning rate of this step.
        cfg (StageConfig): clip norm and Adam hyperparameters.
    """
    if list(grads) != list(params):
        raise ValueError("gradients must cover exactly the trainable tensors")
    for name, p in params.items():
        p.grad = grads[name].to(p.dtype)
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    for name, p in params.items():
        p.grad = None
        if not torch.isfinite(p).all():
            raise NumericalError(f"non-finite update of {name}")
    return optimizer, params


# -----------------------------------------------------------------------------#
class MetricsLog:
    """Appends (step, task, loss, lr) rows to a CSV file"""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, step, task, loss, lr):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([step, task, f"{loss:.6f}", repr(lr)])

    def truncate(self, last_task):
        """Drop rows of tasks after last_task (used when resuming)."""
        with open(self.path, newline="") as f:
            rows = list(csv.reader(f))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[1]) <= last_task]
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerows(keep)


class StageResult(NamedTuple):
    """Outcome of one pass over a training stream"""

    steps: int
    losses: Tuple[float, ...]
    """Mean batch loss of every step"""
    optimizer_state: Optional[dict] = None


def run_stage(
    model,
    stream,
    cfg,
    mask,
    builder,
    adapters=None,
    task_id=0,
    metrics=None,
    verbose=False,
    desc="Training",
):
    """One pass over a stream, batch by batch, on a live model.

    Args:
        model (ToyMLLM): updated in place.
        stream (list): Samples in training order.
        cfg (StageConfig): Batch size, schedule and optimiser.
        mask (TrainabilityMask): Components that train.
        builder: Target-distribution builder (see target_builder).

    Kwargs:
        adapters (AdapterSet): Train these instead of the LLM base weights.
        task_id (int): Recorded in the metrics log and error messages.
        metrics (MetricsLog): Per-step log.

    Returns:
        StageResult
    """
    if not stream:
        raise ValueError("training stream is empty")
    params = set_trainable(model, mask, adapters)
    optimizer = make_optimizer(params, cfg)
    n_steps = math.ceil(len(stream) / cfg.batch_size)
    losses = []
    for step in trange(n_steps, desc=desc, disable=not verbose):
        batch = stream[step * cfg.batch_size : (step + 1) * cfg.batch_size]
        lr = lr_at(step, n_steps, cfg)
        try:
            value, grads = loss_and_gradients(
                model, batch, mask, builder, adapters, cfg.micro_batch_size
            )
        except NumericalError as err:
            raise NumericalError(f"task {task_id}, step {step}: {err}") from err
        if not math.isfinite(value):
            raise NumericalError(f"task {task_id}, step {step}: non-finite loss {value}")
        optimizer_step(optimizer, params, grads, lr, cfg)
        losses.append(value)
        if metrics is not None:
            metrics.append(step, task_id, value, lr)
    return StageResult(n_steps, tuple(losses), optimizer.state_dict())


def train_alignment_stage(
    checkpoint, data, cfg, method=MethodSpec(), metrics=None, verbose=False, log=print
):
    """Train only the alignment projector for one pass over the caption
    alignment subset. The LLM and vision encoder are frozen."""
    if not data:
        raise ValueError("alignment data is empty")
    model = load_model(checkpoint)
    result = run_stage(
        model,
        list(data),
        cfg,
        ALIGNMENT_MASK,
        target_builder(method, alignment_stage=True),
        task_id=2,
        metrics=metrics,
        verbose=verbose,
        desc="Alignment stage",
    )
    if verbose:
        log(f"> Alignment stage: {result.steps} steps, final loss {result.losses[-1]:.4f}")
    return make_checkpoint(
        model,
        checkpoint.config_hash,
        checkpoint.rng_state,
        result.optimizer_state,
        checkpoint.metadata,
    )


def train_task(
    checkpoint,
    stream,
    method,
    cfg,
    task_id=2,
    metrics=None,
    verbose=False,
    log=print,
):
    """One fine-tuning pass over a task's stream.

    For LoRA-family methods adapters are attached (seeded from the
    checkpoint's RNG), trained alongside the alignment projector and merged
    back before the checkpoint is returned. The returned checkpoint's RNG
    state is advanced.
    """
    if not stream:
        raise ValueError("training stream is empty")
    model = load_model(checkpoint)
    adapter_seed, checkpoint = draw_seed(checkpoint)
    adapters = lora_attach(model, method.lora, adapter_seed) if method.uses_lora else None
    result = run_stage(
        model,
        list(stream),
        cfg,
        FINETUNE_MASK,
        target_builder(method),
        adapters=adapters,
        task_id=task_id,
        metrics=metrics,
        verbose=verbose,
        desc=f"Task {task_id}",
    )
    if adapters is not None:
        lora_merge(model, adapters)
    if verbose:
        log(
            f"> Task {task_id} ({method.variant}): {result.steps} steps, "
            f"final loss {result.losses[-1]:.4f}"
        )
    return make_checkpoint(
        model,
        checkpoint.config_hash,
        checkpoint.rng_state,
        result.optimizer_state,
        checkpoint.metadata,
    )
