#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_mitigation.py                                                #
#                                                                             #
# PURPOSE:  Forgetting-mitigation methods as training modifiers: soft         #
#           targets, LoRA adapters with merging, and a rehearsal buffer.      #
#                                                                             #
# REQUIRED: Requires numpy and torch.                                         #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  smooth_targets       ... 1-alpha on the target, alpha/(N-1) elsewhere      #
#  build_target_distribution ... one-hot or smoothed vector for a method      #
#  target_builder       ... batched target distributions for training         #
#  LoRAAdapter          ... A (r x in), B (out x r) and scale of one layer    #
#  AdapterSet           ... adapters attached to a model via forward hooks    #
#  lora_targets         ... names of the LLM linear layers to adapt           #
#  lora_rank            ... adapter rank for one layer                        #
#  lora_scale           ... alpha/r or alpha/sqrt(r)                          #
#  lora_attach          ... create adapters with B = 0                        #
#  lora_merge           ... fold W + scale*B@A into the model, once           #
#  rehearsal_select     ... seeded subset of a past task's train split        #
#  rehearsal_mix        ... current split + buffer, shuffled                  #
#  RehearsalBuffer      ... per-task stored samples                           #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import math
import weakref
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from CLutils.util_data import PAD_ID, record_to_sample, sample_to_record
from CLutils.util_misc import round_half_up, seeded_rng
from CLutils.util_model import LLM_COMPONENTS, component_of, one_hot_targets


# -----------------------------------------------------------------------------#
def smooth_targets(target_id, vocab_size, alpha):
    """Label-smoothed target vector.

    Args:
        target_id (int): Target token, never PAD.
        vocab_size (int): N.
        alpha (float): Mass moved off the target, 0 < alpha < 1.

    Returns:
        np.ndarray of length N with 1 - alpha at target_id and alpha/(N-1)
        elsewhere.
    """
    if not 0 <= target_id < vocab_size:
        raise ValueError(f"target id {target_id} outside [0, {vocab_size})")
    if target_id == PAD_ID:
        raise ValueError("PAD positions are masked and never smoothed")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha={alpha} must lie in (0, 1)")
    vec = np.full(vocab_size, alpha / (vocab_size - 1))
    vec[target_id] = 1.0 - alpha
    return vec


def build_target_distribution(method, target_id, vocab_size):
    """Training target for one token under a method.

    One-hot for naive, lora and rehearsal; smoothed for soft_targets, msgm
    and msgm_rehearsal.
    """
    if method.uses_soft_targets:
        return smooth_targets(target_id, vocab_size, method.soft.alpha)
    if not 0 <= target_id < vocab_size:
        raise ValueError(f"target id {target_id} outside [0, {vocab_size})")
    vec = np.zeros(vocab_size)
    vec[target_id] = 1.0
    return vec


def target_builder(method, alignment_stage=False):
    """Batched counterpart of build_target_distribution.

    Returns a callable (target_ids, N, dtype) -> M x N tensor. During the
    alignment stage targets are smoothed only if soft.in_alignment is set.
    """
    smooth = method.uses_soft_targets and (
        method.soft.in_alignment or not alignment_stage
    )
    if not smooth:
        return one_hot_targets
    alpha = method.soft.alpha

    def build(target_ids, vocab_size, dtype):
        if bool((target_ids == PAD_ID).any()):
            raise ValueError("PAD positions are masked and never smoothed")
        q = torch.full(
            (target_ids.shape[0], vocab_size),
            alpha / (vocab_size - 1),
            dtype=dtype,
            device=target_ids.device,
        )
        return q.scatter_(1, target_ids.unsqueeze(1), 1.0 - alpha)

    return build


# -----------------------------------------------------------------------------#
class LoRAAdapter(nn.Module):
    """Low-rank update scale * B @ A of one linear layer"""

    def __init__(self, in_features, out_features, rank, scale, generator, dtype):
        super().__init__()
        std = 1.0 / math.sqrt(in_features)
        draw = torch.randn((rank, in_features), generator=generator, dtype=torch.float64)
        self.A = nn.Parameter((draw * std).to(dtype))
        self.B = nn.Parameter(torch.zeros((out_features, rank), dtype=dtype))
        self.rank = rank
        self.scale = scale

    def forward(self, x):
        return F.linear(F.linear(x, self.A), self.B) * self.scale

    def hook(self, module, inputs, output):
        return output + self(inputs[0])

    def delta(self):
        return self.scale * (self.B @ self.A)


class AdapterSet(nn.Module):
    """Adapters attached to one model through forward hooks"""

    def __init__(self, model):
        super().__init__()
        self.layers = nn.ModuleDict()
        self.targets = []
        self._owner = weakref.ref(model)
        self._handles = []
        self.consumed = False

    def attach(self, name, adapter):
        layer = self._owner().get_submodule(name)
        self.layers[name.replace(".", "_")] = adapter
        self.targets.append(name)
        self._handles.append(layer.register_forward_hook(adapter.hook))

    def items(self):
        return [(name, self.layers[name.replace(".", "_")]) for name in self.targets]

    def owned_by(self, model):
        return self._owner() is model

    def detach(self):
        for handle in self._handles:
            handle.remove()
        self._handles = []
        self.consumed = True


def lora_targets(model, targets="all_linear"):
    """LLM linear layers that receive adapters.

    all_linear: attention q, k, v, o, both FFN layers and the LM head.
    attention_kqv: attention q, k and v only.
    The alignment projector is never adapted.
    """
    names = []
    for i in range(len(model.blocks)):
        names += [f"blocks.{i}.attention.{p}" for p in ("q", "k", "v")]
        if targets == "all_linear":
            names += [f"blocks.{i}.attention.o", f"blocks.{i}.ffn.fc1", f"blocks.{i}.ffn.fc2"]
        elif targets != "attention_kqv":
            raise ValueError(f"unknown LoRA target set '{targets}'")
    if targets == "all_linear":
        names.append("lm_head")
    return names


def lora_rank(layer, config):
    """Explicit rank, or rank_fraction of min(in, out)."""
    full = min(layer.in_features, layer.out_features)
    if config.rank is not None:
        rank = config.rank
    else:
        rank = max(1, int(config.rank_fraction * full))
    if rank > full:
        raise ValueError(f"LoRA rank {rank} exceeds layer dimension {full}")
    return rank


def lora_scale(config, rank):
    if config.rank_stabilized:
        return config.alpha / math.sqrt(rank)
    return config.alpha / rank


def lora_attach(model, config, seed):
    """Attach adapters to the LLM linear layers.

    B starts at zero so the model's outputs are unchanged. The base LLM
    weights are frozen while the adapters are attached.

    Returns:
        AdapterSet
    """
    gen = torch.Generator().manual_seed(int(seed))
    adapters = AdapterSet(model)
    for name in lora_targets(model, config.targets):
        layer = model.get_submodule(name)
        rank = lora_rank(layer, config)
        adapter = LoRAAdapter(
            layer.in_features,
            layer.out_features,
            rank,
            lora_scale(config, rank),
            gen,
            layer.weight.dtype,
        )
        adapters.attach(name, adapter)
    for name, p in model.named_parameters():
        if component_of(name) in LLM_COMPONENTS:
            p.requires_grad_(False)
    return adapters


def lora_merge(model, adapters):
    """Replace every adapted W by W + scale * B @ A and discard the adapters."""
    if adapters.consumed:
        raise ValueError("adapters already merged (adapters are consumed by a merge)")
    if not adapters.owned_by(model):
        raise ValueError("adapters were attached to a different model")
    with torch.no_grad():
        for name, adapter in adapters.items():
            layer = model.get_submodule(name)
            layer.weight.add_(adapter.delta())
    adapters.detach()
    return model


# -----------------------------------------------------------------------------#
def rehearsal_count(n_train, fraction):
    """round(fraction * n_train), halves up, at least 1."""
    return max(1, round_half_up(fraction * n_train))


def rehearsal_select(dataset, fraction, seed):
    """Uniform sample without replacement from a past task's train split."""
    if dataset.task_id < 2:
        raise ValueError("task 1 is never stored for rehearsal (excluding task 1)")
    if not dataset.train:
        raise ValueError(f"task {dataset.task_id} has an empty train split")
    n = min(len(dataset.train), rehearsal_count(len(dataset.train), fraction))
    idx = seeded_rng(seed, dataset.task_id, 3).choice(
        len(dataset.train), size=n, replace=False
    )
    return tuple(dataset.train[i] for i in idx)


def rehearsal_mix(current, buffer, seed):
    """Concatenate the current split with the buffered samples and shuffle."""
    stored = buffer.samples() if isinstance(buffer, RehearsalBuffer) else tuple(buffer)
    stream = tuple(current) + stored
    order = seeded_rng(seed, 4).permutation(len(stream))
    return [stream[i] for i in order]


class RehearsalBuffer:
    """Samples kept from each past task (ids >= 2)"""

    def __init__(self, fraction=0.01):
        self.fraction = fraction
        self.store = OrderedDict()

    def __len__(self):
        return sum(len(v) for v in self.store.values())

    def add(self, dataset, seed):
        if dataset.task_id in self.store:
            raise ValueError(f"task {dataset.task_id} is already buffered")
        self.store[dataset.task_id] = rehearsal_select(dataset, self.fraction, seed)
        return self.store[dataset.task_id]

    def task_ids(self):
        return list(self.store)

    def sizes(self):
        return {task: len(samples) for task, samples in self.store.items()}

    def samples(self):
        return tuple(s for samples in self.store.values() for s in samples)

    def state_dict(self):
        return {
            "fraction": self.fraction,
            "tasks": [
                [task, [sample_to_record(s, "rehearsal", "buffer") for s in samples]]
                for task, samples in self.store.items()
            ],
        }

    @classmethod
    def from_state(cls, state, n_patches, patch_dim):
        buffer = cls(state["fraction"])
        for task, records in state["tasks"]:
            buffer.store[int(task)] = tuple(
                record_to_sample(r, n_patches, patch_dim) for r in records
            )
        return buffer
