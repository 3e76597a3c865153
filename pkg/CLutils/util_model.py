#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_model.py                                                     #
#                                                                             #
# PURPOSE:  The toy multimodal LM: a pre-norm causal transformer, a frozen    #
#           linear vision encoder and a two-layer GELU alignment projector,   #
#           with loss, gradients, greedy decoding, candidate scoring and the  #
#           checkpoint container used for task-to-task handoff.              #
#                                                                             #
# REQUIRED: Requires numpy and torch.                                         #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  TrainabilityMask     ... per-component trainable/frozen flags              #
#  ToyMLLM              ... the parameter container (torch.nn.Module)         #
#  init_parameters      ... seeded initialisation of a ToyMLLM                #
#  encode_image         ... frozen vision encoder, patches -> embeddings      #
#  align                ... alignment projector, vision -> token space        #
#  assemble_sequence    ... BOS + prompt (+ image) + target embeddings        #
#  assemble_batch       ... right-padded batch of assembled sequences         #
#  forward              ... causal decoder, embeddings -> logits              #
#  loss                 ... masked cross entropy against target distributions #
#  loss_and_gradients   ... mean batch loss and its gradient map              #
#  gradients            ... gradient map over the trainable tensors           #
#  generate_greedy      ... argmax decoding until EOS or max_new              #
#  score_candidates     ... length-normalised log-likelihood of completions   #
#  set_trainable        ... apply a mask (and adapters) to requires_grad      #
#  component_digest     ... hash of the tensors of one component              #
#  Checkpoint           ... parameters + config hash + RNG/optimizer state    #
#  save_checkpoint      ... write a versioned checkpoint file                 #
#  load_checkpoint      ... read a checkpoint file                            #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import hashlib
import math
import os
from collections import OrderedDict
from pathlib import Path
from typing import Dict, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from CLutils.util_config import ModelConfig
from CLutils.util_data import BOS_ID, EOS_ID, IMG_ID, Sample, SyntheticImage
from CLutils.util_misc import NumericalError

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}
CHECKPOINT_VERSION = 1

# Parameter-name prefixes of each component.
COMPONENTS = OrderedDict(
    [
        ("token_embedding", ("token_embedding.", "position_embedding.")),
        ("blocks", ("blocks.", "final_norm.")),
        ("lm_head", ("lm_head.",)),
        ("vision_encoder", ("vision_encoder.",)),
        ("alignment", ("alignment.",)),
    ]
)
LLM_COMPONENTS = ("token_embedding", "blocks", "lm_head")


class TrainabilityMask(NamedTuple):
    """Which components receive gradient updates"""

    token_embedding: bool = True
    blocks: bool = True
    lm_head: bool = True
    vision_encoder: bool = False
    alignment: bool = True

    def validate(self):
        if self.vision_encoder:
            raise ValueError("the vision encoder is frozen in every stage")
        return self


FINETUNE_MASK = TrainabilityMask()
PRETRAIN_MASK = TrainabilityMask(alignment=False)
ALIGNMENT_MASK = TrainabilityMask(
    token_embedding=False, blocks=False, lm_head=False, alignment=True
)


def component_of(name):
    """Component that owns a parameter name."""
    for component, prefixes in COMPONENTS.items():
        if name.startswith(prefixes):
            return component
    raise KeyError(f"parameter {name} belongs to no component")


# -----------------------------------------------------------------------------#
class CausalSelfAttention(nn.Module):
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x):
        B, T, D = x.shape
        hd = D // self.n_heads

        def heads(t):
            return t.view(B, T, self.n_heads, hd).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return self.o(y.transpose(1, 2).reshape(B, T, D))


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ffn):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block"""

    def __init__(self, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attention = CausalSelfAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn)

    def forward(self, x):
        x = x + self.attention(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class AlignmentProjector(nn.Module):
    """Linear -> GELU -> Linear, vision embeddings into token space"""

    def __init__(self, vision_dim, d_model):
        super().__init__()
        self.fc1 = nn.Linear(vision_dim, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class ToyMLLM(nn.Module):
    """Causal LM with a frozen vision encoder and an alignment projector.

    The LM head is untied from the token embedding.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.position_embedding = nn.Embedding(config.context, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.vision_encoder = nn.Linear(config.patch_dim, config.vision_dim, bias=False)
        self.alignment = AlignmentProjector(config.vision_dim, config.d_model)

    @property
    def dtype(self):
        return self.lm_head.weight.dtype

    def forward(self, x):
        T = x.shape[-2]
        x = x + self.position_embedding(torch.arange(T, device=x.device))
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.final_norm(x))


def init_parameters(config, seed):
    """Seeded initialisation: scaled normal weights, zero biases, unit norms.

    Linear weights are drawn with std 1/sqrt(fan_in) and embeddings with std
    0.1, always in float64 before casting, so the draw does not depend on the
    configured dtype. The vision encoder is drawn once here and frozen.
    """
    config.validate()
    model = ToyMLLM(config).to(TORCH_DTYPES[config.dtype])
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            else:
                std = 0.1 if "embedding" in name else 1.0 / math.sqrt(p.shape[1])
                draw = torch.randn(p.shape, generator=gen, dtype=torch.float64)
                p.copy_((draw * std).to(p.dtype))
    model.vision_encoder.weight.requires_grad_(False)
    return model


# -----------------------------------------------------------------------------#
def _patch_tensor(model, patches):
    cfg = model.config
    t = torch.as_tensor(np.asarray(patches), dtype=model.dtype)
    if tuple(t.shape[-2:]) != (cfg.n_patches, cfg.patch_dim):
        raise ValueError(
            f"image shape mismatch: got {tuple(t.shape)}, "
            f"expected ({cfg.n_patches}, {cfg.patch_dim})"
        )
    return t


def encode_image(model, image):
    """Frozen row-wise linear map of the patches (P x vision_dim)."""
    patches = image.patches if isinstance(image, SyntheticImage) else image
    return model.vision_encoder(_patch_tensor(model, patches))


def align(model, visual):
    """Project visual embeddings into token space (P x d_model)."""
    if visual.shape[-1] != model.config.vision_dim:
        raise ValueError(
            f"visual embedding shape mismatch: last dim {visual.shape[-1]} "
            f"!= {model.config.vision_dim}"
        )
    return model.alignment(visual)


class AssembledSequence(NamedTuple):
    embeddings: torch.Tensor
    """T x d_model"""
    target_positions: torch.Tensor
    """Logit position that predicts each target token"""
    target_ids: torch.Tensor
    loss_mask: torch.Tensor


def sequence_length(sample, n_patches):
    """Length of the assembled sequence of a sample."""
    extra = n_patches - 1 if sample.image is not None else 0
    return 1 + len(sample.prompt) + extra + len(sample.target)


def assemble_sequence(model, sample):
    """Embed BOS + prompt + target, with the IMG placeholder replaced by the
    P aligned visual embeddings."""
    cfg = model.config
    n_img = sample.prompt.count(IMG_ID)
    if sample.image is None and n_img:
        raise ValueError("IMG placeholder present without an image")
    if sample.image is not None and n_img != 1:
        raise ValueError("image present without exactly one IMG placeholder")
    length = sequence_length(sample, cfg.n_patches)
    if length > cfg.context:
        raise ValueError(f"context exceeded: {length} > {cfg.context}")
    device = model.lm_head.weight.device
    tokens = torch.tensor((BOS_ID,) + tuple(sample.prompt) + tuple(sample.target), device=device)
    emb = model.token_embedding(tokens)
    if sample.image is not None:
        pos = 1 + sample.prompt.index(IMG_ID)
        visual = align(model, encode_image(model, sample.image).to(device))
        emb = torch.cat([emb[:pos], visual, emb[pos + 1 :]])
    first = length - len(sample.target) - 1
    return AssembledSequence(
        embeddings=emb,
        target_positions=torch.arange(first, first + len(sample.target), device=device),
        target_ids=torch.tensor(sample.target, dtype=torch.long, device=device),
        loss_mask=torch.tensor(sample.loss_mask, dtype=torch.bool, device=device),
    )


class Batch(NamedTuple):
    embeddings: torch.Tensor
    """B x T x d_model, right-padded with zeros"""
    rows: torch.Tensor
    """Batch row of every target token"""
    positions: torch.Tensor
    target_ids: torch.Tensor
    loss_mask: torch.Tensor


def assemble_batch(model, samples):
    seqs = [assemble_sequence(model, s) for s in samples]
    embeddings = nn.utils.rnn.pad_sequence([s.embeddings for s in seqs], batch_first=True)
    rows = torch.cat(
        [torch.full_like(s.target_positions, i) for i, s in enumerate(seqs)]
    )
    return Batch(
        embeddings=embeddings,
        rows=rows,
        positions=torch.cat([s.target_positions for s in seqs]),
        target_ids=torch.cat([s.target_ids for s in seqs]),
        loss_mask=torch.cat([s.loss_mask for s in seqs]),
    )


def forward(model, embeddings):
    """Logits (T x N, or B x T x N for batched input)."""
    single = embeddings.dim() == 2
    x = embeddings.unsqueeze(0) if single else embeddings
    if x.shape[1] == 0:
        raise ValueError("forward needs a non-empty sequence")
    if x.shape[1] > model.config.context:
        raise ValueError(f"context exceeded: {x.shape[1]} > {model.config.context}")
    logits = model(x)
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite logits in forward pass")
    return logits[0] if single else logits


def loss(logits, q, mask):
    """Masked mean of the cross entropy H(q, softmax(logits)).

    Args:
        logits: M x N logits.
        q: M x N target distributions (one-hot or smoothed).
        mask: M booleans selecting the positions that count.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool, device=logits.device)
    if not mask.any():
        raise ValueError("loss mask selects no target positions")
    tol = 1e-9 if q.dtype == torch.float64 else 1e-5
    if not torch.allclose(q.sum(-1), torch.ones((), dtype=q.dtype), rtol=0.0, atol=tol):
        raise ValueError("target rows must be probability vectors")
    per_token = -(q * F.log_softmax(logits, dim=-1)).sum(-1)
    return per_token[mask].mean()


def _token_losses(model, samples, target_builder):
    batch = assemble_batch(model, samples)
    logits = forward(model, batch.embeddings)[batch.rows, batch.positions]
    q = target_builder(batch.target_ids, model.config.vocab_size, logits.dtype)
    per_token = -(q * F.log_softmax(logits, dim=-1)).sum(-1)
    return per_token, batch.loss_mask


def set_trainable(model, mask, adapters=None):
    """Set requires_grad from a mask and return the trainable tensors.

    While adapters are attached the LLM base weights stay frozen and the
    adapter tensors train in their place.
    """
    mask.validate()
    trainable = OrderedDict()
    for name, p in model.named_parameters():
        component = component_of(name)
        on = getattr(mask, component) and not (
            adapters is not None and component in LLM_COMPONENTS
        )
        p.requires_grad_(on)
        if on:
            trainable[name] = p
    if adapters is not None:
        for name, p in adapters.named_parameters():
            p.requires_grad_(True)
            trainable[f"adapters.{name}"] = p
    return trainable


def loss_and_gradients(
    model, batch, mask, target_builder, adapters=None, micro_batch_size=None
):
    """Mean batch loss over target tokens and its exact gradients.

    Micro-batches are reduced in batch order; each contributes its summed
    token losses divided by the token count of the whole batch.

    Returns:
        (float loss, OrderedDict name -> gradient tensor)
    """
    if not batch:
        raise ValueError("gradients need a non-empty batch")
    params = set_trainable(model, mask, adapters)
    for p in params.values():
        p.grad = None
    n_tokens = sum(sum(s.loss_mask) for s in batch)
    if n_tokens == 0:
        raise ValueError("loss mask selects no target positions")
    size = micro_batch_size or len(batch)
    value = 0.0
    for start in range(0, len(batch), size):
        per_token, keep = _token_losses(model, batch[start : start + size], target_builder)
        part = per_token[keep].sum() / n_tokens
        if part.requires_grad:
            part.backward()
        value += float(part.detach())
    grads = OrderedDict()
    for name, p in params.items():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
        grads[name] = g
        p.grad = None
    return value, grads


def gradients(model, batch, mask, target_builder, adapters=None, micro_batch_size=None):
    """Gradient map of the mean batch loss over the trainable tensors."""
    return loss_and_gradients(
        model, batch, mask, target_builder, adapters, micro_batch_size
    )[1]


def one_hot_targets(target_ids, vocab_size, dtype):
    return F.one_hot(target_ids, vocab_size).to(dtype)


# -----------------------------------------------------------------------------#
@torch.no_grad()
def generate_greedy(model, sample, max_new):
    """Argmax decoding after the sample's prompt (and image).

    Stops after EOS (which is included in the output) or max_new tokens.
    Ties go to the lowest token id.
    """
    out = []
    if max_new <= 0:
        return out
    query = sample._replace(target=(), loss_mask=(), candidates=None)
    emb = assemble_sequence(model, query).embeddings
    device = emb.device
    for _ in range(max_new):
        token = int(torch.argmax(forward(model, emb)[-1]))
        out.append(token)
        if token == EOS_ID or emb.shape[0] >= model.config.context:
            break
        emb = torch.cat([emb, model.token_embedding(torch.tensor([token], device=device))])
    return out


@torch.no_grad()
def score_candidates(model, prompt, candidates, image=None):
    """Sum of candidate-token log-probabilities divided by candidate length.

    Returns:
        list of float scores, one per candidate.
    """
    scores = []
    for candidate in candidates:
        if len(candidate) == 0:
            raise ValueError("empty candidate")
        sample = Sample(
            prompt=tuple(prompt),
            target=tuple(candidate),
            loss_mask=(True,) * len(candidate),
            image=image,
        )
        seq = assemble_sequence(model, sample)
        logp = F.log_softmax(forward(model, seq.embeddings)[seq.target_positions], dim=-1)
        picked = logp.gather(-1, seq.target_ids.unsqueeze(-1)).squeeze(-1)
        scores.append(float(picked.sum()) / len(candidate))
    return scores


def select_candidate(scores):
    """Index of the best score, ties to the lowest index."""
    return int(np.argmax(scores))


# -----------------------------------------------------------------------------#
def component_digest(model, component):
    """SHA-256 over the names and raw bytes of one component's tensors."""
    prefixes = COMPONENTS[component]
    h = hashlib.sha256()
    state = model.state_dict() if isinstance(model, nn.Module) else model
    for name in sorted(state):
        if name.startswith(prefixes):
            h.update(name.encode())
            h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Checkpoint(NamedTuple):
    """Everything handed from one task to the next"""

    model_config: ModelConfig
    state: Dict[str, torch.Tensor]
    """Named parameter tensors"""
    config_hash: str
    rng_state: dict
    """numpy PCG64 bit-generator state"""
    optimizer_state: Optional[dict] = None
    metadata: Optional[dict] = None
    """Run bookkeeping: task index, baselines, rehearsal buffer, rows"""

    def with_options(self, **kwargs):
        """Create a new Checkpoint instance with keywords updated"""
        prop = self._asdict()
        prop.update(**kwargs)
        return Checkpoint(**prop)


def initial_rng_state(seed):
    return np.random.default_rng(int(seed)).bit_generator.state


def make_checkpoint(model, config_hash, rng_state, optimizer_state=None, metadata=None):
    """Snapshot a model into a Checkpoint (tensors are copied)."""
    state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    return Checkpoint(
        model_config=model.config,
        state=state,
        config_hash=config_hash,
        rng_state=rng_state,
        optimizer_state=optimizer_state,
        metadata=dict(metadata or {}),
    )


def load_model(checkpoint):
    """Rebuild the ToyMLLM held by a checkpoint."""
    cfg = checkpoint.model_config
    model = ToyMLLM(cfg).to(TORCH_DTYPES[cfg.dtype])
    model.load_state_dict(checkpoint.state)
    model.vision_encoder.weight.requires_grad_(False)
    return model


def draw_seed(checkpoint):
    """Draw a seed from the checkpoint's RNG and return the advanced checkpoint."""
    bitgen = np.random.PCG64()
    bitgen.state = checkpoint.rng_state
    seed = int(np.random.Generator(bitgen).integers(2**31))
    return seed, checkpoint.with_options(rng_state=bitgen.state)


def states_equal(a, b):
    """True if two named-tensor maps are bit-identical."""
    return list(a) == list(b) and all(torch.equal(a[k], b[k]) for k in a)


def save_checkpoint(checkpoint, path):
    """Write a versioned checkpoint file (written to a temporary name first)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": checkpoint.model_config._asdict(),
        "state": checkpoint.state,
        "config_hash": checkpoint.config_hash,
        "rng_state": checkpoint.rng_state,
        "optimizer_state": checkpoint.optimizer_state,
        "metadata": checkpoint.metadata,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')} in {path}"
        )
    return Checkpoint(
        model_config=ModelConfig(**payload["model_config"]),
        state=payload["state"],
        config_hash=payload["config_hash"],
        rng_state=payload["rng_state"],
        optimizer_state=payload["optimizer_state"],
        metadata=payload["metadata"],
    )
