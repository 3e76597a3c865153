#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Utility functions for unit tests: small configurations, random samples and
a cached tiny experiment.
"""

import numpy as np

from CLutils.util_config import (
    DataConfig,
    ModelConfig,
    PretrainConfig,
    RunConfig,
    StageConfig,
)
from CLutils.util_data import IMG_ID, SceneSpec, Sample, SyntheticImage, generate_datasets

# Under 5k parameters, float64, for finite-difference checks.
GRADCHECK_MODEL = ModelConfig(
    n_layers=1,
    d_model=8,
    n_heads=2,
    d_ffn=16,
    context=24,
    vocab_size=16,
    n_patches=4,
    patch_dim=3,
    vision_dim=4,
    dtype="float64",
)


def tiny_config(**kwargs):
    """A RunConfig that trains end to end in seconds.

    Keywords replace top-level RunConfig fields.
    """
    cfg = RunConfig(
        model=ModelConfig(
            n_layers=1,
            d_model=16,
            n_heads=2,
            d_ffn=32,
            context=48,
            vocab_size=64,
            vision_dim=8,
        ),
        data=DataConfig(
            n_pretrain=200, n_vl_train=48, n_vl_test=12, n_align=24, n_nl_test=12
        ),
        pretrain=PretrainConfig(
            peak_lr=3e-3, batch_size=16, max_steps=12, eval_every=6, require_floor=False
        ),
        alignment=StageConfig(peak_lr=3e-3, batch_size=8),
        finetune=StageConfig(peak_lr=2e-3, batch_size=8),
    )
    return cfg.with_options(**kwargs).validate()


def random_samples(config, n, seed, with_image=True, max_target=3):
    """Random token samples (and random patch images) for a model config."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        prompt = tuple(int(t) for t in rng.integers(5, config.vocab_size, size=2))
        image = None
        if with_image:
            prompt = (IMG_ID,) + prompt
            patches = rng.uniform(-1, 1, size=(config.n_patches, config.patch_dim))
            image = SyntheticImage(patches, SceneSpec(objects=()))
        length = int(rng.integers(1, max_target + 1))
        target = tuple(int(t) for t in rng.integers(5, config.vocab_size, size=length))
        samples.append(
            Sample(
                prompt=prompt,
                target=target,
                loss_mask=(True,) * length,
                image=image,
                task_id=2,
            )
        )
    return samples


_BUNDLES = {}


def tiny_bundle(cfg=None):
    """Generated datasets of a tiny config, cached per config."""
    cfg = cfg or tiny_config()
    key = (cfg.model, cfg.data, cfg.seeds)
    if key not in _BUNDLES:
        _BUNDLES[key] = generate_datasets(cfg)
    return _BUNDLES[key]
