#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Tests for the schedules, optimiser and training stages in CLutils.util_train"""

import csv
import logging
import math
import unittest

import pytest
import torch

from CLutils.util_config import MethodSpec, StageConfig
from CLutils.util_misc import NumericalError
from CLutils.util_model import (
    FINETUNE_MASK,
    LLM_COMPONENTS,
    component_digest,
    init_parameters,
    initial_rng_state,
    make_checkpoint,
    one_hot_targets,
    states_equal,
)
from CLutils.util_testing import random_samples, tiny_bundle, tiny_config
from CLutils.util_train import (
    MetricsLog,
    lr_at,
    make_optimizer,
    optimizer_step,
    run_stage,
    train_alignment_stage,
    train_task,
    warmup_steps,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class test_schedule(unittest.TestCase):
    def setUp(self):
        self.cfg = StageConfig(peak_lr=2e-5, warmup_ratio=0.03)

    def test_warmup_length(self):
        self.assertEqual(warmup_steps(100, 0.03), 3)
        self.assertEqual(warmup_steps(10, 0.03), 1)
        self.assertEqual(warmup_steps(1000, 0.03), 30)

    def test_values(self):
        self.assertAlmostEqual(lr_at(0, 100, self.cfg), 2e-5 / 3, places=15)
        self.assertAlmostEqual(lr_at(2, 100, self.cfg), 2e-5, places=15)
        last = lr_at(99, 100, self.cfg)
        expected = 2e-5 * 0.5 * (1 + math.cos(math.pi * 96 / 97))
        self.assertAlmostEqual(last / expected, 1.0, places=9)
        self.assertTrue(5.1e-9 < last < 5.3e-9)

    def test_shape(self):
        lrs = [lr_at(s, 100, self.cfg) for s in range(100)]
        self.assertAlmostEqual(max(lrs), 2e-5, places=15)
        self.assertTrue(all(a < b for a, b in zip(lrs[:2], lrs[1:3])))
        self.assertTrue(all(a >= b for a, b in zip(lrs[3:], lrs[4:])))
        self.assertTrue(all(lr > 0 for lr in lrs))

    def test_errors(self):
        with self.assertRaisesRegex(ValueError, "total = 0"):
            lr_at(0, 0, self.cfg)
        with self.assertRaises(ValueError):
            lr_at(100, 100, self.cfg)


class test_optimizer(unittest.TestCase):
    def setUp(self):
        self.cfg = StageConfig(peak_lr=1e-2)
        self.params = {"w": torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))}

    def test_adam_scalar(self):
        opt = make_optimizer(self.params, self.cfg)
        b1, b2, eps, lr = self.cfg.beta1, self.cfg.beta2, self.cfg.eps, 1e-2
        w, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate([0.3, -0.1, 0.7, 0.2, -0.4], start=1):
            grad = {"w": torch.tensor([g], dtype=torch.float64)}
            optimizer_step(opt, self.params, grad, lr, self.cfg)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            self.assertAlmostEqual(float(self.params["w"]), w, places=12)

    def test_zero_lr_is_identity(self):
        opt = make_optimizer(self.params, self.cfg)
        grad = {"w": torch.tensor([3.0], dtype=torch.float64)}
        optimizer_step(opt, self.params, grad, 0.0, self.cfg)
        self.assertEqual(float(self.params["w"]), 0.5)

    def test_rejects_mismatched_gradients(self):
        opt = make_optimizer(self.params, self.cfg)
        with self.assertRaises(ValueError):
            optimizer_step(opt, self.params, {"x": torch.zeros(1)}, 1e-3, self.cfg)

    def test_non_finite_update(self):
        opt = make_optimizer(self.params, self.cfg)
        bad = {"w": torch.tensor([float("inf")], dtype=torch.float64)}
        with self.assertRaises(NumericalError):
            optimizer_step(opt, self.params, bad, 1e-3, self.cfg)


# -----------------------------------------------------------------------------#
def _base(cfg, seed=0):
    return make_checkpoint(init_parameters(cfg.model, seed), "test", initial_rng_state(seed))


def test_run_stage_steps_and_metrics(tmp_path):
    cfg = tiny_config()
    model = init_parameters(cfg.model, 0)
    stream = random_samples(cfg.model, 19, seed=1)
    metrics = MetricsLog(tmp_path / "metrics.csv")
    result = run_stage(
        model, stream, cfg.finetune, FINETUNE_MASK, one_hot_targets, task_id=3, metrics=metrics
    )
    assert result.steps == math.ceil(19 / cfg.finetune.batch_size) == 3
    assert len(result.losses) == 3
    with open(tmp_path / "metrics.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "task", "loss", "lr"]
    assert [r[:2] for r in rows[1:]] == [["0", "3"], ["1", "3"], ["2", "3"]]

    metrics.append(0, 4, 1.0, 1e-3)
    metrics.truncate(3)
    with open(tmp_path / "metrics.csv", newline="") as f:
        assert len(list(csv.reader(f))) == 4


def test_alignment_stage_trains_only_projector():
    cfg = tiny_config()
    base = _base(cfg)
    data = tiny_bundle(cfg).vl_tasks[0].alignment
    out = train_alignment_stage(base, data, cfg.alignment)
    for component in LLM_COMPONENTS + ("vision_encoder",):
        assert component_digest(out.state, component) == component_digest(base.state, component)
    assert component_digest(out.state, "alignment") != component_digest(base.state, "alignment")
    with pytest.raises(ValueError, match="alignment data is empty"):
        train_alignment_stage(base, (), cfg.alignment)


def test_train_task_is_deterministic():
    cfg = tiny_config()
    base = _base(cfg)
    stream = tiny_bundle(cfg).vl_tasks[1].train
    a = train_task(base, stream, MethodSpec(), cfg.finetune, task_id=3)
    b = train_task(base, stream, MethodSpec(), cfg.finetune, task_id=3)
    assert states_equal(a.state, b.state)
    assert a.rng_state == b.rng_state != base.rng_state
    assert not states_equal(a.state, base.state)
    assert component_digest(a.state, "vision_encoder") == component_digest(
        base.state, "vision_encoder"
    )


def test_train_task_with_lora_merges_adapters():
    cfg = tiny_config()
    base = _base(cfg)
    stream = tiny_bundle(cfg).vl_tasks[2].train
    out = train_task(base, stream, MethodSpec(variant="lora"), cfg.finetune, task_id=4)
    assert list(out.state) == list(base.state)
    assert component_digest(out.state, "blocks") != component_digest(base.state, "blocks")
    assert component_digest(out.state, "vision_encoder") == component_digest(
        base.state, "vision_encoder"
    )


def test_train_task_errors():
    cfg = tiny_config()
    base = _base(cfg)
    with pytest.raises(ValueError, match="empty"):
        train_task(base, [], MethodSpec(), cfg.finetune)
    state = {k: v.clone() for k, v in base.state.items()}
    state["lm_head.weight"][0, 0] = float("nan")
    stream = tiny_bundle(cfg).vl_tasks[1].train
    with pytest.raises(NumericalError, match="task 3, step 0"):
        train_task(base.with_options(state=state), stream, MethodSpec(), cfg.finetune, task_id=3)


if __name__ == "__main__":
    unittest.main()
