#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Tests for the toy MLLM in CLutils.util_model"""

import itertools
import logging
import unittest

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from CLutils.util_data import EOS_ID, IMG_ID, Sample
from CLutils.util_misc import NumericalError
from CLutils.util_model import (
    ALIGNMENT_MASK,
    FINETUNE_MASK,
    TrainabilityMask,
    align,
    assemble_sequence,
    component_digest,
    draw_seed,
    encode_image,
    forward,
    generate_greedy,
    init_parameters,
    initial_rng_state,
    load_checkpoint,
    load_model,
    loss,
    loss_and_gradients,
    make_checkpoint,
    one_hot_targets,
    save_checkpoint,
    score_candidates,
    select_candidate,
    sequence_length,
    set_trainable,
    states_equal,
)
from CLutils.util_testing import GRADCHECK_MODEL, random_samples, tiny_config

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


def always_eos(model):
    """Make every position predict EOS with logit 1 and every other token 0."""
    with torch.no_grad():
        model.final_norm.weight.zero_()
        model.final_norm.bias.zero_()
        model.final_norm.bias[0] = 1.0
        model.lm_head.weight.zero_()
        model.lm_head.weight[EOS_ID, 0] = 1.0
    return model


class test_gradients(unittest.TestCase):
    """Analytic gradients against central finite differences in float64"""

    def setUp(self):
        self.model = init_parameters(GRADCHECK_MODEL, 11)
        self.rng = np.random.default_rng(12)

    def _loss(self, batch):
        value, _ = loss_and_gradients(self.model, batch, FINETUNE_MASK, one_hot_targets)
        return value

    def test_central_differences(self):
        h = 1e-6
        for k in range(3):
            batch = random_samples(GRADCHECK_MODEL, 3, seed=100 + k)
            _, grads = loss_and_gradients(
                self.model, batch, FINETUNE_MASK, one_hot_targets
            )
            params = dict(self.model.named_parameters())
            for name, grad in grads.items():
                p = params[name]
                flat = p.data.view(-1)
                picks = self.rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False)
                for i in picks:
                    orig = float(flat[i])
                    flat[i] = orig + h
                    up = self._loss(batch)
                    flat[i] = orig - h
                    down = self._loss(batch)
                    flat[i] = orig
                    numeric = (up - down) / (2 * h)
                    np.testing.assert_allclose(
                        float(grad.view(-1)[i]),
                        numeric,
                        rtol=1e-4,
                        atol=1e-8,
                        err_msg=f"{name}[{i}]",
                    )

    def test_micro_batches_match_full_batch(self):
        batch = random_samples(GRADCHECK_MODEL, 6, seed=5)
        v_full, g_full = loss_and_gradients(self.model, batch, FINETUNE_MASK, one_hot_targets)
        v_micro, g_micro = loss_and_gradients(
            self.model, batch, FINETUNE_MASK, one_hot_targets, micro_batch_size=2
        )
        self.assertAlmostEqual(v_full, v_micro, places=12)
        for name in g_full:
            torch.testing.assert_close(g_full[name], g_micro[name], rtol=1e-10, atol=1e-12)

    def test_duplicated_sample_matches_single(self):
        (sample,) = random_samples(GRADCHECK_MODEL, 1, seed=21)
        v_one, g_one = loss_and_gradients(self.model, [sample], FINETUNE_MASK, one_hot_targets)
        v_two, g_two = loss_and_gradients(
            self.model, [sample, sample], FINETUNE_MASK, one_hot_targets
        )
        self.assertAlmostEqual(v_one, v_two, places=12)
        self.assertEqual(list(g_one), list(g_two))
        for name in g_one:
            torch.testing.assert_close(g_one[name], g_two[name], rtol=1e-10, atol=1e-12)

    def test_vision_encoder_never_trainable(self):
        params = set_trainable(self.model, FINETUNE_MASK)
        self.assertFalse(any(n.startswith("vision_encoder") for n in params))
        params = set_trainable(self.model, ALIGNMENT_MASK)
        self.assertTrue(all(n.startswith("alignment") for n in params))
        with self.assertRaises(ValueError):
            set_trainable(self.model, TrainabilityMask(vision_encoder=True))


def test_loss_matches_logsumexp_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(7, 11))
    targets = rng.integers(0, 11, size=7)
    mask = np.array([True, True, False, True, True, True, False])
    q = np.eye(11)[targets]
    expected = np.mean((logsumexp(logits, axis=1) - logits[np.arange(7), targets])[mask])
    value = loss(torch.tensor(logits), torch.tensor(q), torch.tensor(mask))
    assert float(value) == pytest.approx(expected, rel=1e-12)


def test_loss_rejects_bad_inputs():
    logits = torch.zeros((2, 4), dtype=torch.float64)
    q = torch.full((2, 4), 0.25, dtype=torch.float64)
    with pytest.raises(ValueError, match="no target positions"):
        loss(logits, q, [False, False])
    with pytest.raises(ValueError, match="probability vectors"):
        loss(logits, q * 2, [True, True])
    assert float(loss(logits, q, [True, True])) == pytest.approx(np.log(4))


def test_sequence_assembly():
    model = init_parameters(GRADCHECK_MODEL, 0)
    (sample,) = random_samples(GRADCHECK_MODEL, 1, seed=0)
    seq = assemble_sequence(model, sample)
    n = sequence_length(sample, GRADCHECK_MODEL.n_patches)
    assert n == 1 + len(sample.prompt) + GRADCHECK_MODEL.n_patches - 1 + len(sample.target)
    assert seq.embeddings.shape == (n, GRADCHECK_MODEL.d_model)
    assert int(seq.target_positions[-1]) == n - 2

    with pytest.raises(ValueError, match="IMG placeholder"):
        assemble_sequence(model, sample._replace(image=None))
    with pytest.raises(ValueError, match="exactly one IMG"):
        assemble_sequence(model, sample._replace(prompt=(IMG_ID,) + sample.prompt))
    long_target = (5,) * GRADCHECK_MODEL.context
    with pytest.raises(ValueError, match="context exceeded"):
        assemble_sequence(
            model, sample._replace(target=long_target, loss_mask=(True,) * len(long_target))
        )


def test_causal_logits():
    model = init_parameters(GRADCHECK_MODEL, 1)
    (sample,) = random_samples(GRADCHECK_MODEL, 1, seed=2, max_target=1)
    a = sample._replace(target=(6, 7), loss_mask=(True, True))
    b = sample._replace(target=(6, 9), loss_mask=(True, True))
    with torch.no_grad():
        la = forward(model, assemble_sequence(model, a).embeddings)
        lb = forward(model, assemble_sequence(model, b).embeddings)
    torch.testing.assert_close(la[:-1], lb[:-1], rtol=0, atol=1e-12)


def test_forward_rejects_non_finite():
    model = init_parameters(GRADCHECK_MODEL, 0)
    (sample,) = random_samples(GRADCHECK_MODEL, 1, seed=0)
    with torch.no_grad():
        model.lm_head.weight[0, 0] = float("nan")
    with pytest.raises(NumericalError):
        forward(model, assemble_sequence(model, sample).embeddings)


def test_greedy_decoding_stops_at_eos():
    model = always_eos(init_parameters(GRADCHECK_MODEL, 0))
    (sample,) = random_samples(GRADCHECK_MODEL, 1, seed=4)
    assert generate_greedy(model, sample, 5) == [EOS_ID]
    assert generate_greedy(model, sample, 0) == []


def test_candidate_scoring():
    model = init_parameters(GRADCHECK_MODEL, 2)
    prompt = (7, 8)
    scores = score_candidates(model, prompt, [(5,), (6, 9)])
    assert len(scores) == 2 and all(s < 0 for s in scores)
    assert scores == score_candidates(model, prompt, [(5,), (6, 9)])
    assert select_candidate([-1.0, -0.5, -0.5]) == 1
    with pytest.raises(ValueError, match="empty candidate"):
        score_candidates(model, prompt, [()])


def test_init_is_seeded():
    a = init_parameters(GRADCHECK_MODEL, 7)
    b = init_parameters(GRADCHECK_MODEL, 7)
    c = init_parameters(GRADCHECK_MODEL, 8)
    assert states_equal(a.state_dict(), b.state_dict())
    assert not states_equal(a.state_dict(), c.state_dict())
    single = init_parameters(GRADCHECK_MODEL.with_options(dtype="float32"), 7)
    torch.testing.assert_close(
        single.lm_head.weight, a.lm_head.weight.to(torch.float32), rtol=0, atol=0
    )
    assert component_digest(a, "vision_encoder") == component_digest(b, "vision_encoder")


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    model = init_parameters(cfg.model, 0)
    ckpt = make_checkpoint(model, "abc", initial_rng_state(3), metadata={"after_task": 1})
    path = save_checkpoint(ckpt, tmp_path / "ckpt" / "task_1.pt")
    loaded = load_checkpoint(path)
    assert loaded.model_config == cfg.model
    assert loaded.config_hash == "abc"
    assert loaded.metadata == {"after_task": 1}
    assert states_equal(loaded.state, ckpt.state)
    assert states_equal(load_model(loaded).state_dict(), model.state_dict())
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_draw_seed_advances_rng():
    model = init_parameters(GRADCHECK_MODEL, 0)
    ckpt = make_checkpoint(model, "abc", initial_rng_state(5))
    seed_a, next_a = draw_seed(ckpt)
    seed_b, next_b = draw_seed(ckpt)
    assert seed_a == seed_b and next_a.rng_state == next_b.rng_state
    assert next_a.rng_state != ckpt.rng_state
    seed_c, _ = draw_seed(next_a)
    assert seed_c != seed_a


def test_batch_padding_does_not_change_loss():
    model = init_parameters(GRADCHECK_MODEL, 3)
    short, long = random_samples(GRADCHECK_MODEL, 2, seed=9)
    long = long._replace(target=(5, 6, 7), loss_mask=(True, True, True))
    short = short._replace(target=(8,), loss_mask=(True,))
    v_pair, _ = loss_and_gradients(model, [short, long], FINETUNE_MASK, one_hot_targets)
    v_short, _ = loss_and_gradients(model, [short], FINETUNE_MASK, one_hot_targets)
    v_long, _ = loss_and_gradients(model, [long], FINETUNE_MASK, one_hot_targets)
    assert v_pair == pytest.approx((v_short * 1 + v_long * 3) / 4, rel=1e-10)


def test_text_only_sample():
    model = init_parameters(GRADCHECK_MODEL, 0)
    sample = Sample(prompt=(), target=(5, 6, EOS_ID), loss_mask=(True,) * 3)
    seq = assemble_sequence(model, sample)
    assert seq.embeddings.shape[0] == 4


if __name__ == "__main__":
    unittest.main()


def test_zero_image_maps_to_zero():
    cfg = GRADCHECK_MODEL
    model = init_parameters(cfg, 3)
    with torch.no_grad():
        visual = encode_image(model, np.zeros((cfg.n_patches, cfg.patch_dim)))
        assert visual.shape == (cfg.n_patches, cfg.vision_dim)
        assert torch.count_nonzero(visual) == 0
        aligned = align(model, visual)
    assert aligned.shape == (cfg.n_patches, cfg.d_model)
    assert torch.count_nonzero(aligned) == 0
    with pytest.raises(ValueError, match="shape mismatch"):
        encode_image(model, np.zeros((cfg.n_patches + 1, cfg.patch_dim)))
    with pytest.raises(ValueError, match="shape mismatch"):
        align(model, torch.zeros((cfg.n_patches, cfg.vision_dim + 1), dtype=torch.float64))


def test_softmax_rows_normalised():
    model = init_parameters(GRADCHECK_MODEL, 4)
    for sample in random_samples(GRADCHECK_MODEL, 5, seed=9):
        with torch.no_grad():
            logits = forward(model, assemble_sequence(model, sample).embeddings)
        sums = torch.softmax(logits, dim=-1).sum(-1)
        assert float((sums - 1).abs().max()) <= 1e-9


def test_loss_of_own_distribution_is_entropy():
    rng = np.random.default_rng(5)
    logits = torch.tensor(rng.normal(scale=2.0, size=(6, 16)))
    q = torch.softmax(logits, dim=-1)
    mask = [True] * 6
    entropy = float(-(q * torch.log(q)).sum(-1).mean())
    assert float(loss(logits, q, mask)) == pytest.approx(entropy, rel=1e-12)
    assert float(loss(logits + 3.0, q, mask)) == pytest.approx(entropy, rel=1e-12)
    for _ in range(20):
        other = logits + torch.tensor(rng.normal(scale=0.5, size=(6, 16)))
        assert float(loss(other, q, mask)) >= entropy - 1e-12


def test_greedy_continuation_scores_highest():
    model = init_parameters(GRADCHECK_MODEL, 6)
    vocab = GRADCHECK_MODEL.vocab_size
    prompt = (7, 8)
    query = Sample(prompt=prompt, target=(), loss_mask=())
    (first,) = generate_greedy(model, query, 1)
    scores = score_candidates(model, prompt, [(t,) for t in range(vocab)])
    assert scores[first] >= max(scores) - 1e-12

    # Position-independent logits: greedy repeats the argmax token
    rng = np.random.default_rng(8)
    logit_row = rng.normal(size=vocab)
    logit_row[EOS_ID] = -10.0
    with torch.no_grad():
        model.final_norm.weight.zero_()
        model.final_norm.bias.zero_()
        model.final_norm.bias[0] = 1.0
        model.lm_head.weight.zero_()
        model.lm_head.weight[:, 0] = torch.tensor(logit_row)
    greedy = tuple(generate_greedy(model, query, 3))
    best = int(np.argmax(logit_row))
    assert greedy == (best,) * 3
    toy = (best,) + tuple(t for t in range(5, vocab) if t != best)[:2]
    alternatives = list(itertools.product(toy, repeat=3))
    (top,) = score_candidates(model, prompt, [greedy])
    for alt, score in zip(alternatives, score_candidates(model, prompt, alternatives)):
        assert top >= score - 1e-12, alt


def test_identical_candidates_score_identically():
    model = init_parameters(GRADCHECK_MODEL, 2)
    scores = score_candidates(model, (9, 10), [(5, 6), (5, 6), (6, 5)])
    assert scores[0] == scores[1]
    assert select_candidate(scores[:2]) == 0
    assert select_candidate(score_candidates(model, (9, 10), [(6, 7)])) == 0
