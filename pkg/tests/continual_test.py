#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""End-to-end tests of pretraining, the two-task protocol and the continual
sequence on a tiny configuration"""

import logging
import shutil
from functools import lru_cache

import pytest

from CLutils.util_config import MethodSpec, RehearsalConfig, pretrain_hash
from CLutils.util_continual import (
    MIXTURE_KIND,
    build_task_sequence,
    nl_floor,
    pretrain_base_lm,
    run_continual,
    run_sequence,
    run_two_task,
)
from CLutils.util_eval import NL_TASK
from CLutils.util_misc import ConfigError, PretrainFloorError
from CLutils.util_mitigation import RehearsalBuffer
from CLutils.util_model import component_digest, load_checkpoint, states_equal
from CLutils.util_testing import tiny_bundle, tiny_config

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@lru_cache(maxsize=None)
def pretrained():
    cfg = tiny_config()
    bundle = tiny_bundle(cfg)
    return pretrain_base_lm(cfg, bundle.pretrain, bundle.nl_suite)


# -----------------------------------------------------------------------------#
def test_task_sequences():
    vl = tiny_bundle().vl_tasks
    continual = build_task_sequence("continual", vl, 0)
    assert [t.task_id for t in continual.tasks] == [1, 2, 3, 4, 5]
    assert [t.name for t in continual.tasks[1:]] == [
        "caption_instruct",
        "vqa",
        "ocr",
        "refgrounding",
    ]
    assert continual.tasks[1].eval_sets == ()
    assert continual.tasks[2].eval_sets == (vl[1],)

    two = build_task_sequence("two_task", vl, 0)
    assert len(two.tasks) == 2
    mixture = two.tasks[1].dataset
    assert mixture.kind == MIXTURE_KIND and mixture.task_id == 2
    assert len(mixture.train) == sum(len(d.train) for d in vl)
    assert mixture.alignment == vl[0].alignment
    assert [d.name for d in two.tasks[1].eval_sets] == ["vqa", "ocr", "refgrounding"]
    again = build_task_sequence("two_task", vl, 0).tasks[1].dataset.train
    assert all(a is b for a, b in zip(mixture.train, again))
    other = build_task_sequence("two_task", vl, 1).tasks[1].dataset.train
    assert any(a is not b for a, b in zip(mixture.train, other))

    with pytest.raises(ValueError, match="missing vision-language"):
        build_task_sequence("continual", vl[:3], 0)
    with pytest.raises(ValueError, match="unknown mode"):
        build_task_sequence("three_task", vl, 0)


def test_nl_floor():
    cfg = tiny_config().pretrain
    floors = {d.name: nl_floor(d, cfg) for d in tiny_bundle().nl_suite}
    assert floors["cloze"] == 0.30
    assert floors["agreement"] == floors["adjective"] == 0.5
    assert floors["coreference"] == floors["plausibility"] == 0.75


# -----------------------------------------------------------------------------#
def test_pretrain_records_baseline():
    cfg = tiny_config()
    bundle = tiny_bundle(cfg)
    base, results = pretrained()
    assert base.config_hash == pretrain_hash(cfg)
    assert base.metadata["after_task"] == NL_TASK
    assert 1 <= base.metadata["steps"] <= cfg.pretrain.max_steps
    assert [r["dataset"] for r in base.metadata["nl_baseline"]] == [
        d.name for d in bundle.nl_suite
    ]
    again, _ = pretrain_base_lm(cfg, bundle.pretrain, bundle.nl_suite)
    assert states_equal(base.state, again.state)
    assert results == pretrain_base_lm(cfg, bundle.pretrain, bundle.nl_suite)[1]


def test_pretrain_floor():
    cfg = tiny_config()
    bundle = tiny_bundle(cfg)
    strict = cfg.with_options(
        pretrain=cfg.pretrain.with_options(max_steps=2, nlg_floor=1.01, require_floor=True)
    )
    with pytest.raises(PretrainFloorError, match="cloze"):
        pretrain_base_lm(strict, bundle.pretrain, bundle.nl_suite)

    messages = []
    lenient = strict.with_options(pretrain=strict.pretrain.with_options(require_floor=False))
    base, _ = pretrain_base_lm(lenient, bundle.pretrain, bundle.nl_suite, log=messages.append)
    assert base.metadata["steps"] == 2
    assert any(m.startswith("Warn: base LM below") for m in messages)

    with pytest.raises(ValueError, match="at least one step"):
        pretrain_base_lm(cfg, bundle.pretrain, bundle.nl_suite, steps_cap=0)


# -----------------------------------------------------------------------------#
def test_continual_rows():
    cfg = tiny_config()
    base, _ = pretrained()
    matrix, final = run_continual(base, tiny_bundle(cfg), cfg)
    assert [row.after_task for row in matrix.rows] == [1, 2, 3, 4, 5]
    assert matrix.rows[0].delta[NL_TASK] == 0.0
    assert matrix.rows[1].vl_results() == []
    for row in matrix.rows[2:]:
        k = row.after_task
        assert sorted(row.omega) == [1] + list(range(3, k + 1))
        assert row.delta[k] == 0.0
    assert [r.dataset for r in matrix.rows[4].vl_results()] == ["vqa", "ocr", "refgrounding"]
    assert final.metadata["after_task"] == 5
    assert component_digest(final.state, "vision_encoder") == component_digest(
        base.state, "vision_encoder"
    )


def test_two_task_rows():
    cfg = tiny_config(mode="two_task")
    base, _ = pretrained()
    matrix, _ = run_sequence(base, tiny_bundle(cfg), cfg)
    assert [row.after_task for row in matrix.rows] == [1, 2]
    last = matrix.rows[1]
    assert {r.dataset for r in last.vl_results()} == {"vqa", "ocr", "refgrounding"}
    assert all(r.task_id == 2 for r in last.vl_results())
    assert last.delta[2] == 0.0

    with pytest.raises(ValueError, match="missing baseline"):
        run_two_task(base.with_options(metadata={}), tiny_bundle(cfg), cfg)


def test_rehearsal_buffer_timeline(tmp_path):
    method = MethodSpec(variant="rehearsal", rehearsal=RehearsalConfig(fraction=0.1))
    cfg = tiny_config(method=method)
    base, _ = pretrained()
    run_continual(base, tiny_bundle(cfg), cfg, run_dir=tmp_path)
    geometry = cfg.model.n_patches, cfg.model.patch_dim
    after_2 = load_checkpoint(tmp_path / "checkpoints" / "task_2.pt")
    after_4 = load_checkpoint(tmp_path / "checkpoints" / "task_4.pt")
    assert RehearsalBuffer.from_state(after_2.metadata["buffer"], *geometry).sizes() == {2: 5}
    buffer = RehearsalBuffer.from_state(after_4.metadata["buffer"], *geometry)
    assert buffer.task_ids() == [2, 3, 4]
    assert all(s.task_id in (2, 3, 4) for s in buffer.samples())


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_config(method=MethodSpec(variant="msgm_rehearsal"))
    base, _ = pretrained()
    bundle = tiny_bundle(cfg)
    full = tmp_path / "full"
    matrix, final = run_continual(base, bundle, cfg, run_dir=full)

    cut = tmp_path / "cut"
    shutil.copytree(full, cut)
    for k in (4, 5):
        (cut / "checkpoints" / f"task_{k}.pt").unlink()
    messages = []
    resumed, resumed_final = run_continual(base, bundle, cfg, run_dir=cut, log=messages.append)
    assert any("Resuming after task 3" in m for m in messages)
    assert [row.results for row in resumed.rows] == [row.results for row in matrix.rows]
    assert states_equal(resumed_final.state, final.state)
    for name in ("matrix_rows.jsonl", "metrics.csv"):
        assert (cut / name).read_bytes() == (full / name).read_bytes()

    other = cfg.with_options(method=MethodSpec(variant="naive"))
    with pytest.raises(ConfigError, match="different configuration"):
        run_continual(base, bundle, other, run_dir=full)


def test_resume_needs_checkpoint_and_row(tmp_path):
    cfg = tiny_config()
    base, _ = pretrained()
    bundle = tiny_bundle(cfg)
    full = tmp_path / "full"
    matrix, final = run_continual(base, bundle, cfg, run_dir=full)

    # Killed after row 5 was written but before task_5.pt was saved
    row_only = tmp_path / "row_only"
    shutil.copytree(full, row_only)
    (row_only / "checkpoints" / "task_5.pt").unlink()
    messages = []
    resumed, _ = run_continual(base, bundle, cfg, run_dir=row_only, log=messages.append)
    assert any("Resuming after task 4" in m for m in messages)
    assert [row.results for row in resumed.rows] == [row.results for row in matrix.rows]

    # task_4.pt without its row: task 4 is redone from task_3.pt
    no_row = tmp_path / "no_row"
    shutil.copytree(full, no_row)
    (no_row / "checkpoints" / "task_5.pt").unlink()
    rows = (no_row / "matrix_rows.jsonl").read_text().splitlines(keepends=True)
    (no_row / "matrix_rows.jsonl").write_text("".join(rows[:3]))
    messages = []
    resumed, resumed_final = run_continual(base, bundle, cfg, run_dir=no_row, log=messages.append)
    assert any("Resuming after task 3" in m for m in messages)
    assert [row.after_task for row in resumed.rows] == [1, 2, 3, 4, 5]
    assert [row.results for row in resumed.rows] == [row.results for row in matrix.rows]
    assert states_equal(resumed_final.state, final.state)
    assert (no_row / "matrix_rows.jsonl").read_bytes() == (full / "matrix_rows.jsonl").read_bytes()
