#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Tests for accuracies, task scores and the forgetting matrix in
CLutils.util_eval"""

import csv
import json
import logging

import numpy as np
import pytest
from scipy.stats import hmean

from CLutils.util_data import EOS_ID, build_vocabulary, generate_vl_task, solve_from_scene
from CLutils.util_eval import (
    ComparisonRow,
    EvalResult,
    ForgettingMatrix,
    accuracy_generative,
    accuracy_multichoice,
    comparison_table,
    forgetting_delta,
    load_report,
    serialize_report,
    split_report,
    task_score,
)
from CLutils.util_testing import tiny_bundle

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

NL_NAMES = ("cloze", "agreement", "adjective", "coreference", "plausibility")


def nl_results(correct, n=100):
    """NL-suite results from five correct counts (cloze first)."""
    return [
        EvalResult(name, 1, "mc", "NLG" if name == "cloze" else "NLU", c, n)
        for name, c in zip(NL_NAMES, correct)
    ]


def vl_result(name, task_id, correct, n=50):
    return EvalResult(name, task_id, "generative_exact_match", "VL", correct, n)


def example_matrix():
    matrix = ForgettingMatrix()
    matrix.add_row(1, nl_results([40, 60, 55, 70, 80]), "pretrain")
    matrix.add_row(2, nl_results([38, 58, 55, 69, 80]), "caption_instruct")
    matrix.add_row(3, nl_results([35, 57, 50, 66, 77]) + [vl_result("vqa", 3, 40)], "vqa")
    matrix.add_row(
        4,
        nl_results([30, 50, 52, 60, 75]) + [vl_result("vqa", 3, 31), vl_result("ocr", 4, 20)],
        "ocr",
    )
    return matrix


# -----------------------------------------------------------------------------#
def test_task_score_examples():
    assert task_score([0.5, 0.5]) == pytest.approx(0.5)
    assert task_score([0.5, 1.0]) == pytest.approx(2 / 3)
    assert task_score([0.9, 0.0]) == 0.0
    with pytest.raises(ValueError):
        task_score([])
    with pytest.raises(ValueError):
        task_score([0.5, -0.1])
    with pytest.raises(ValueError, match="must lie in"):
        task_score([0.5, 1.2])
    assert task_score([1.0, 1.0]) == 1.0


def test_task_score_bounds():
    rng = np.random.default_rng(1)
    for _ in range(200):
        accs = rng.uniform(0.01, 1.0, size=int(rng.integers(1, 8)))
        score = task_score(accs)
        assert score == pytest.approx(len(accs) / np.sum(1.0 / accs), rel=1e-12)
        assert score == pytest.approx(hmean(accs), rel=1e-12)
        assert accs.min() - 1e-12 <= score <= accs.mean() + 1e-12


def test_forgetting_delta():
    assert round(forgetting_delta(32.61, 24.78), 2) == 7.83
    assert round(forgetting_delta(32.61, 30.92), 2) == 1.69
    assert round(forgetting_delta(32.61, 29.78), 2) == 2.83
    assert forgetting_delta(0.4, 0.4) == 0.0
    assert forgetting_delta(0.3, 0.5) == -forgetting_delta(0.5, 0.3)
    assert 100 * forgetting_delta(0.3261, 0.2478) == pytest.approx(
        forgetting_delta(32.61, 24.78), abs=1e-12
    )


def test_split_report():
    base = nl_results([40, 40, 60, 50, 50])
    now = nl_results([30, 40, 60, 50, 50])
    split = split_report(now, base)
    assert split["NLU"] == pytest.approx(0.5)
    assert split["NLG"] == pytest.approx(0.3)
    assert split["NLU_delta"] == pytest.approx(0.0)
    assert split["NLG_delta"] == pytest.approx(0.1)
    with pytest.raises(ValueError, match="tag NLG missing"):
        split_report(now[1:], base)


# -----------------------------------------------------------------------------#
def test_accuracy_generative_degenerate_models():
    vocab = build_vocabulary(0, 256)
    vqa = generate_vl_task("vqa", vocab, 0, 16, n_test=256)
    eos = accuracy_generative(lambda sample, max_new: [EOS_ID], vqa)
    assert eos.accuracy == 0.0 and eos.n == 256
    oracle = accuracy_generative(
        lambda sample, max_new: list(solve_from_scene(sample, vocab)), vqa
    )
    assert oracle.accuracy == 1.0

    lucky = {id(s) for s in vqa.test[:7]}

    def seven(sample, max_new):
        return list(sample.target) if id(sample) in lucky else [EOS_ID]

    result = accuracy_generative(seven, vqa)
    assert result.n_correct == 7 and result.accuracy == 7 / 256

    with pytest.raises(ValueError, match="empty test split"):
        accuracy_generative(seven, vqa._replace(test=()))


def test_generation_truncates_at_eos():
    vocab = build_vocabulary(0, 256)
    ocr = generate_vl_task("ocr", vocab, 1, 8, n_test=10)
    result = accuracy_generative(lambda s, m: list(s.target) + [EOS_ID, 9], ocr)
    assert result.accuracy == 1.0


def test_accuracy_multichoice():
    suite = tiny_bundle().nl_suite
    agreement = suite[1]
    uniform = accuracy_multichoice(lambda s: [0.0] * len(s.candidates), agreement)
    expected = sum(s.answer_index == 0 for s in agreement.test)
    assert uniform.n_correct == expected
    assert uniform == accuracy_multichoice(lambda s: [0.0] * len(s.candidates), agreement)

    single = agreement._replace(
        test=tuple(
            s._replace(candidates=(s.target,), answer_index=0) for s in agreement.test
        )
    )
    assert accuracy_multichoice(lambda s: [-1.0], single).accuracy == 1.0
    with pytest.raises(ValueError, match="not a multiple-choice"):
        accuracy_multichoice(lambda s: [0.0], suite[0])


# -----------------------------------------------------------------------------#
def test_matrix_rows():
    matrix = example_matrix()
    first, second, third, fourth = matrix.rows
    assert first.delta == {1: 0.0}
    assert second.vl_results() == []
    assert third.delta[3] == 0.0
    assert fourth.delta[3] == pytest.approx(0.8 - 0.62)
    assert fourth.delta[4] == 0.0
    nl_ref = task_score([0.4, 0.6, 0.55, 0.7, 0.8])
    nl_now = task_score([0.3, 0.5, 0.52, 0.6, 0.75])
    assert fourth.delta[1] == pytest.approx(nl_ref - nl_now, abs=1e-15)
    summary = fourth.summary()
    assert summary["vl_just_learned"] == pytest.approx(0.4)
    assert summary["vl_cumulative"] == pytest.approx(hmean([0.62, 0.4]))


def test_matrix_errors():
    matrix = example_matrix()
    with pytest.raises(ValueError, match="does not follow"):
        matrix.build_row(4, nl_results([1, 1, 1, 1, 1]))
    with pytest.raises(ValueError, match="missing baseline"):
        matrix.build_row(5, nl_results([1, 1, 1, 1, 1]) + [vl_result("x", 6, 3)])
    with pytest.raises(ValueError, match="NL suite"):
        matrix.build_row(5, [vl_result("refgrounding", 5, 3)])
    with pytest.raises(ValueError, match="missing baseline"):
        ForgettingMatrix().build_row(2, nl_results([1, 1, 1, 1, 1]))


def test_serialize_and_reload(tmp_path):
    matrix = example_matrix()
    a = serialize_report(matrix, {"config_hash": "abc", "created": "t0"}, tmp_path / "a", "run")
    b = serialize_report(matrix, {"config_hash": "abc", "created": "t1"}, tmp_path / "b", "run")
    assert a[0].read_bytes() == b[0].read_bytes()
    assert a[1].read_bytes() == b[1].read_bytes()

    with open(a[0], newline="") as f:
        records = list(csv.DictReader(f))
    assert len(records) == sum(len(row.results) for row in matrix.rows) == 23

    loaded, run_id = load_report(tmp_path / "a")
    assert run_id == "run" and len(loaded) == 4
    for old, new in zip(matrix.rows, loaded.rows):
        assert old.omega.keys() == new.omega.keys()
        for t in old.delta:
            assert abs(old.delta[t] - new.delta[t]) <= 1e-9
            assert abs(old.omega[t] - new.omega[t]) <= 1e-9


def test_comparison_table(tmp_path):
    rows = [
        ComparisonRow("Base", {"vqa": 0.0, "ocr": 0.0}, 0.3261, 0.0),
        ComparisonRow("Naive", {"vqa": 0.5, "ocr": 0.25}, 0.2478, 0.0783),
    ]
    csv_path, md_path = comparison_table(rows, tmp_path)
    with open(csv_path, newline="") as f:
        table = list(csv.reader(f))
    assert table[0] == ["Model", "vqa", "ocr", "VL Avg", "NL Avg", "NL Delta"]
    assert table[1] == ["Base", "0.00", "0.00", "0.00", "32.61", "0.00"]
    assert table[2] == ["Naive", "50.00", "25.00", "33.33", "24.78", "7.83"]
    assert md_path.read_text().startswith("| Model | vqa | ocr |")


def test_report_reproducible_from_csv(tmp_path):
    """omega and delta recomputed from the accuracy column alone."""
    rng = np.random.default_rng(7)
    for trial in range(50):
        matrix = ForgettingMatrix()
        matrix.add_row(1, nl_results(rng.integers(1, 257, size=5), n=256), "pretrain")
        matrix.add_row(2, nl_results(rng.integers(1, 257, size=5), n=256), "caption_instruct")
        matrix.add_row(
            3,
            nl_results(rng.integers(1, 257, size=5), n=256)
            + [vl_result("vqa", 3, int(rng.integers(1, 257)), n=256)],
            "vqa",
        )
        csv_path, summary_path = serialize_report(matrix, {}, tmp_path / str(trial), "run")
        with open(csv_path, newline="") as f:
            records = list(csv.DictReader(f))
        groups = {}
        for rec in records:
            key = (int(rec["after_task_k"]), int(rec["eval_task_t"]))
            groups.setdefault(key, []).append(rec)
        omegas, refs = {}, {}
        for (k, t), recs in sorted(groups.items()):
            om = hmean([float(rec["accuracy"]) for rec in recs])
            omegas[k, t] = om
            refs.setdefault(t, om)
            for rec in recs:
                assert rec["omega"] == f"{om:.4f}"
                assert rec["delta"] == f"{refs[t] - om:.4f}"
        for (k, t), om in omegas.items():
            assert abs(matrix.rows[k - 1].omega[t] - om) <= 1e-12

        summary = json.loads(summary_path.read_text())
        last = summary["rows"][-1]
        assert last["nl_omega"] == float(f"{omegas[3, 1]:.4f}")
        assert last["vl_accuracy"]["vqa"] == float(f"{matrix.rows[2].vl_results()[0].accuracy:.4f}")
