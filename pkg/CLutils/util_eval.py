#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_eval.py                                                      #
#                                                                             #
# PURPOSE:  Accuracy, the harmonic-mean task score, the forgetting metric     #
#           and the report files of a run.                                    #
#                                                                             #
# REQUIRED: Requires numpy and scipy.                                         #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  EvalResult           ... correct/count of one dataset                      #
#  accuracy_generative  ... exact match of greedy output                      #
#  accuracy_multichoice ... argmax of length-normalised candidate scores      #
#  evaluate_dataset     ... dispatch on the dataset's scoring mode            #
#  task_score           ... harmonic mean, 0 if any accuracy is 0             #
#  forgetting_delta     ... reference score minus current score               #
#  split_report         ... NLU and NLG means and their drops                 #
#  MatrixRow            ... scores of one evaluation after task k             #
#  ForgettingMatrix     ... rows k = 1..T with first-learned references       #
#  serialize_report     ... report.csv + summary.json + run_manifest.json     #
#  load_report          ... rebuild a ForgettingMatrix from report.csv        #
#  comparison_table     ... side-by-side sweep table (CSV and Markdown)       #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import csv
import io
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy.stats import hmean
from tqdm.auto import tqdm

from CLutils.util_data import EOS_ID, GENERATIVE, MULTIPLE_CHOICE
from CLutils.util_misc import read_json, write_json
from CLutils.util_model import (
    Checkpoint,
    generate_greedy,
    load_model,
    score_candidates,
    select_candidate,
)

REPORT_COLUMNS = (
    "run_id",
    "after_task_k",
    "eval_task_t",
    "dataset",
    "mode",
    "n",
    "accuracy",
    "omega",
    "delta",
    "tag",
)
NL_TASK = 1
NL_TAGS = ("NLU", "NLG")


class EvalResult(NamedTuple):
    """Accuracy of one evaluation dataset"""

    dataset: str
    task_id: int
    """Task the dataset belongs to in the evaluated sequence"""
    mode: str
    tag: str
    n_correct: int
    n: int

    @property
    def accuracy(self):
        return self.n_correct / self.n


# -----------------------------------------------------------------------------#
def _as_model(model):
    return load_model(model) if isinstance(model, Checkpoint) else model


def _decoder(model):
    if callable(model) and not hasattr(model, "config"):
        return model
    model = _as_model(model).eval()
    return lambda sample, max_new: generate_greedy(model, sample, max_new)


def _scorer(model):
    if callable(model) and not hasattr(model, "config"):
        return model
    model = _as_model(model).eval()
    return lambda sample: score_candidates(
        model, sample.prompt, sample.candidates, sample.image
    )


def _truncate_at_eos(tokens):
    tokens = list(tokens)
    return tokens[: tokens.index(EOS_ID)] if EOS_ID in tokens else tokens


def accuracy_generative(model, dataset, task_id=None, verbose=False):
    """Fraction of test samples whose greedy output equals the target.

    Args:
        model: ToyMLLM, Checkpoint, or a callable (sample, max_new) -> ids.
        dataset (TaskDataset): Generative dataset with a test split.

    Kwargs:
        task_id (int): Task id recorded in the result [dataset.task_id].

    Returns:
        EvalResult
    """
    if dataset.mode != GENERATIVE:
        raise ValueError(f"{dataset.name} is not a generative dataset")
    if not dataset.test:
        raise ValueError(f"{dataset.name} has an empty test split")
    decode = _decoder(model)
    correct = 0
    for sample in tqdm(dataset.test, desc=dataset.name, disable=not verbose):
        out = _truncate_at_eos(decode(sample, len(sample.target)))
        correct += int(tuple(out) == tuple(sample.target))
    return EvalResult(
        dataset.name,
        dataset.task_id if task_id is None else task_id,
        dataset.mode,
        dataset.tag,
        correct,
        len(dataset.test),
    )


def accuracy_multichoice(model, dataset, task_id=None, verbose=False):
    """Fraction of test samples whose best-scoring candidate is the answer.

    model may be a ToyMLLM, a Checkpoint or a callable sample -> scores.
    """
    if dataset.mode != MULTIPLE_CHOICE:
        raise ValueError(f"{dataset.name} is not a multiple-choice dataset")
    if not dataset.test:
        raise ValueError(f"{dataset.name} has an empty test split")
    score = _scorer(model)
    correct = 0
    for sample in tqdm(dataset.test, desc=dataset.name, disable=not verbose):
        correct += int(select_candidate(score(sample)) == sample.answer_index)
    return EvalResult(
        dataset.name,
        dataset.task_id if task_id is None else task_id,
        dataset.mode,
        dataset.tag,
        correct,
        len(dataset.test),
    )


def evaluate_dataset(model, dataset, task_id=None, verbose=False):
    if dataset.mode == GENERATIVE:
        return accuracy_generative(model, dataset, task_id, verbose)
    return accuracy_multichoice(model, dataset, task_id, verbose)


# -----------------------------------------------------------------------------#
def task_score(accuracies):
    """Harmonic mean of a task's accuracies; 0 if any accuracy is 0."""
    accs = np.asarray(list(accuracies), dtype=np.float64)
    if accs.size == 0:
        raise ValueError("task score of an empty accuracy list")
    if ((accs < 0) | (accs > 1)).any():
        raise ValueError("accuracies must lie in [0, 1]")
    if (accs == 0).any():
        return 0.0
    return float(hmean(accs))


def forgetting_delta(reference, current):
    """Drop of a task score; negative values are backward transfer."""
    return reference - current


def _tag_means(results):
    means = {}
    for tag in NL_TAGS:
        accs = [r.accuracy for r in results if r.tag == tag]
        if not accs:
            raise ValueError(f"tag {tag} missing from the NL suite")
        means[tag] = float(np.mean(accs))
    return means


def split_report(nl_results, baseline_results):
    """Simple NLU and NLG means of the NL suite and their drops from the
    base-LM means."""
    for r in nl_results:
        if r.tag not in NL_TAGS:
            raise ValueError(f"NL dataset {r.dataset} has tag {r.tag}, not NLU/NLG")
    now = _tag_means(nl_results)
    base = _tag_means(baseline_results)
    return {
        "NLU": now["NLU"],
        "NLG": now["NLG"],
        "NLU_delta": forgetting_delta(base["NLU"], now["NLU"]),
        "NLG_delta": forgetting_delta(base["NLG"], now["NLG"]),
    }


# -----------------------------------------------------------------------------#
class MatrixRow(NamedTuple):
    """Evaluation after learning task k"""

    after_task: int
    results: Tuple[EvalResult, ...]
    omega: Dict[int, float]
    """Score of every evaluated task"""
    delta: Dict[int, float]
    """Drop of every evaluated task from its first-learned score"""
    nl_split: Dict[str, float]
    learned: str = ""
    """Name of the task learned just before this evaluation"""

    def task_results(self, task_id):
        return [r for r in self.results if r.task_id == task_id]

    def vl_results(self):
        return [r for r in self.results if r.task_id != NL_TASK]

    def summary(self):
        """Per-row entries of the continual table."""
        just = self.task_results(self.after_task) if self.after_task != NL_TASK else []
        vl = self.vl_results()
        return {
            "after_task": self.after_task,
            "learned": self.learned,
            "omega": {str(t): v for t, v in sorted(self.omega.items())},
            "delta": {str(t): v for t, v in sorted(self.delta.items())},
            "vl_just_learned": task_score([r.accuracy for r in just]) if just else None,
            "vl_cumulative": task_score([r.accuracy for r in vl]) if vl else None,
            "vl_accuracy": {r.dataset: r.accuracy for r in vl},
            "nl_omega": self.omega[NL_TASK],
            "nl_delta": self.delta[NL_TASK],
            "nl_split": self.nl_split,
        }


class ForgettingMatrix:
    """Rows k = 1..T of a run.

    The reference score of a task is its score in the first row that
    evaluates it, which must be the row written right after learning it.
    """

    def __init__(self, rows=()):
        self.rows = list(rows)

    def __len__(self):
        return len(self.rows)

    def references(self):
        refs = {}
        for row in self.rows:
            for task, omega in row.omega.items():
                refs.setdefault(task, omega)
        return refs

    def baseline_nl(self):
        if not self.rows or self.rows[0].after_task != NL_TASK:
            raise ValueError("missing baseline: no row for the base LM (k = 1)")
        return self.rows[0].task_results(NL_TASK)

    def build_row(self, after_task, results, learned=""):
        """Score a set of results against the rows so far (pure)."""
        if self.rows and after_task <= self.rows[-1].after_task:
            raise ValueError(f"row k={after_task} does not follow k={self.rows[-1].after_task}")
        by_task = {}
        for r in results:
            by_task.setdefault(r.task_id, []).append(r)
        if NL_TASK not in by_task:
            raise ValueError("every row evaluates the NL suite")
        refs = self.references()
        omega, delta = {}, {}
        for task in sorted(by_task):
            omega[task] = task_score([r.accuracy for r in by_task[task]])
            if task not in refs:
                if task != after_task:
                    raise ValueError(
                        f"missing baseline for task {task} (first evaluated after task {after_task})"
                    )
                refs[task] = omega[task]
            delta[task] = forgetting_delta(refs[task], omega[task])
        nl = by_task[NL_TASK]
        baseline = nl if after_task == NL_TASK and not self.rows else self.baseline_nl()
        return MatrixRow(
            after_task=after_task,
            results=tuple(results),
            omega=omega,
            delta=delta,
            nl_split=split_report(nl, baseline),
            learned=learned,
        )

    def add_row(self, after_task, results, learned=""):
        row = self.build_row(after_task, results, learned)
        self.rows.append(row)
        return row


# -----------------------------------------------------------------------------#
def _fmt(x):
    return "" if x is None else f"{x:.4f}"


def _rounded(obj):
    """Floats of a summary rendered to 4 decimals."""
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, float):
        return float(_fmt(obj))
    return obj


def report_csv_text(matrix, run_id):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in matrix.rows:
        for r in row.results:
            writer.writerow(
                [
                    run_id,
                    row.after_task,
                    r.task_id,
                    r.dataset,
                    r.mode,
                    r.n,
                    repr(float(r.accuracy)),
                    _fmt(row.omega[r.task_id]),
                    _fmt(row.delta[r.task_id]),
                    r.tag,
                ]
            )
    return buf.getvalue()


def serialize_report(matrix, manifest, out_dir, run_id):
    """Write report.csv, summary.json and run_manifest.json.

    Accuracies are written at full precision so that omega and delta can be
    recomputed from report.csv alone; every other number has 4 decimals.

    report.csv and summary.json depend only on the matrix and run_id;
    timestamps go to run_manifest.json.
    """
    if not matrix.rows:
        raise ValueError("cannot serialise an empty forgetting matrix")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as f:
        f.write(report_csv_text(matrix, run_id))
    summary = {
        "run_id": run_id,
        "config_hash": manifest.get("config_hash"),
        "rows": [_rounded(row.summary()) for row in matrix.rows],
    }
    write_json(out_dir / "summary.json", summary)
    write_json(out_dir / "run_manifest.json", manifest)
    return out_dir / "report.csv", out_dir / "summary.json"


def load_report(path):
    """Rebuild a ForgettingMatrix from report.csv.

    Correct counts are recovered as round(accuracy * n), so scores are
    recomputed from exact fractions.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "report.csv"
    if not path.exists():
        raise FileNotFoundError(f"Report not found: {path}")
    with open(path, newline="") as f:
        records = list(csv.DictReader(f))
    grouped = {}
    for rec in records:
        n = int(rec["n"])
        result = EvalResult(
            dataset=rec["dataset"],
            task_id=int(rec["eval_task_t"]),
            mode=rec["mode"],
            tag=rec["tag"],
            n_correct=int(round(float(rec["accuracy"]) * n)),
            n=n,
        )
        grouped.setdefault(int(rec["after_task_k"]), []).append(result)
    matrix = ForgettingMatrix()
    for k in sorted(grouped):
        matrix.add_row(k, grouped[k])
    run_id = records[0]["run_id"] if records else ""
    return matrix, run_id


def load_summary(run_dir):
    return read_json(Path(run_dir) / "summary.json")


# -----------------------------------------------------------------------------#
class ComparisonRow(NamedTuple):
    """One model of a sweep table"""

    label: str
    vl_accuracy: Dict[str, float]
    nl_omega: float
    nl_delta: Optional[float]

    @property
    def vl_avg(self):
        return task_score(self.vl_accuracy.values()) if self.vl_accuracy else None


def comparison_row(label, matrix):
    """Final row of a run as a sweep-table entry."""
    last = matrix.rows[-1]
    return ComparisonRow(
        label=label,
        vl_accuracy={r.dataset: r.accuracy for r in last.vl_results()},
        nl_omega=last.omega[NL_TASK],
        nl_delta=last.delta[NL_TASK],
    )


def comparison_table(rows, out_dir, stem="sweep_table"):
    """Write a sweep table as CSV and Markdown, values in percent.

    Returns:
        (csv path, markdown path)
    """
    if not rows:
        raise ValueError("sweep table needs at least one row")
    datasets = []
    for row in rows:
        datasets += [d for d in row.vl_accuracy if d not in datasets]
    header = ["Model"] + datasets + ["VL Avg", "NL Avg", "NL Delta"]

    def pct(x):
        return "" if x is None else f"{100 * x:.2f}"

    lines = []
    for row in rows:
        lines.append(
            [row.label]
            + [pct(row.vl_accuracy.get(d)) for d in datasets]
            + [pct(row.vl_avg), pct(row.nl_omega), pct(row.nl_delta)]
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(lines)
    md_path = out_dir / f"{stem}.md"
    with open(md_path, "w") as f:
        f.write("| " + " | ".join(header) + " |\n")
        f.write("|" + "|".join("---" for _ in header) + "|\n")
        for line in lines:
            f.write("| " + " | ".join(line) + " |\n")
    return csv_path, md_path
