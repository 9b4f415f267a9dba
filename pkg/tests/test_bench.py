"""Harness: dataset loading, voting, benchmark execution, reports."""

from __future__ import annotations

import itertools
import json
from collections import Counter

import numpy as np
import pytest

from refinectl.backend import MockBackend
from refinectl.bench import (
    DatasetError,
    Problem,
    ReportRow,
    RunSpec,
    conf_filtered_vote,
    correct_letter,
    emit_report,
    fold_change,
    is_correct,
    load_dataset,
    load_report,
    majority_vote,
    presented_choices,
    run_benchmark,
)
from refinectl.controller import Action

from conftest import StubController, boxed_record, mock_backend


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")


def test_load_wellformed_dataset(tmp_path):
    rows = [{"id": f"p{i}", "statement": f"problem {i}", "answer": str(i)}
            for i in range(30)]
    path = tmp_path / "d.jsonl"
    write_jsonl(path, rows)
    problems = load_dataset(path)
    assert len(problems) == 30
    assert problems[7].ground_truth == "7"


def test_mcq_ground_truth_must_be_a_choice(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [{"id": "q", "statement": "s", "answer": "nope",
                        "mode": "mcq", "choices": ["a", "b"]}])
    with pytest.raises(DatasetError, match="d.jsonl:1"):
        load_dataset(path)


def test_duplicate_ids_rejected(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [{"id": "p", "statement": "s", "answer": "1"},
                       {"id": "p", "statement": "s2", "answer": "2"}])
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(path)


def test_unsure_choice_detected(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [{"id": "q", "statement": "s", "answer": "b", "mode": "mcq",
                        "choices": ["a", "b", "Insufficient information to answer"]}])
    problem = load_dataset(path)[0]
    assert problem.unsure_choice_present
    assert problem.unsure_index() == 2


def test_choice_randomization_tracks_ground_truth(rng):
    problem = Problem(id="q", statement="s", ground_truth="beta", mode="mcq",
                      choices=("alpha", "beta", "gamma", "delta"))
    seen = set()
    for _ in range(10):
        pres = presented_choices(problem, rng)
        letter = correct_letter(problem, pres)
        seen.add(letter)
        assert pres[ord(letter) - 65] == "beta"
    assert len(seen) > 1  # the shuffle actually moves the answer around


# ---------------------------------------------------------------------------
# voting
# ---------------------------------------------------------------------------

def test_majority_basic_and_tie():
    assert majority_vote(["A", "A", "B"]) == "A"
    assert majority_vote(["A", "B"]) == "A"  # lexicographic tie rule
    assert majority_vote([None, "", None]) is None


def test_majority_matches_counting_oracle(rng):
    symbols = np.array(["A", "B", "C"])
    for _ in range(30):
        answers = list(rng.choice(symbols, size=512, p=[0.5, 0.3, 0.2]))
        counts = Counter(answers)
        top = max(counts.values())
        oracle = sorted(a for a, c in counts.items() if c == top)[0]
        assert majority_vote(answers) == oracle


def test_conf_filtered_keep_fraction():
    traces = [("A", 16.0), ("A", 15.0), ("B", 9.0)]
    assert conf_filtered_vote(traces, keep_fraction=2 / 3) == "A"
    # keeping everything, B still loses 1-2
    assert conf_filtered_vote(traces, keep_fraction=1.0) == "A"


def test_exclude_band_drops_confident_refusal():
    traces = [("D", 10.0), ("D", 11.0), ("Unsure", 13.0)]
    # the conf-13 trace falls above the exclusion ceiling and casts no vote
    assert conf_filtered_vote(traces, exclude_max=11.5) == "D"
    kept_all = conf_filtered_vote([("Unsure", 13.0)] * 3 + [("D", 10.0)],
                                  exclude_max=11.5)
    assert kept_all == "D"


def test_exclude_min():
    traces = [("A", 5.0), ("B", 13.0)]
    assert conf_filtered_vote(traces, exclude_min=12.0) == "B"


def test_all_excluded_returns_none():
    assert conf_filtered_vote([("A", 5.0)], exclude_min=10.0) is None


def test_weighted_single_trace():
    assert conf_filtered_vote([("Z", 4.0)], keep_fraction=1.0, weighted=True) == "Z"


def test_weighted_vote_uses_confidence_mass():
    traces = [("A", 5.0), ("A", 5.0), ("B", 11.0)]
    assert conf_filtered_vote(traces, weighted=True) == "B"
    assert conf_filtered_vote(traces, weighted=False) == "A"


def test_equivalence_with_majority_on_exhaustive_multisets(rng):
    symbols = ("A", "B", "C")
    for size in range(0, 7):
        for combo in itertools.combinations_with_replacement(symbols, size):
            confs = rng.uniform(5, 20, size=size)
            traces = list(zip(combo, confs))
            assert conf_filtered_vote(traces, keep_fraction=1.0, weighted=False) \
                == majority_vote(list(combo)), combo


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_math_scoring_normalizes():
    problem = Problem(id="p", statement="s", ground_truth="42")
    assert is_correct(problem, " {42} ")
    assert not is_correct(problem, "41")
    assert not is_correct(problem, None)


def test_unanswerable_scores_refusal_as_correct():
    problem = Problem(id="p", statement="s", ground_truth="42", unanswerable=True)
    assert is_correct(problem, None)


def test_mcq_scoring_uses_presentation():
    problem = Problem(id="q", statement="s", ground_truth="beta", mode="mcq",
                      choices=("alpha", "beta"))
    assert is_correct(problem, "B")
    assert is_correct(problem, "A", presentation=("beta", "alpha"))


# ---------------------------------------------------------------------------
# run_benchmark
# ---------------------------------------------------------------------------

def three_problem_dataset():
    return [Problem(id=f"p{i}", statement=f"q{i}", ground_truth=str(i))
            for i in range(3)]


def test_pass1_accuracy_and_tokens():
    made = []

    def factory(seed):
        backend = MockBackend([boxed_record(str(i), [12.0] * (10 + i))
                               for i in range(3)])
        made.append(backend)
        return backend

    spec = RunSpec(method="pass1", seeds=(0,))
    row = run_benchmark(three_problem_dataset(), spec, backend=None,
                        backend_factory=factory, dataset_name="toy")
    assert row.accuracy_mean == 100.0
    assert row.accuracy_std == 0.0
    assert row.tokens_total == 10 + 11 + 12
    assert row.iterations_mean == 1.0


def test_majority_sequential_issues_exactly_3k_calls():
    k = 3
    backends = []

    def factory(seed):
        backend = MockBackend([boxed_record("1", [12.0] * 5) for _ in range(3 * k)])
        backends.append(backend)
        return backend

    spec = RunSpec(method="majority_sequential", k=k, seeds=(0,))
    run_benchmark(three_problem_dataset(), spec, backend=None, backend_factory=factory)
    assert backends[0].remaining == 0  # 3 problems x K calls, no more, no fewer


def test_majority_parallel_votes():
    def factory(seed):
        records = []
        for _ in range(3):  # per problem: 2 votes for the truth, 1 against
            records += [boxed_record("7", [12.0] * 5), boxed_record("7", [12.0] * 5),
                        boxed_record("0", [12.0] * 5)]
        return MockBackend(records)

    dataset = [Problem(id=f"p{i}", statement="q", ground_truth="7") for i in range(3)]
    spec = RunSpec(method="majority_parallel", k=3, seeds=(0, 1))
    row = run_benchmark(dataset, spec, backend=None, backend_factory=factory)
    assert row.accuracy_mean == 100.0
    assert row.tokens_total == 2 * 3 * 3 * 5


def test_conf_filtered_method():
    def factory(seed):
        return MockBackend([boxed_record("9", [16.0] * 5), boxed_record("9", [15.0] * 5),
                            boxed_record("0", [6.0] * 5)])

    dataset = [Problem(id="p", statement="q", ground_truth="9")]
    spec = RunSpec(method="conf_filtered", k=3, seeds=(0,), keep_fraction=2 / 3)
    row = run_benchmark(dataset, spec, backend=None, backend_factory=factory)
    assert row.accuracy_mean == 100.0


def test_corefine_two_iteration_mean():
    def factory(seed):
        return MockBackend([boxed_record("5", [8.0] * 40), boxed_record("7", [16.0] * 30)])

    dataset = [Problem(id="p", statement="q", ground_truth="7")]
    spec = RunSpec(method="corefine", seeds=(0,))
    controller = StubController(fn=lambda f: Action.RETHINK if f.bins.mean() < 12
                                else Action.HALT)
    row = run_benchmark(dataset, spec, backend=None, controller=controller,
                        backend_factory=factory)
    assert row.iterations_mean == 2.0
    assert row.accuracy_mean == 100.0
    assert row.tokens_total == 70


def test_corefine_tree_counts_nodes():
    def factory(seed):
        return MockBackend([boxed_record("7", [15.0] * 10) for _ in range(4)])

    dataset = [Problem(id="p", statement="q", ground_truth="7")]
    spec = RunSpec(method="corefine_tree", seeds=(0,))
    controller = StubController(actions=[Action.HALT] * 4)
    row = run_benchmark(dataset, spec, backend=None, controller=controller,
                        backend_factory=factory)
    assert row.iterations_mean == 4.0  # four warmup nodes
    assert row.accuracy_mean == 100.0


def test_refinement_methods_require_controller():
    with pytest.raises(ValueError):
        run_benchmark(three_problem_dataset(), RunSpec(method="corefine", seeds=(0,)),
                      backend=mock_backend())


def test_per_problem_failures_recorded_not_fatal():
    def factory(seed):
        from refinectl.backend import MockRecord
        return MockBackend([boxed_record("0", [12.0] * 5), MockRecord(error="boom"),
                            boxed_record("2", [12.0] * 5)])

    spec = RunSpec(method="pass1", seeds=(0,))
    row = run_benchmark(three_problem_dataset(), spec, backend=None,
                        backend_factory=factory)
    assert row.accuracy_mean == pytest.approx(100 * 2 / 3, abs=1e-9)


def test_std_over_seeds():
    flip = {"n": 0}

    def factory(seed):
        flip["n"] += 1
        answer = "0" if flip["n"] % 2 else "1"
        return MockBackend([boxed_record(answer, [12.0] * 5)])

    dataset = [Problem(id="p", statement="q", ground_truth="0")]
    spec = RunSpec(method="pass1", seeds=(0, 1, 2, 3))
    row = run_benchmark(dataset, spec, backend=None, backend_factory=factory)
    assert row.accuracy_mean == 50.0
    expected_std = np.std([100, 0, 100, 0], ddof=1)
    assert row.accuracy_std == pytest.approx(expected_std)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def row(method="pass1", dataset="d", acc=90.0, std=1.0, tokens=1000, time_s=1.0,
        iters=1.0):
    return ReportRow(method=method, dataset=dataset, accuracy_mean=acc,
                     accuracy_std=std, tokens_total=tokens, wall_time=time_s,
                     iterations_mean=iters)


def test_csv_single_row():
    blob = emit_report([row()], format="csv").decode()
    lines = blob.strip().split("\n")
    assert lines[0] == "method,dataset,acc_mean,acc_std,tokens,time_s,iters_mean"
    assert len(lines) == 2
    assert lines[1].startswith("pass1,d,90.0")


def test_fold_change_formatting():
    # 35.5e7 tokens down to 0.38e7 reads as a 1/93 fold change
    assert fold_change(35.5, 0.38) == "1/93"
    assert fold_change(100.0, 100.0) == "1/1"
    assert fold_change(50.0, 100.0) == "x2.0"


def test_markdown_fold_and_delta_columns():
    rows = [row(method="majority_parallel", tokens=355_000_000, acc=85.3),
            row(method="corefine", tokens=3_800_000, acc=90.0)]
    text = emit_report(rows, format="markdown").decode()
    assert "1/93" in text
    assert "+4.7" in text
    assert text.startswith("| Method ")


def test_json_roundtrip():
    rows = [row(), row(method="corefine", tokens=50)]
    blob = emit_report(rows, format="json")
    again = load_report(blob)
    assert again == rows


def test_report_bytes_stable():
    rows = [row(), row(method="x")]
    assert emit_report(rows, "markdown") == emit_report(rows, "markdown")
    assert emit_report(rows, "csv") == emit_report(rows, "csv")


def test_empty_rows_rejected():
    with pytest.raises(ValueError):
        emit_report([], format="csv")
