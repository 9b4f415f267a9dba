"""Benchmark harness: baselines, token accounting, and reports.

Methods: pass@1, parallel and sequential majority voting at K samples,
confidence-filtered voting (optional exclusion band on mean trace
confidence, top-fraction keep, optional confidence weighting), and the two
refinement strategies. Every stochastic method runs once per seed; rows
report mean/std accuracy over seeds plus exact generation-token totals.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backend import Backend, BackendError, GenerationConfig, drain_concurrent
from .confidence import build_trace
from .datasets import (  # re-exported: the dataset surface lives with the harness
    DatasetError,
    Problem,
    choice_letter,
    correct_letter,
    load_dataset,
    presented_choices,
)
from .refine import LoopConfig, RunResult, build_initial_prompt, extract_answer, \
    normalize_math_answer, run
from .tree import TreeConfig, run_tree

logger = logging.getLogger(__name__)

METHODS = ("pass1", "majority_parallel", "majority_sequential", "conf_filtered",
           "corefine", "corefine_tree")


@dataclass(frozen=True)
class RunSpec:
    method: str
    k: int = 1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    keep_fraction: float = 1.0
    weighted: bool = False
    exclude_min: float | None = None
    exclude_max: float | None = None
    gen_cfg: GenerationConfig = field(default_factory=GenerationConfig)
    loop_cfg: LoopConfig = field(default_factory=LoopConfig)
    tree_cfg: TreeConfig = field(default_factory=TreeConfig)
    randomize_choices: bool = False

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (0 < self.keep_fraction <= 1):
            raise ValueError("keep_fraction must be in (0, 1]")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass
class ReportRow:
    method: str
    dataset: str
    accuracy_mean: float  # percent
    accuracy_std: float   # percent, n-1 denominator over seeds
    tokens_total: int
    wall_time: float
    iterations_mean: float

    def to_dict(self) -> dict:
        return {
            "method": self.method, "dataset": self.dataset,
            "acc_mean": self.accuracy_mean, "acc_std": self.accuracy_std,
            "tokens": self.tokens_total, "time_s": self.wall_time,
            "iters_mean": self.iterations_mean,
        }

    @staticmethod
    def from_dict(d: dict) -> "ReportRow":
        return ReportRow(method=d["method"], dataset=d["dataset"],
                         accuracy_mean=float(d["acc_mean"]), accuracy_std=float(d["acc_std"]),
                         tokens_total=int(d["tokens"]), wall_time=float(d["time_s"]),
                         iterations_mean=float(d["iters_mean"]))


# ---------------------------------------------------------------------------
# Voting
# ---------------------------------------------------------------------------

def majority_vote(answers: Sequence[str | None]) -> str | None:
    """Modal non-empty answer; ties break lexicographically; all-empty -> None."""
    counts = Counter(a for a in answers if a)
    if not counts:
        return None
    return min(counts, key=lambda a: (-counts[a], a))


def conf_filtered_vote(
    traces: Sequence[tuple[str | None, float]],
    keep_fraction: float = 1.0,
    weighted: bool = False,
    exclude_min: float | None = None,
    exclude_max: float | None = None,
) -> str | None:
    """Vote over (answer, mean confidence) pairs after confidence filtering.

    Traces outside [exclude_min, exclude_max] are dropped first, then only
    the top ``keep_fraction`` by confidence vote, by count or by summed
    confidence. With keep_fraction=1, no exclusions, and unweighted voting
    this reduces exactly to :func:`majority_vote` (including the
    lexicographic tie rule).
    """
    if not (0 < keep_fraction <= 1):
        raise ValueError("keep_fraction must be in (0, 1]")
    kept = [(a, c) for a, c in traces
            if (exclude_min is None or c >= exclude_min)
            and (exclude_max is None or c <= exclude_max)]
    if not kept:
        return None
    take = max(1, math.ceil(keep_fraction * len(kept)))
    kept.sort(key=lambda t: -t[1])
    kept = kept[:take]
    voting = [(a, c) for a, c in kept if a]
    if not voting:
        return None
    score: dict[str, float] = {}
    for a, c in voting:
        score[a] = score.get(a, 0.0) + (c if weighted else 1.0)
    return min(score, key=lambda a: (-score[a], a))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def is_correct(problem: Problem, answer: str | None,
               presentation: tuple[str, ...] | None = None) -> bool:
    """String-match scoring. REFUSE/absent answers count as incorrect unless
    the dataset marks the problem unanswerable."""
    if answer is None:
        return problem.unanswerable
    if problem.mode == "math_boxed":
        return normalize_math_answer(answer) == normalize_math_answer(problem.ground_truth)
    pres = presentation if presentation is not None else tuple(problem.choices or ())
    return answer.strip().upper() == correct_letter(problem, pres)


# ---------------------------------------------------------------------------
# Method execution
# ---------------------------------------------------------------------------

@dataclass
class _ProblemOutcome:
    correct: bool
    tokens: int
    generations: int


def _sample_k(problem: Problem, backend: Backend, spec: RunSpec, seed: int,
              presentation: tuple[str, ...] | None, sequential: bool,
              ) -> list[tuple[str | None, float, int]]:
    """K samples of the same prompt -> (answer, mean confidence, tokens)."""
    messages = build_initial_prompt(problem, spec.loop_cfg.mode, presentation)
    base = spec.gen_cfg if spec.gen_cfg.seed is not None else spec.gen_cfg.with_seed(seed)
    out: list[tuple[str | None, float, int]] = []
    if sequential:
        completions = []
        for i in range(spec.k):
            completions.append(backend.generate(messages, base.with_seed(base.seed + i)))
    else:
        reqs = [(messages, base.with_seed(base.seed + i)) for i in range(spec.k)]
        results = drain_concurrent(backend, reqs)
        completions = []
        for r in results:
            if isinstance(r, BackendError):
                raise r
            completions.append(r)
    for completion in completions:
        answer = extract_answer(completion.text, spec.loop_cfg.mode)
        trace = build_trace(completion, base.logprob_count)
        out.append((answer, trace.mean, completion.completion_tokens))
    return out


def _run_problem(problem: Problem, spec: RunSpec, backend: Backend, controller,
                 seed: int, rng: np.random.Generator) -> _ProblemOutcome:
    presentation = None
    if problem.mode == "mcq":
        presentation = presented_choices(problem, rng if spec.randomize_choices else None)

    if spec.method == "pass1":
        samples = _sample_k(problem, backend, replace_k(spec, 1), seed, presentation,
                            sequential=True)
        answer, _, tokens = samples[0]
        return _ProblemOutcome(is_correct(problem, answer, presentation), tokens, 1)

    if spec.method in ("majority_parallel", "majority_sequential"):
        samples = _sample_k(problem, backend, spec, seed, presentation,
                            sequential=spec.method == "majority_sequential")
        answer = majority_vote([a for a, _, _ in samples])
        tokens = sum(t for _, _, t in samples)
        return _ProblemOutcome(is_correct(problem, answer, presentation), tokens, spec.k)

    if spec.method == "conf_filtered":
        samples = _sample_k(problem, backend, spec, seed, presentation, sequential=False)
        answer = conf_filtered_vote([(a, c) for a, c, _ in samples],
                                    keep_fraction=spec.keep_fraction,
                                    weighted=spec.weighted,
                                    exclude_min=spec.exclude_min,
                                    exclude_max=spec.exclude_max)
        tokens = sum(t for _, _, t in samples)
        return _ProblemOutcome(is_correct(problem, answer, presentation), tokens, spec.k)

    if spec.method == "corefine":
        gen = spec.gen_cfg if spec.gen_cfg.seed is not None else spec.gen_cfg.with_seed(seed)
        result: RunResult = run(problem, backend, controller, gen, spec.loop_cfg,
                                presentation=presentation)
        return _ProblemOutcome(is_correct(problem, result.final_answer, presentation),
                               result.total_generation_tokens, result.iterations_used)

    if spec.method == "corefine_tree":
        gen = spec.gen_cfg if spec.gen_cfg.seed is not None else spec.gen_cfg.with_seed(seed)
        tree_run = run_tree(problem, backend, controller, gen, spec.tree_cfg, spec.loop_cfg,
                            presentation=presentation)
        return _ProblemOutcome(is_correct(problem, tree_run.final_answer, presentation),
                               tree_run.total_tokens, len(tree_run.nodes))

    raise ValueError(f"unknown method {spec.method!r}")


def replace_k(spec: RunSpec, k: int) -> RunSpec:
    return replace(spec, k=k)


def run_benchmark(
    dataset: Sequence[Problem],
    spec: RunSpec,
    backend: Backend,
    controller=None,
    dataset_name: str = "dataset",
    backend_factory=None,
) -> ReportRow:
    """Evaluate one method over the dataset, once per seed.

    Refinement methods need a controller. ``backend_factory(seed)`` can
    supply a fresh backend per seed (mock scripts are consumed by a run);
    otherwise the given backend is reused. Wall time covers generation and
    voting, not report I/O. Per-problem failures are logged and scored as
    incorrect rather than aborting the sweep.
    """
    if spec.method in ("corefine", "corefine_tree") and controller is None:
        raise ValueError(f"{spec.method} needs a controller model")

    per_seed_acc: list[float] = []
    tokens_total = 0
    generations_total = 0
    problems_total = 0
    started = time.perf_counter()
    for seed in spec.seeds:
        seed_backend = backend_factory(seed) if backend_factory is not None else backend
        rng = np.random.default_rng(seed)
        correct = 0
        for problem in dataset:
            problems_total += 1
            try:
                outcome = _run_problem(problem, spec, seed_backend, controller, seed, rng)
            except BackendError as exc:
                logger.warning("problem %s failed: %s", problem.id, exc)
                outcome = _ProblemOutcome(False, 0, 0)
            correct += outcome.correct
            tokens_total += outcome.tokens
            generations_total += outcome.generations
        per_seed_acc.append(correct / len(dataset) if dataset else 0.0)
    wall = time.perf_counter() - started

    acc = np.array(per_seed_acc) * 100.0
    std = float(acc.std(ddof=1)) if len(acc) > 1 else 0.0
    return ReportRow(
        method=spec.method,
        dataset=dataset_name,
        accuracy_mean=float(acc.mean()),
        accuracy_std=std,
        tokens_total=tokens_total,
        wall_time=wall,
        iterations_mean=generations_total / problems_total if problems_total else 0.0,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("method", "dataset", "acc_mean", "acc_std", "tokens", "time_s", "iters_mean")


def fold_change(baseline_tokens: float, tokens: float) -> str:
    """Format a token reduction as '1/N' (or 'xM' when tokens grew)."""
    if tokens <= 0 or baseline_tokens <= 0:
        return "-"
    ratio = baseline_tokens / tokens
    if ratio >= 1:
        return f"1/{round(ratio)}"
    return f"x{1 / ratio:.1f}"


def emit_report(rows: Sequence[ReportRow], format: str = "csv") -> bytes:
    """Render rows as csv, json, or a markdown table.

    The markdown table adds token fold-change and accuracy-delta columns
    against the most expensive (highest-token) row of each dataset.
    """
    if not rows:
        raise ValueError("no rows to report")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_dict())
        return buf.getvalue().encode("utf-8")
    if format == "json":
        return json.dumps([row.to_dict() for row in rows], indent=2).encode("utf-8")
    if format == "markdown":
        baseline: dict[str, ReportRow] = {}
        for row in rows:
            cur = baseline.get(row.dataset)
            if cur is None or row.tokens_total > cur.tokens_total:
                baseline[row.dataset] = row
        lines = [
            "| Method | Dataset | Acc (%) | Std | Tokens | Fold | dAcc | Time (s) | Iters |",
            "|---|---|---|---|---|---|---|---|---|",
        ]
        for row in rows:
            base = baseline[row.dataset]
            fold = "-" if row is base else fold_change(base.tokens_total, row.tokens_total)
            delta = "-" if row is base else f"{row.accuracy_mean - base.accuracy_mean:+.1f}"
            lines.append(
                f"| {row.method} | {row.dataset} | {row.accuracy_mean:.1f} "
                f"| {row.accuracy_std:.1f} | {row.tokens_total} | {fold} | {delta} "
                f"| {row.wall_time:.2f} | {row.iterations_mean:.2f} |")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown format {format!r}")


def load_report(blob: bytes) -> list[ReportRow]:
    """Inverse of the json format of :func:`emit_report`."""
    return [ReportRow.from_dict(d) for d in json.loads(blob.decode("utf-8"))]


__all__ = [
    "CSV_COLUMNS",
    "DatasetError",
    "Problem",
    "ReportRow",
    "RunSpec",
    "choice_letter",
    "conf_filtered_vote",
    "correct_letter",
    "emit_report",
    "fold_change",
    "is_correct",
    "load_dataset",
    "load_report",
    "majority_vote",
    "presented_choices",
    "run_benchmark",
]
