"""Confidence traces and fixed-length feature vectors.

Token confidence at position i is the negative mean of the top-k token
logprobs there: peaked next-token distributions concentrate probability in
the top alternatives and score low in magnitude, spread-out distributions
score high. A full completion yields a confidence trace C_1..C_N, which is
average-pooled down to a fixed number of bins for the controller, optionally
z-scored against per-iteration baselines, and summarized into the statistics
the labeling heuristics and compaction use.

All functions here are pure; concurrent use needs no coordination.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backend import Completion

DEFAULT_BINS = 16


@dataclass(frozen=True)
class ConfidenceTrace:
    """Per-token confidence values for one completion."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("trace must be a non-empty 1-D array")
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-length pooled trace; the controller's sole input.

    ``iteration`` is the generation index the trace came from (0 for the
    first attempt) and drives per-iteration normalization.
    """

    bins: np.ndarray
    iteration: int = 0
    normalized: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.bins, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("bins must be a non-empty 1-D array")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        object.__setattr__(self, "bins", arr)

    @property
    def length(self) -> int:
        return int(self.bins.size)


@dataclass(frozen=True)
class NormalizationTable:
    """Per-iteration z-score baselines (mu_t, sigma_t) for t = 0, 1, 2+."""

    mu: tuple[float, float, float] = (15.65, 12.94, 8.5)
    sigma: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if len(self.mu) != 3 or len(self.sigma) != 3:
            raise ValueError("table needs rows for iterations 0, 1, and 2+")
        if any(s <= 0 for s in self.sigma):
            raise ValueError("sigma must be positive")

    def row(self, iteration: int) -> tuple[float, float]:
        idx = min(max(iteration, 0), 2)
        return self.mu[idx], self.sigma[idx]


DEFAULT_NORMALIZATION = NormalizationTable()


@dataclass(frozen=True)
class TraceStats:
    """Summary statistics of one trace.

    head/mid/tail are the means of the first 10%, central 80%, and final
    10% of tokens; for traces shorter than 10 tokens all three equal the
    full-trace mean. ``slope`` is the least-squares trend of the pooled
    bins over normalized bin position in [0, 1], so it is comparable
    across trace lengths. ``cv`` is std/|mean|.
    """

    mean: float
    min: float
    head_mean: float
    mid_mean: float
    tail_mean: float
    slope: float
    cv: float


def token_confidence(entries: Sequence[float], k: int) -> float:
    """Negative mean logprob over the top-k' entries, k' = min(k, available).

    Endpoints sometimes return fewer than k alternatives; averaging over
    what is available degrades gracefully instead of failing.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(entries) == 0:
        raise ValueError("no logprob entries: cannot score an empty distribution")
    use = np.asarray(entries[: min(k, len(entries))], dtype=np.float64)
    return float(-use.mean())


def build_trace(completion: Completion, k: int) -> ConfidenceTrace:
    """Score every output position of a completion."""
    if not completion.per_token:
        raise ValueError("completion has no logprobs; cannot build a trace")
    values = [token_confidence(tok.logprobs, k) for tok in completion.per_token]
    return ConfidenceTrace(np.array(values))


def downsample(trace: ConfidenceTrace, length: int = DEFAULT_BINS, iteration: int = 0) -> FeatureVector:
    """Average-pool a trace to a fixed number of bins.

    Bin j (1-based) covers token indices [floor((j-1)*N/L), floor(j*N/L)),
    which partitions the trace into contiguous, near-equal slices. Traces
    shorter than L are right-padded with their last value first, so the
    terminal confidence level survives pooling.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    values = trace.values
    if values.size < length:
        pad = np.full(length - values.size, values[-1])
        values = np.concatenate([values, pad])
    n = values.size
    edges = (np.arange(length + 1) * n) // length
    sums = np.add.reduceat(values, edges[:-1])
    widths = np.diff(edges)
    return FeatureVector(bins=sums / widths, iteration=iteration, normalized=False)


def normalize(feature: FeatureVector, table: NormalizationTable = DEFAULT_NORMALIZATION) -> FeatureVector:
    """Z-score bins against the baseline row for the feature's iteration."""
    if feature.normalized:
        raise ValueError("feature is already normalized")
    mu, sigma = table.row(feature.iteration)
    return FeatureVector(
        bins=(feature.bins - mu) / sigma,
        iteration=feature.iteration,
        normalized=True,
    )


def denormalize(feature: FeatureVector, table: NormalizationTable = DEFAULT_NORMALIZATION) -> FeatureVector:
    """Inverse of :func:`normalize`."""
    if not feature.normalized:
        raise ValueError("feature is not normalized")
    mu, sigma = table.row(feature.iteration)
    return FeatureVector(
        bins=feature.bins * sigma + mu,
        iteration=feature.iteration,
        normalized=False,
    )


def stats(trace: ConfidenceTrace, pool_length: int = DEFAULT_BINS) -> TraceStats:
    """Compute trace statistics used by heuristics and compaction."""
    values = trace.values
    n = values.size
    mean = float(values.mean())
    if n < 10:
        head = mid = tail = mean
    else:
        h = max(1, n // 10)
        head = float(values[:h].mean())
        tail = float(values[-h:].mean())
        mid = float(values[h:n - h].mean()) if n > 2 * h else mean

    bins = downsample(trace, pool_length).bins
    x = np.linspace(0.0, 1.0, bins.size) if bins.size > 1 else np.zeros(1)
    xc = x - x.mean()
    denom = float((xc * xc).sum())
    slope = float((xc * (bins - bins.mean())).sum() / denom) if denom > 0 else 0.0

    std = float(values.std())
    if abs(mean) < 1e-12:
        cv = 0.0 if std < 1e-12 else math.inf
    else:
        cv = std / abs(mean)

    return TraceStats(
        mean=mean,
        min=float(values.min()),
        head_mean=head,
        mid_mean=mid,
        tail_mean=tail,
        slope=slope,
        cv=cv,
    )


# ---------------------------------------------------------------------------
# Trace dump (JSONL): one record per completion, consumed by labeler/trainer
# ---------------------------------------------------------------------------

def dump_trace_record(
    problem_id: str,
    iteration: int,
    trace: ConfidenceTrace,
    answer: str | None,
    correct: bool | None,
    **extra,
) -> str:
    """Render one JSONL trace record. Extra keys (source, ground_truth,
    produced_by) ride along for the labeler."""
    rec = {
        "problem_id": problem_id,
        "iteration": iteration,
        "values": [float(v) for v in trace.values],
        "answer": answer,
        "correct": correct,
    }
    rec.update(extra)
    return json.dumps(rec)


def write_trace_dump(path: str | Path, records: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in records:
            fh.write(line + "\n")


def read_trace_dump(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i + 1}: bad JSON: {exc}") from exc
    return out


__all__ = [
    "ConfidenceTrace",
    "DEFAULT_BINS",
    "DEFAULT_NORMALIZATION",
    "FeatureVector",
    "NormalizationTable",
    "TraceStats",
    "build_trace",
    "denormalize",
    "downsample",
    "dump_trace_record",
    "normalize",
    "read_trace_dump",
    "stats",
    "token_confidence",
    "write_trace_dump",
]
