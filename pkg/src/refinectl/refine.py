"""Sequential confidence-guided refinement.

One run: generate, score the trace, ask the controller, and either accept
the answer or synthesize a refinement prompt (compacted history + action-
specific instruction) and generate again, up to an iteration cap. Two
safety valves sit above the controller: an answer-consistency override that
accepts any answer seen enough times, and the cap itself.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .backend import Backend, BackendError, Completion, GenerationConfig
from .confidence import (
    NormalizationTable,
    TraceStats,
    build_trace,
    downsample,
    normalize,
    stats,
)
from .controller import Action, Decision
from .datasets import Problem, choice_letter

TERMINATIONS = ("halt", "refuse", "max_iterations", "consistency_override")


@dataclass(frozen=True)
class LoopConfig:
    max_iterations: int = 20
    consistency_override_count: int = 3
    rethink_window_tokens: int = 800
    compaction_budget_chars: int = 4000
    normalization: NormalizationTable | None = None
    mode: str = "math_boxed"
    two_phase_refusal: bool = False
    max_truncation_retries: int = 1
    feature_length: int = 16

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.consistency_override_count < 1:
            raise ValueError("consistency_override_count must be >= 1")

    @property
    def rethink_window_chars(self) -> int:
        # token budgets are approximated as 4 chars/token so the artifact
        # never needs a tokenizer
        return 4 * self.rethink_window_tokens


@dataclass(frozen=True)
class IterationSummary:
    iteration: int
    answer: str | None
    action_taken: Action
    confidence_mean: float
    confidence_min: float
    compacted_text: str
    tokens_used: int


@dataclass
class IterationRecord:
    """One run-log row: what happened at step t."""

    problem_id: str
    t: int
    action: Action
    probs: tuple[float, ...]
    answer: str | None
    confidence_mean: float
    tokens: int

    def to_json(self) -> str:
        return json.dumps({
            "problem_id": self.problem_id,
            "t": self.t,
            "action": self.action.name,
            "probs": list(self.probs),
            "answer": self.answer,
            "confidence_mean": self.confidence_mean,
            "tokens": self.tokens,
        })


@dataclass
class RunResult:
    problem_id: str
    final_answer: str | None
    iterations_used: int
    decisions: list[Decision]
    total_generation_tokens: int
    terminated_by: str
    history: list[IterationSummary] = field(default_factory=list)
    records: list[IterationRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.terminated_by not in TERMINATIONS:
            raise ValueError(f"terminated_by must be one of {TERMINATIONS}")


class RefinementError(Exception):
    """Backend failure mid-run; carries whatever completed so far."""

    def __init__(self, message: str, partial: RunResult | None = None):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------------------
# Answer extraction
# ---------------------------------------------------------------------------

_ANSWER_LINE = re.compile(
    r"^(?:final\s+)?answer\s*(?:is)?\s*[:\-]?\s*\(?([A-Za-z])\)?\s*\.?$", re.IGNORECASE)


def _last_boxed(text: str) -> str | None:
    starts = [m.start() for m in re.finditer(r"\\boxed", text)]
    for idx in reversed(starts):
        scan = idx + len("\\boxed")
        while scan < len(text) and text[scan].isspace():
            scan += 1
        if scan >= len(text) or text[scan] != "{":
            continue
        depth = 0
        for end in range(scan, len(text)):
            if text[end] == "{":
                depth += 1
            elif text[end] == "}":
                depth -= 1
                if depth == 0:
                    return text[scan + 1:end]
        # unbalanced: try an earlier \boxed
    return None


def _final_choice_letter(text: str) -> str | None:
    boxed = _last_boxed(text)
    if boxed is not None and len(boxed.strip()) == 1 and boxed.strip().isalpha():
        return boxed.strip().upper()
    for line in reversed(text.splitlines()):
        stripped = line.strip().strip("*_`")
        if not stripped:
            continue
        bare = stripped.strip("().:").strip()
        if len(bare) == 1 and bare.isalpha():
            return bare.upper()
        m = _ANSWER_LINE.match(stripped)
        if m:
            return m.group(1).upper()
        # only the trailing non-empty lines can carry the final letter
        if len(stripped) > 40:
            break
    return None


def extract_answer(text: str, mode: str = "math_boxed") -> str | None:
    """Pull the final answer out of a response; absent answers come back as
    None, never as an exception (extraction failures are a known runtime
    condition the loop has to tolerate)."""
    if not text:
        return None
    if mode == "math_boxed":
        content = _last_boxed(text)
        return content.strip() if content is not None else None
    if mode == "mcq":
        return _final_choice_letter(text)
    raise ValueError(f"unknown mode {mode!r}")


def normalize_math_answer(answer: str | None) -> str | None:
    """Strip whitespace and one layer of surrounding braces for string
    comparison; no CAS equivalence is attempted."""
    if answer is None:
        return None
    out = answer.strip()
    while len(out) >= 2 and out[0] == "{" and out[-1] == "}":
        out = out[1:-1].strip()
    return " ".join(out.split())


# ---------------------------------------------------------------------------
# Compaction
# ---------------------------------------------------------------------------

def format_confidence_stats(s: TraceStats) -> str:
    return (f"mean={s.mean:.2f} min={s.min:.2f} tail={s.tail_mean:.2f} "
            f"slope={s.slope:+.2f}")


def compact(response: str, answer: str | None, s: TraceStats, budget: int,
            window_chars: int = 3200) -> str:
    """Lossy summary of one attempt: answer, confidence statistics, and a
    trailing window of the reasoning, capped at ``budget`` characters."""
    header = (f"Answer: {answer if answer is not None else '(none)'}\n"
              f"Confidence: {format_confidence_stats(s)}\n"
              f"Reasoning tail:\n")
    room = budget - len(header)
    tail = response[-min(window_chars, max(room, 0)):] if room > 0 else ""
    return (header + tail)[:budget]


# ---------------------------------------------------------------------------
# Prompt synthesis
# ---------------------------------------------------------------------------

MATH_INITIAL = (
    "Solve the following problem.\n\n"
    "Problem: {problem}\n\n"
    "Please provide your solution with final answer in \\boxed{{}}."
)

MATH_RETHINK = (
    "You are solving a mathematical problem. Your previous attempt may have errors.\n\n"
    "Problem: {problem}\n\n"
    "Previous Attempts:\n{history}\n\n"
    "Previous Answer: {previous_answer}\n"
    "Confidence: {confidence_stats}\n\n"
    "Task: Re-examine your reasoning step by step. Verify each calculation and "
    "logical inference. Consider whether your approach is sound. If you find "
    "errors, correct them. If your reasoning is correct, confirm your answer.\n\n"
    "Please provide your solution with final answer in \\boxed{{}}."
)

MATH_ALTERNATIVE = (
    "You are solving a mathematical problem. Your previous approaches have not "
    "succeeded.\n\n"
    "Problem: {problem}\n\n"
    "Previous Attempts:\n{history}\n\n"
    "Task: Your previous approaches may have fundamental issues. Try a COMPLETELY "
    "DIFFERENT method or problem formulation. Consider:\n"
    "- Alternative problem representations\n"
    "- Different mathematical techniques\n"
    "- Unconventional solution paths\n\n"
    "Please provide your solution with final answer in \\boxed{{}}."
)

MCQ_ANSWER_FORMAT = "Answer with a single letter on the final line."

REMOVAL_NOTICE = (
    "Your previous answer was 'Insufficient information' - but that option has "
    "been REMOVED. You MUST now select from the remaining choices."
)

MCQ_RETHINK_TASK = (
    "Task: Re-examine your reasoning step by step. Verify each inference against "
    "the choices. If you find errors, correct them. If your reasoning is correct, "
    "confirm your answer."
)

MCQ_ALTERNATIVE_TASK = (
    "Task: Your previous approach may have fundamental issues. Try a COMPLETELY "
    "DIFFERENT line of reasoning before committing to a choice."
)


def _format_choices(choices: Iterable[str]) -> str:
    return "\n".join(f"{choice_letter(i)}. {c}" for i, c in enumerate(choices))


def _history_text(history: list[IterationSummary]) -> str:
    if not history:
        return "(none)"
    return "\n\n".join(f"[Attempt {s.iteration}]\n{s.compacted_text}" for s in history)


def _mcq_choices_for_phase(problem: Problem, presentation: tuple[str, ...],
                           phase: int, two_phase: bool) -> tuple[tuple[str, ...], bool]:
    """Returns (choices to show, whether the refusal option was removed)."""
    unsure = problem.unsure_index(presentation)
    if two_phase and phase >= 1 and unsure is not None:
        kept = tuple(c for i, c in enumerate(presentation) if i != unsure)
        return kept, True
    return presentation, False


def build_initial_prompt(problem: Problem | str, mode: str,
                         presentation: tuple[str, ...] | None = None) -> list[dict]:
    problem = _as_problem(problem, mode)
    if mode == "math_boxed":
        content = MATH_INITIAL.format(problem=problem.statement)
    else:
        choices = presentation if presentation is not None else problem.choices
        content = (f"Answer the following multiple-choice question.\n\n"
                   f"Question: {problem.statement}\n\n"
                   f"Choices:\n{_format_choices(choices)}\n\n"
                   f"Think it through, then answer. {MCQ_ANSWER_FORMAT}")
    return [{"role": "user", "content": content}]


def build_prompt(
    problem: Problem | str,
    history: list[IterationSummary],
    action: Action,
    mode: str = "math_boxed",
    phase: int = 0,
    presentation: tuple[str, ...] | None = None,
    two_phase: bool = True,
) -> list[dict]:
    """Synthesis prompt for a refinement step.

    RETHINK embeds the previous answer and a verification instruction;
    ALTERNATIVE embeds the compacted history and a switch-method
    instruction. In refusal mode, phase >= 1 uses the aggressive template:
    the refusal choice is removed and the prompt says so.
    """
    if action not in (Action.RETHINK, Action.ALTERNATIVE):
        raise ValueError(f"no synthesis prompt exists for {action.name}")
    problem = _as_problem(problem, mode)
    history_text = _history_text(history)

    if mode == "math_boxed":
        if action is Action.RETHINK:
            last = history[-1] if history else None
            content = MATH_RETHINK.format(
                problem=problem.statement,
                history=history_text,
                previous_answer=last.answer if last and last.answer else "(none)",
                confidence_stats=(f"mean={last.confidence_mean:.2f} "
                                  f"min={last.confidence_min:.2f}") if last else "(none)",
            )
        else:
            content = MATH_ALTERNATIVE.format(problem=problem.statement,
                                              history=history_text)
        return [{"role": "user", "content": content}]

    if mode != "mcq":
        raise ValueError(f"unknown mode {mode!r}")
    pres = presentation if presentation is not None else tuple(problem.choices or ())
    choices, removed = _mcq_choices_for_phase(problem, pres, phase, two_phase)
    task = MCQ_RETHINK_TASK if action is Action.RETHINK else MCQ_ALTERNATIVE_TASK
    parts = [
        "You are answering a multiple-choice question. Your previous attempt "
        "needs another look.",
        f"Question: {problem.statement}",
        f"Previous Attempts:\n{history_text}",
    ]
    if removed:
        parts.append(REMOVAL_NOTICE)
    parts.append(f"Choices:\n{_format_choices(choices)}")
    parts.append(task)
    parts.append(MCQ_ANSWER_FORMAT)
    return [{"role": "user", "content": "\n\n".join(parts)}]


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def generate_with_truncation_retry(
    backend: Backend,
    messages: list[dict],
    gen_cfg: GenerationConfig,
    max_retries: int,
) -> tuple[Completion, int, bool]:
    """Generate; re-issue on truncation up to ``max_retries`` times. Returns
    (last completion, tokens consumed across attempts, still-truncated)."""
    completion = backend.generate(messages, gen_cfg)
    tokens = completion.completion_tokens
    attempts = 0
    while completion.finish_reason == "length" and attempts < max_retries:
        attempts += 1
        completion = backend.generate(messages, gen_cfg)
        tokens += completion.completion_tokens
    return completion, tokens, completion.finish_reason == "length"


def _as_problem(problem: Problem | str, mode: str) -> Problem:
    if isinstance(problem, Problem):
        return problem
    return Problem(id="adhoc", statement=str(problem), ground_truth="", mode=mode)


def run(
    problem: Problem | str,
    backend: Backend,
    controller,
    gen_cfg: GenerationConfig,
    loop_cfg: LoopConfig,
    presentation: tuple[str, ...] | None = None,
) -> RunResult:
    """Run the refinement loop on one problem.

    ``controller`` is anything with ``decide(FeatureVector) -> Decision``
    (the trained network, or a scripted stand-in for tests). Termination:
    the controller's HALT (or REFUSE on 4-action models), the answer-
    consistency override, or the iteration cap, whichever comes first.
    """
    problem = _as_problem(problem, loop_cfg.mode)
    model_length = getattr(controller, "input_length", None)
    if model_length is not None and model_length != loop_cfg.feature_length:
        raise ValueError(
            f"controller expects length {model_length}, loop is configured "
            f"for {loop_cfg.feature_length}")
    if loop_cfg.mode == "mcq" and presentation is None:
        presentation = tuple(problem.choices or ())

    result = RunResult(problem_id=problem.id, final_answer=None, iterations_used=0,
                       decisions=[], total_generation_tokens=0, terminated_by="halt")
    answer_counts: Counter[str] = Counter()

    def generate(messages) -> tuple[Completion, int, bool]:
        try:
            return generate_with_truncation_retry(
                backend, messages, gen_cfg, loop_cfg.max_truncation_retries)
        except BackendError as exc:
            raise RefinementError(str(exc), partial=result) from exc

    messages = build_initial_prompt(problem, loop_cfg.mode, presentation)
    completion, tokens, truncated = generate(messages)
    answer = extract_answer(completion.text, loop_cfg.mode)

    for t in range(1, loop_cfg.max_iterations + 1):
        result.iterations_used = t
        result.total_generation_tokens += tokens
        trace = build_trace(completion, gen_cfg.logprob_count)
        trace_stats = stats(trace)
        feature = downsample(trace, loop_cfg.feature_length, iteration=t - 1)
        if loop_cfg.normalization is not None:
            feature = normalize(feature, loop_cfg.normalization)
        decision = controller.decide(feature)
        result.decisions.append(decision)
        # a completion still truncated after retries is unproductive: switch
        # approach instead of trusting its decision
        action = Action.ALTERNATIVE if truncated else decision.action
        if answer is not None:
            answer_counts[answer] += 1
        result.records.append(IterationRecord(
            problem_id=problem.id, t=t, action=action, probs=decision.probs,
            answer=answer, confidence_mean=trace_stats.mean, tokens=tokens))

        if answer is not None and answer_counts[answer] >= loop_cfg.consistency_override_count:
            result.final_answer = answer
            result.terminated_by = "consistency_override"
            return result
        if action is Action.HALT:
            result.final_answer = answer
            result.terminated_by = "halt"
            return result
        if action is Action.REFUSE:
            result.final_answer = None
            result.terminated_by = "refuse"
            return result
        if t == loop_cfg.max_iterations:
            result.final_answer = answer
            result.terminated_by = "max_iterations"
            return result

        summary = IterationSummary(
            iteration=t,
            answer=answer,
            action_taken=action,
            confidence_mean=trace_stats.mean,
            confidence_min=trace_stats.min,
            compacted_text=compact(completion.text, answer, trace_stats,
                                   loop_cfg.compaction_budget_chars,
                                   loop_cfg.rethink_window_chars),
            tokens_used=tokens,
        )
        result.history.append(summary)
        messages = build_prompt(problem, result.history, action, loop_cfg.mode,
                                phase=t, presentation=presentation,
                                two_phase=loop_cfg.two_phase_refusal)
        completion, tokens, truncated = generate(messages)
        answer = extract_answer(completion.text, loop_cfg.mode)

    raise AssertionError("unreachable: loop always terminates inside")


def write_run_log(path: str | Path, results: Iterable[RunResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            for record in result.records:
                fh.write(record.to_json() + "\n")


__all__ = [
    "IterationRecord",
    "IterationSummary",
    "LoopConfig",
    "RefinementError",
    "RunResult",
    "build_initial_prompt",
    "build_prompt",
    "compact",
    "extract_answer",
    "format_confidence_stats",
    "generate_with_truncation_retry",
    "normalize_math_answer",
    "run",
    "write_run_log",
]
