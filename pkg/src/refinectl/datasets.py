"""Problem records and the JSONL dataset loader.

Dataset rows: {"id": ..., "statement": ..., "answer": ..., "mode":
"math_boxed"|"mcq", "choices": [...]?, "unanswerable": bool?}. For MCQ
problems the stored answer is the text of the correct choice, so choice
order can be randomized per sample without invalidating the ground truth.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODES = ("math_boxed", "mcq")

UNSURE_MARKERS = ("insufficient information", "unsure", "cannot be determined")


class DatasetError(ValueError):
    """Dataset file violates the schema; message carries the line number."""


def is_unsure_choice(text: str) -> bool:
    low = text.lower()
    return any(marker in low for marker in UNSURE_MARKERS)


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    ground_truth: str
    mode: str = "math_boxed"
    choices: tuple[str, ...] | None = None
    unsure_choice_present: bool = False
    unanswerable: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "mcq":
            if not self.choices or len(self.choices) < 2:
                raise ValueError("mcq problems need at least 2 choices")
            if self.ground_truth not in self.choices:
                raise ValueError("mcq ground truth must be one of the choices")

    def unsure_index(self, choices: tuple[str, ...] | None = None) -> int | None:
        """Index of the refusal choice in the given (or stored) order."""
        pool = choices if choices is not None else self.choices
        if not pool:
            return None
        for i, c in enumerate(pool):
            if is_unsure_choice(c):
                return i
        return None


def choice_letter(index: int) -> str:
    return string.ascii_uppercase[index]


def presented_choices(problem: Problem,
                      rng: np.random.Generator | None = None) -> tuple[str, ...]:
    """Choice order for one sample; pass an rng to randomize (guards against
    position bias), otherwise the stored order is kept."""
    assert problem.choices is not None
    order = list(problem.choices)
    if rng is not None:
        rng.shuffle(order)
    return tuple(order)


def correct_letter(problem: Problem, presentation: tuple[str, ...]) -> str:
    return choice_letter(presentation.index(problem.ground_truth))


def load_dataset(path: str | Path) -> list[Problem]:
    """Parse and validate a JSONL dataset; schema errors carry line numbers."""
    problems: list[Problem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                pid = str(rec["id"])
                if pid in seen:
                    raise ValueError(f"duplicate id {pid!r}")
                seen.add(pid)
                choices = rec.get("choices")
                choices = tuple(str(c) for c in choices) if choices is not None else None
                problem = Problem(
                    id=pid,
                    statement=str(rec["statement"]),
                    ground_truth=str(rec["answer"]),
                    mode=rec.get("mode", "math_boxed"),
                    choices=choices,
                    unsure_choice_present=bool(choices) and any(
                        is_unsure_choice(c) for c in choices),
                    unanswerable=bool(rec.get("unanswerable", False)),
                )
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            problems.append(problem)
    return problems


__all__ = [
    "DatasetError",
    "Problem",
    "choice_letter",
    "correct_letter",
    "is_unsure_choice",
    "load_dataset",
    "presented_choices",
]
