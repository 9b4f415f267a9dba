"""Shared test helpers: scripted backends and controller stand-ins."""

from __future__ import annotations

import numpy as np
import pytest

from refinectl.backend import MockBackend, MockRecord
from refinectl.confidence import FeatureVector
from refinectl.controller import Action, Decision


def make_decision(action: Action, n_actions: int = 3, success: float = 0.5) -> Decision:
    probs = [0.05] * n_actions
    probs[int(action)] = 1.0 - 0.05 * (n_actions - 1)
    return Decision(action=action, probs=tuple(probs), success_prob=success)


class StubController:
    """Scripted controller: returns the next action from a list, or applies
    a feature -> action function."""

    def __init__(self, actions=None, fn=None, n_actions: int = 3):
        assert (actions is None) != (fn is None)
        self.actions = list(actions) if actions is not None else None
        self.fn = fn
        self.n_actions = n_actions
        self.seen: list[FeatureVector] = []

    def decide(self, feature: FeatureVector) -> Decision:
        self.seen.append(feature)
        if self.actions is not None:
            action = self.actions.pop(0)
        else:
            action = self.fn(feature)
        return make_decision(Action(action), self.n_actions)


def mock_backend(*records, **kwargs) -> MockBackend:
    backend = MockBackend(list(records), **kwargs)
    backend.retry_backoff = 0.0
    return backend


def boxed_record(answer: str, confs, text_prefix: str = "working...",
                 finish: str = "stop") -> MockRecord:
    return MockRecord(text=f"{text_prefix} \\boxed{{{answer}}}",
                      confidences=list(confs), finish_reason=finish)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
