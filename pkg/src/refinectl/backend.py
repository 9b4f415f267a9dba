"""Text-generation backends with top-k logprob capture.

Two interchangeable backends: an OpenAI-compatible chat-completions HTTP
client, and a scripted mock that replays canned completions for offline,
deterministic tests. Both return the same ``Completion`` structure carrying
per-token top-k logprobs and token usage counts.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

logger = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "other")

DEFAULT_API_KEY_ENV = "REFINECTL_API_KEY"


class BackendError(Exception):
    """Base class for generation-backend failures."""


class TransportError(BackendError):
    """Network or server failure that may succeed on retry."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class MissingLogprobsError(BackendError):
    """The endpoint answered but returned no token logprobs.

    This is a capability problem, not a transient one, so it is never
    retried.
    """


class ScriptError(BackendError):
    """Mock script exhausted or malformed."""


@dataclass(frozen=True)
class GenerationConfig:
    """Sampling settings attached to every generation request.

    Defaults follow the common reasoning-eval setup: temperature 0.7,
    top-p 0.95, and 20 logprobs per emitted token.
    """

    temperature: float = 0.7
    top_p: float = 0.95
    top_k_sampling: int = 20
    max_tokens: int = 32_000
    logprob_count: int = 20
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k_sampling < 1:
            raise ValueError("top_k_sampling must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.logprob_count < 1:
            raise ValueError("logprob_count must be >= 1")

    def with_seed(self, seed: int | None) -> "GenerationConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class TokenLogprobs:
    """Top-k (token, logprob) alternatives at one output position."""

    position: int
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("entries must be non-empty")
        ordered = tuple(sorted(self.entries, key=lambda e: -e[1]))
        object.__setattr__(self, "entries", ordered)

    @property
    def logprobs(self) -> tuple[float, ...]:
        return tuple(lp for _, lp in self.entries)


@dataclass(frozen=True)
class Completion:
    """One model response with logprobs and usage accounting."""

    text: str
    per_token: tuple[TokenLogprobs, ...]
    completion_tokens: int
    prompt_tokens: int
    finish_reason: str = "stop"

    def __post_init__(self) -> None:
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"finish_reason must be one of {FINISH_REASONS}")
        if self.completion_tokens < 0 or self.prompt_tokens < 0:
            raise ValueError("token counts must be >= 0")
        if self.per_token and len(self.per_token) != self.completion_tokens:
            raise ValueError("per_token length must equal completion_tokens")


Message = dict  # {"role": ..., "content": ...}


def _validate_messages(messages: list[Message]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    for m in messages:
        if "role" not in m or "content" not in m:
            raise ValueError("each message needs 'role' and 'content'")


class Backend:
    """Common retry/ordering behaviour shared by all backends.

    Subclasses implement ``_generate_once``; retries apply to
    ``TransportError`` only (3 attempts, exponential backoff).
    """

    max_inflight: int = 8
    retry_attempts: int = 3
    retry_backoff: float = 0.5

    def _generate_once(self, messages: list[Message], cfg: GenerationConfig) -> Completion:
        raise NotImplementedError

    def generate(self, messages: list[Message], cfg: GenerationConfig) -> Completion:
        """Generate one completion, retrying transient transport failures."""
        _validate_messages(messages)
        last: TransportError | None = None
        for attempt in range(1, self.retry_attempts + 1):
            try:
                return self._generate_once(messages, cfg)
            except TransportError as exc:
                last = TransportError(str(exc), attempts=attempt)
                if attempt < self.retry_attempts:
                    delay = self.retry_backoff * (2 ** (attempt - 1))
                    logger.warning("transport error (attempt %d/%d): %s; retrying in %.1fs",
                                   attempt, self.retry_attempts, exc, delay)
                    if delay > 0:
                        time.sleep(delay)
        assert last is not None
        raise last


def drain_concurrent(
    backend: Backend,
    requests: list[tuple[list[Message], GenerationConfig]],
) -> list[Completion | BackendError]:
    """Issue many generation requests; results come back in request order.

    Each slot holds either a ``Completion`` or the ``BackendError`` that
    request raised; one failure never aborts its siblings. Ordering is a
    pure function of the request list, never of completion timing. Mock
    backends are drained sequentially (their script consumption order is
    part of the determinism contract); HTTP backends fan out over a thread
    pool bounded by ``max_inflight``.
    """
    if not requests:
        return []

    def one(req: tuple[list[Message], GenerationConfig]) -> Completion | BackendError:
        messages, cfg = req
        try:
            return backend.generate(messages, cfg)
        except BackendError as exc:
            return exc

    if isinstance(backend, MockBackend) or backend.max_inflight <= 1:
        return [one(r) for r in requests]

    with ThreadPoolExecutor(max_workers=backend.max_inflight) as pool:
        futures = [pool.submit(one, r) for r in requests]
        return [f.result() for f in futures]


def raise_slot_errors(results: list[Completion | BackendError]) -> list[Completion]:
    """Unwrap a drain result, raising the first per-slot error if any."""
    for r in results:
        if isinstance(r, BackendError):
            raise r
    return results  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

@dataclass
class MockRecord:
    """One scripted response.

    Confidence values may be given directly (``confidences``) so tests can
    author trace shapes without synthesizing logprob rows; each value c is
    stored as a single alternative with logprob -c, which the confidence
    math maps back to exactly c. Alternatively full ``logprobs`` rows
    (one list of floats per token) may be given. ``error`` makes the
    request fail with that message instead of returning.
    """

    text: str = ""
    confidences: list[float] | None = None
    logprobs: list[list[float]] | None = None
    finish_reason: str = "stop"
    prompt_tokens: int = 0
    error: str | None = None

    def to_completion(self) -> Completion:
        if self.confidences is not None and self.logprobs is not None:
            raise ScriptError("record may set confidences or logprobs, not both")
        per_token: list[TokenLogprobs] = []
        if self.confidences is not None:
            for i, c in enumerate(self.confidences):
                per_token.append(TokenLogprobs(position=i, entries=(("", -float(c)),)))
        elif self.logprobs is not None:
            for i, row in enumerate(self.logprobs):
                if not row:
                    raise ScriptError(f"logprobs row {i} is empty")
                per_token.append(
                    TokenLogprobs(position=i, entries=tuple(("", float(lp)) for lp in row))
                )
        return Completion(
            text=self.text,
            per_token=tuple(per_token),
            completion_tokens=len(per_token),
            prompt_tokens=self.prompt_tokens,
            finish_reason=self.finish_reason,
        )


class MockBackend(Backend):
    """Replays scripted completions in FIFO order.

    Identical script + identical call sequence gives byte-identical
    completions; consumption is serialized under one lock.
    """

    def __init__(self, records: list[MockRecord], max_inflight: int = 8):
        self._records = list(records)
        self._cursor = 0
        self._lock = threading.Lock()
        self.max_inflight = max_inflight

    @property
    def remaining(self) -> int:
        return len(self._records) - self._cursor

    def _generate_once(self, messages: list[Message], cfg: GenerationConfig) -> Completion:
        with self._lock:
            if self._cursor >= len(self._records):
                raise ScriptError("mock script exhausted")
            record = self._records[self._cursor]
            self._cursor += 1
        if record.error is not None:
            raise BackendError(record.error)
        return record.to_completion()


def load_mock_script(path: str | Path) -> list[MockRecord]:
    """Load a mock script file: {"responses": [{text, confidences|logprobs, finish_reason}]}."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "responses" not in doc:
        raise ScriptError("script file must be an object with a 'responses' list")
    records = []
    for i, row in enumerate(doc["responses"]):
        if not isinstance(row, dict):
            raise ScriptError(f"responses[{i}] is not an object")
        records.append(MockRecord(
            text=row.get("text", ""),
            confidences=row.get("confidences"),
            logprobs=row.get("logprobs"),
            finish_reason=row.get("finish_reason", "stop"),
            prompt_tokens=int(row.get("prompt_tokens", 0)),
            error=row.get("error"),
        ))
    return records


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backend
# ---------------------------------------------------------------------------

def build_chat_payload(messages: list[Message], cfg: GenerationConfig, model: str) -> dict:
    """Assemble the chat-completions request body, always asking for logprobs."""
    payload: dict = {
        "model": model,
        "messages": messages,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.max_tokens,
        "logprobs": True,
        "top_logprobs": cfg.logprob_count,
    }
    if cfg.top_k_sampling:
        payload["top_k"] = cfg.top_k_sampling  # honored by vLLM-style servers
    if cfg.seed is not None:
        payload["seed"] = cfg.seed
    return payload


def parse_chat_response(obj: dict) -> Completion:
    """Parse a chat-completions JSON body into a ``Completion``.

    Raises ``MissingLogprobsError`` when the response carries no
    per-token logprob content.
    """
    try:
        choice = obj["choices"][0]
    except (KeyError, IndexError) as exc:
        raise BackendError(f"malformed response: {exc}") from exc

    text = (choice.get("message") or {}).get("content") or ""
    logprobs = choice.get("logprobs") or {}
    content = logprobs.get("content")
    if not content:
        raise MissingLogprobsError("endpoint returned no logprobs content")

    per_token = []
    for i, tok in enumerate(content):
        tops = tok.get("top_logprobs") or []
        entries = tuple((t.get("token", ""), float(t["logprob"])) for t in tops)
        if not entries:
            # Some servers omit top_logprobs but keep the sampled token's own.
            entries = ((tok.get("token", ""), float(tok["logprob"])),)
        per_token.append(TokenLogprobs(position=i, entries=entries))

    usage = obj.get("usage") or {}
    finish = choice.get("finish_reason")
    if finish not in FINISH_REASONS:
        finish = "length" if finish == "length" else ("stop" if finish == "stop" else "other")
    return Completion(
        text=text,
        per_token=tuple(per_token),
        completion_tokens=int(usage.get("completion_tokens", len(per_token))),
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        finish_reason=finish,
    )


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client.

    Credentials come from an environment variable (``api_key_env``); the
    endpoint URL is passed explicitly (config file or ``--endpoint`` flag).
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 300.0,
        max_inflight: int = 8,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = os.environ.get(api_key_env, "")
        self.timeout = timeout
        self.max_inflight = max_inflight

    def _generate_once(self, messages: list[Message], cfg: GenerationConfig) -> Completion:
        url = f"{self.endpoint}/chat/completions"
        body = json.dumps(build_chat_payload(messages, cfg, self.model)).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read().decode("utf-8", errors="replace")
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransportError(f"HTTP {exc.code}: {exc.reason}") from exc
            raise BackendError(f"HTTP {exc.code}: {exc.reason}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(str(exc)) from exc
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise BackendError(f"non-JSON response: {raw[:200]}") from exc
        return parse_chat_response(obj)


__all__ = [
    "Backend",
    "BackendError",
    "Completion",
    "GenerationConfig",
    "HttpBackend",
    "MissingLogprobsError",
    "MockBackend",
    "MockRecord",
    "ScriptError",
    "TokenLogprobs",
    "TransportError",
    "build_chat_payload",
    "drain_concurrent",
    "load_mock_script",
    "parse_chat_response",
    "raise_slot_errors",
]
