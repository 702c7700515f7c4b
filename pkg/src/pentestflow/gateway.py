"""Chat-completion gateway: provider profiles, sessions with context eviction,
structured-output enforcement, usage accounting, and record/replay backends.

Every agent loop in this package talks to a language model through one of the
backends defined here. Live traffic, recorded transcripts, and scripted mocks
share a single ``send`` interface, which is what makes whole pipeline runs
reproducible offline: swap the backend, keep the agents.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

log = logging.getLogger(__name__)

CHARS_PER_TOKEN = 4
DEFAULT_MAX_REPAIRS = 2


class GatewayError(Exception):
    """Base class for gateway failures."""


class BackendUnreachable(GatewayError):
    """Transport-level failure talking to a provider; retrying is safe."""


class ContextOverflow(GatewayError):
    """System message plus prompt alone exceed the profile's context window."""


class ReplayMismatch(GatewayError):
    """A replayed session diverged from (or ran past) its transcript."""


class SchemaUnknown(GatewayError):
    """complete_structured was asked for a schema id nobody registered."""


class SinkWriteFailure(GatewayError):
    """record_transcript could not write to its sink."""


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate used for context budgeting.

    A flat characters-per-token heuristic, not a provider tokenizer: replayed
    runs must produce the same eviction decisions on any machine.
    """
    if not text:
        return 0
    return (len(text) + CHARS_PER_TOKEN - 1) // CHARS_PER_TOKEN


@dataclass(frozen=True)
class ProviderProfile:
    """Immutable description of one model configuration.

    Prices are USD per million tokens. Temperature defaults to zero; the
    agent loops depend on reproducible completions.
    """

    provider_id: str
    model_name: str
    context_window: int
    input_price: float
    output_price: float
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.context_window <= 0:
            raise ValueError("context_window must be positive")
        if self.input_price < 0 or self.output_price < 0:
            raise ValueError("prices must be non-negative")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must lie in [0, 1]")


@dataclass(frozen=True)
class TokenUsage:
    """Input/output token counts for a single provider call."""

    input_tokens: int
    output_tokens: int

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


def cost_of(usage: TokenUsage, profile: ProviderProfile) -> float:
    """Price one call: linear in tokens, no minimum fee."""
    input_cost = usage.input_tokens * profile.input_price / 1_000_000
    output_cost = usage.output_tokens * profile.output_price / 1_000_000
    return input_cost + output_cost


@dataclass
class UsageLedger:
    """Accumulated token and cost totals, safe for concurrent sessions."""

    input_tokens: int = 0
    output_tokens: int = 0
    call_count: int = 0
    accumulated_cost: float = 0.0
    _lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    def add(self, usage: TokenUsage, profile: ProviderProfile) -> None:
        with self._lock:
            self.input_tokens += usage.input_tokens
            self.output_tokens += usage.output_tokens
            self.call_count += 1
            self.accumulated_cost += cost_of(usage, profile)

    def merge(self, other: "UsageLedger") -> None:
        with self._lock:
            self.input_tokens += other.input_tokens
            self.output_tokens += other.output_tokens
            self.call_count += other.call_count
            self.accumulated_cost += other.accumulated_cost

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "call_count": self.call_count,
            "accumulated_cost": self.accumulated_cost,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "UsageLedger":
        return cls(
            input_tokens=int(raw.get("input_tokens", 0)),
            output_tokens=int(raw.get("output_tokens", 0)),
            call_count=int(raw.get("call_count", 0)),
            accumulated_cost=float(raw.get("accumulated_cost", 0.0)),
        )


# ---------------------------------------------------------------------------
# Requests, transcripts, backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChatRequest:
    """Everything a backend needs to answer one turn."""

    system_message: str
    history: tuple[tuple[str, str], ...]
    prompt: str
    profile: ProviderProfile


def request_digest(
    system_message: str, history: Sequence[tuple[str, str]], prompt: str
) -> str:
    """Stable sha256 over the request content, for transcript matching."""
    payload = json.dumps(
        [system_message, [list(turn) for turn in history], prompt],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TranscriptEntry:
    """One recorded provider exchange.

    An empty ``request_digest`` matches any request on replay, which keeps
    hand-authored fixture transcripts viable.
    """

    sequence_no: int
    request_digest: str
    response_text: str
    input_tokens: int
    output_tokens: int

    def usage(self) -> TokenUsage:
        return TokenUsage(self.input_tokens, self.output_tokens)


def transcript_lines(entries: Iterable[TranscriptEntry]) -> list[str]:
    lines = []
    for entry in entries:
        lines.append(
            json.dumps(
                {
                    "sequence_no": entry.sequence_no,
                    "request_digest": entry.request_digest,
                    "response_text": entry.response_text,
                    "input_tokens": entry.input_tokens,
                    "output_tokens": entry.output_tokens,
                },
                sort_keys=True,
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
    return lines


def write_transcript(entries: Iterable[TranscriptEntry], path: Path | str) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = transcript_lines(entries)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_transcript(path: Path | str) -> list[TranscriptEntry]:
    entries = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        doc = json.loads(raw)
        entries.append(
            TranscriptEntry(
                sequence_no=int(doc["sequence_no"]),
                request_digest=str(doc.get("request_digest", "")),
                response_text=str(doc["response_text"]),
                input_tokens=int(doc.get("input_tokens", 0)),
                output_tokens=int(doc.get("output_tokens", 0)),
            )
        )
    return entries


class Backend(Protocol):
    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]: ...


class ScriptedBackend:
    """Mock backend answering from a fixed list; for tests and dry runs.

    Each scripted item is either a plain response string or a
    ``(response, TokenUsage)`` pair; bare strings get estimated usage.
    A callable can be supplied instead to compute responses per request.
    """

    def __init__(
        self,
        responses: Sequence[str | tuple[str, TokenUsage]] | None = None,
        responder: Callable[[ChatRequest], str] | None = None,
    ) -> None:
        if (responses is None) == (responder is None):
            raise ValueError("supply exactly one of responses or responder")
        self._responses = list(responses) if responses is not None else None
        self._responder = responder
        self.calls = 0

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]:
        self.calls += 1
        if self._responder is not None:
            text = self._responder(request)
            return text, _estimated_usage(request, text)
        if not self._responses:
            raise BackendUnreachable("scripted backend has no responses left")
        item = self._responses.pop(0)
        if isinstance(item, tuple):
            return item[0], item[1]
        return item, _estimated_usage(request, item)


def _estimated_usage(request: ChatRequest, response_text: str) -> TokenUsage:
    prompt_side = (
        estimate_tokens(request.system_message)
        + sum(estimate_tokens(content) for _, content in request.history)
        + estimate_tokens(request.prompt)
    )
    return TokenUsage(max(1, prompt_side), max(1, estimate_tokens(response_text)))


class ReplayBackend:
    """Serves recorded responses in order; never touches the network.

    Digest mismatches are tolerated with a warning (the transcript order
    wins); running past the end of the transcript raises ReplayMismatch.
    """

    def __init__(
        self,
        entries: Sequence[TranscriptEntry] | None = None,
        path: Path | str | None = None,
    ) -> None:
        if (entries is None) == (path is None):
            raise ValueError("supply exactly one of entries or path")
        self._entries = list(entries) if entries is not None else None
        self._path = Path(path) if path is not None else None
        self._cursor = 0

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]:
        if self._entries is None:
            if not self._path.is_file():
                raise ReplayMismatch(f"no transcript at {self._path}")
            self._entries = read_transcript(self._path)
        if self._cursor >= len(self._entries):
            raise ReplayMismatch(
                f"transcript exhausted after {self._cursor} replayed calls"
            )
        entry = self._entries[self._cursor]
        self._cursor += 1
        digest = request_digest(request.system_message, request.history, request.prompt)
        if entry.request_digest and entry.request_digest != digest:
            log.warning(
                "replay digest mismatch at entry %d (expected %s, got %s); "
                "continuing in recorded order",
                entry.sequence_no,
                entry.request_digest[:12],
                digest[:12],
            )
        return entry.response_text, entry.usage()


class RecordingBackend:
    """Tee around another backend that captures a transcript."""

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self.entries: list[TranscriptEntry] = []

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]:
        text, usage = self.inner.send(request)
        self.entries.append(
            TranscriptEntry(
                sequence_no=len(self.entries),
                request_digest=request_digest(
                    request.system_message, request.history, request.prompt
                ),
                response_text=text,
                input_tokens=usage.input_tokens,
                output_tokens=usage.output_tokens,
            )
        )
        return text, usage


class HttpChatBackend:
    """Live backend for OpenAI-compatible /chat/completions endpoints.

    The HTTP post callable is injectable so tests never open sockets.
    Credentials come from the named environment variable at call time and
    are never stored on the object.
    """

    def __init__(
        self,
        endpoint: str,
        credential_env: str = "",
        timeout: float = 120.0,
        http_post: Callable | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.timeout = timeout
        self._post = http_post

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]:
        import os

        import requests

        post = self._post or requests.post
        messages = [{"role": "system", "content": request.system_message}]
        for role, content in request.history:
            messages.append({"role": role, "content": content})
        messages.append({"role": "user", "content": request.prompt})
        headers = {"Content-Type": "application/json"}
        if self.credential_env:
            key = os.environ.get(self.credential_env, "")
            if not key:
                raise BackendUnreachable(
                    f"credential env var {self.credential_env} is unset"
                )
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": request.profile.model_name,
            "messages": messages,
            "temperature": request.profile.temperature,
        }
        try:
            response = post(
                self.endpoint, json=body, headers=headers, timeout=self.timeout
            )
            response.raise_for_status()
            doc = response.json()
        except Exception as err:  # requests exceptions and malformed bodies
            raise BackendUnreachable(f"chat endpoint failure: {err}") from err
        try:
            text = doc["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as err:
            raise BackendUnreachable(f"malformed chat response: {err}") from err
        usage_doc = doc.get("usage") or {}
        usage = TokenUsage(
            int(usage_doc.get("prompt_tokens", 0) or 0),
            int(usage_doc.get("completion_tokens", 0) or 0),
        )
        if usage.total_tokens == 0:
            usage = _estimated_usage(request, text)
        return text, usage


# ---------------------------------------------------------------------------
# Structured output
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResponseSchema:
    """A named JSON contract: which top-level fields must be present.

    field_hints are short per-field descriptions surfaced in prompts and in
    repair re-prompts; they are documentation, not validation.
    """

    schema_id: str
    required_fields: tuple[str, ...]
    field_hints: tuple[tuple[str, str], ...] = ()

    def field_list(self) -> str:
        return ", ".join(self.required_fields)

    def render_hint(self) -> str:
        hints = dict(self.field_hints)
        parts = []
        for name in self.required_fields:
            parts.append(f'"{name}": {hints.get(name, "...")}')
        return "{" + ", ".join(parts) + "}"


class SchemaRegistry:
    def __init__(self) -> None:
        self._schemas: dict[str, ResponseSchema] = {}

    def register(self, schema: ResponseSchema, replace: bool = False) -> None:
        existing = self._schemas.get(schema.schema_id)
        if existing is not None and existing != schema and not replace:
            raise ValueError(f"schema {schema.schema_id!r} already registered")
        self._schemas[schema.schema_id] = schema

    def get(self, schema_id: str) -> ResponseSchema:
        try:
            return self._schemas[schema_id]
        except KeyError:
            raise SchemaUnknown(f"no schema registered under {schema_id!r}") from None


SCHEMAS = SchemaRegistry()


def register_schema(schema: ResponseSchema, replace: bool = False) -> None:
    SCHEMAS.register(schema, replace=replace)


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?(.*?)```", re.DOTALL)
_decoder = json.JSONDecoder()


def extract_json_object(text: str) -> dict | None:
    """Pull the first JSON object out of model output.

    Tolerates code fences, prose before and after, and multiple candidate
    objects (first parseable dict wins). Returns None when nothing parses.
    """
    fenced = [block for block in _FENCE_RE.findall(text) if "{" in block]
    for candidate in (*fenced, text):
        obj = _scan_for_object(candidate)
        if obj is not None:
            return obj
    return None


def _scan_for_object(text: str) -> dict | None:
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = _decoder.raw_decode(text, idx)
        except ValueError:
            pass
        else:
            if isinstance(obj, dict):
                return obj
        idx = text.find("{", idx + 1)
    return None


def validate_required(schema: ResponseSchema, parsed: dict) -> str | None:
    """Return an error message, or None when all required fields are present."""
    missing = [name for name in schema.required_fields if name not in parsed]
    if missing:
        return "missing required field(s): " + ", ".join(missing)
    return None


@dataclass
class StructuredResponse:
    """Outcome of complete_structured.

    valid=False means repairs were exhausted; raw_text then carries the last
    unusable reply for logging. context_empty is set by retrieval-backed
    callers when no context chunks were available for the prompt.
    """

    raw_text: str
    parsed: dict
    schema_id: str
    valid: bool
    repair_attempts: int
    context_empty: bool = False


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


class ChatSession:
    """One conversation: a pinned system message plus alternating history.

    Context eviction drops the oldest user/assistant pair (never the system
    message) until the estimated request fits the profile's window.
    """

    def __init__(
        self,
        session_id: str,
        system_message: str,
        profile: ProviderProfile,
        backend: Backend,
        ledger: UsageLedger | None = None,
        registry: SchemaRegistry | None = None,
    ) -> None:
        self.session_id = session_id
        self.system_message = system_message
        self.profile = profile
        self.history: list[tuple[str, str]] = []
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._backend = backend
        self._registry = registry if registry is not None else SCHEMAS

    @property
    def backend(self) -> Backend:
        return self._backend

    def complete(self, prompt: str) -> tuple[str, TokenUsage]:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self._evict_to_fit(prompt)
        request = ChatRequest(
            self.system_message, tuple(self.history), prompt, self.profile
        )
        response_text, usage = self._backend.send(request)
        self.history.append(("user", prompt))
        self.history.append(("assistant", response_text))
        self.ledger.add(usage, self.profile)
        return response_text, usage

    def complete_structured(
        self,
        prompt: str,
        schema_id: str,
        max_repairs: int = DEFAULT_MAX_REPAIRS,
    ) -> StructuredResponse:
        if max_repairs < 0:
            raise ValueError("max_repairs must be non-negative")
        schema = self._registry.get(schema_id)
        ask = prompt
        raw = ""
        for attempt in range(max_repairs + 1):
            raw, _ = self.complete(ask)
            parsed = extract_json_object(raw)
            if parsed is None:
                error = "no JSON object found in the reply"
            else:
                error = validate_required(schema, parsed)
            if error is None:
                return StructuredResponse(
                    raw_text=raw,
                    parsed=parsed,
                    schema_id=schema_id,
                    valid=True,
                    repair_attempts=attempt,
                )
            if attempt == max_repairs:
                break
            ask = (
                f"Your previous reply could not be used: {error}. "
                f"Answer again with exactly one JSON object shaped like "
                f"{schema.render_hint()} and nothing else: no prose, no code fences."
            )
        log.warning(
            "structured repairs exhausted for schema %s in session %s",
            schema_id,
            self.session_id,
        )
        return StructuredResponse(
            raw_text=raw,
            parsed={},
            schema_id=schema_id,
            valid=False,
            repair_attempts=max_repairs,
        )

    def estimated_context_tokens(self, prompt: str = "") -> int:
        total = estimate_tokens(self.system_message) + estimate_tokens(prompt)
        for _, content in self.history:
            total += estimate_tokens(content)
        return total

    def _evict_to_fit(self, prompt: str) -> None:
        window = self.profile.context_window
        fixed = estimate_tokens(self.system_message) + estimate_tokens(prompt)
        if fixed > window:
            raise ContextOverflow(
                f"system message and prompt need ~{fixed} tokens; "
                f"window is {window}"
            )
        while self.history and self.estimated_context_tokens(prompt) > window:
            del self.history[:2]
            log.debug(
                "session %s evicted oldest exchange to fit context", self.session_id
            )


def record_transcript(session: ChatSession, sink) -> int:
    """Write the session's recorded exchanges to sink (path or file object).

    Returns the number of entries written. The session must be backed by a
    RecordingBackend.
    """
    backend = session.backend
    if not isinstance(backend, RecordingBackend):
        raise GatewayError("session was not created with a recording backend")
    lines = transcript_lines(backend.entries)
    payload = "".join(line + "\n" for line in lines)
    try:
        if hasattr(sink, "write"):
            sink.write(payload)
        else:
            path = Path(sink)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(payload, encoding="utf-8")
    except OSError as err:
        raise SinkWriteFailure(f"could not write transcript: {err}") from err
    return len(lines)
