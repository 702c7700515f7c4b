"""Reconnaissance agent: a self-iterating command loop that fingerprints a
target, then distills the session into a structured environment summary.

The loop is deliberately bounded four ways: the model declares completion,
an iteration ceiling trips, an exactly repeated command trips (a model that
re-issues a command has stopped making progress), or the gateway fails
fatally. One of these always fires, so the loop terminates on any model
output whatsoever.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import prompts
from .gateway import (
    ChatSession,
    GatewayError,
    ResponseSchema,
    estimate_tokens,
    register_schema,
)
from .rag import RagStore
from .sandbox import (
    CommandSpec,
    ExecutionResult,
    SandboxError,
    SandboxExecutor,
    rejection_result,
)

log = logging.getLogger(__name__)

MAX_ITERATIONS = 15
OBSERVATION_EXCERPT_CHARS = 4000

# thought is prompted for but not required: a reply that skips straight to
# the command is still actionable
register_schema(
    ResponseSchema(
        schema_id="recon_step",
        required_fields=("command", "done"),
        field_hints=(
            ("thought", '"<reasoning>"'),
            ("command", '"<shell command>"'),
            ("done", "true|false"),
        ),
    )
)
register_schema(
    ResponseSchema(
        schema_id="recon_summary",
        required_fields=("os_guess", "fingerprints", "notes"),
    )
)


class StopReason(str, Enum):
    AGENT_DECLARED_DONE = "agent_declared_done"
    MAX_ITERATIONS = "max_iterations"
    REPEATED_COMMAND = "repeated_command"
    FATAL_ERROR = "fatal_error"


@dataclass(frozen=True)
class ServiceFingerprint:
    host: str
    port: int
    protocol: str
    service: str
    product: str
    version: str = ""
    evidence: str = ""

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")
        if self.version and not self.product:
            raise ValueError("a version without a product is meaningless")

    def to_dict(self) -> dict:
        return {
            "host": self.host,
            "port": self.port,
            "protocol": self.protocol,
            "service": self.service,
            "product": self.product,
            "version": self.version,
            "evidence": self.evidence,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ServiceFingerprint":
        return cls(
            host=str(raw.get("host", "")),
            port=int(raw["port"]),
            protocol=str(raw.get("protocol", "tcp")),
            service=str(raw.get("service", "")),
            product=str(raw.get("product", "")),
            version=str(raw.get("version", "")),
            evidence=str(raw.get("evidence", "")),
        )


@dataclass(frozen=True)
class EnvironmentSummary:
    target: str
    os_guess: str
    fingerprints: tuple[ServiceFingerprint, ...]
    notes: str
    collected_at: str

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "os_guess": self.os_guess,
            "fingerprints": [fp.to_dict() for fp in self.fingerprints],
            "notes": self.notes,
            "collected_at": self.collected_at,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EnvironmentSummary":
        return cls(
            target=str(raw["target"]),
            os_guess=str(raw.get("os_guess", "")),
            fingerprints=tuple(
                ServiceFingerprint.from_dict(fp) for fp in raw.get("fingerprints", [])
            ),
            notes=str(raw.get("notes", "")),
            collected_at=str(raw.get("collected_at", "")),
        )


@dataclass
class ReconState:
    """Mutable progress of one reconnaissance loop."""

    target: str
    scope: tuple[str, ...]
    iteration: int = 0
    max_iterations: int = MAX_ITERATIONS
    command_history: list[tuple[str, ExecutionResult]] = field(default_factory=list)
    done: bool = False
    stop_reason: StopReason | None = None

    def seen_commands(self) -> set[str]:
        return {command for command, _ in self.command_history}

    def stop(self, reason: StopReason) -> None:
        self.done = True
        self.stop_reason = reason


def target_key(target: str) -> str:
    """Filesystem-safe content address for a target string."""
    return hashlib.sha256(target.encode("utf-8")).hexdigest()[:16]


def env_corpus_id(target: str) -> str:
    return f"env_{target_key(target)}"


class EnvironmentStore:
    """Per-target environment summaries on disk, mirrored into a RAG corpus.

    Filenames are content-addressed from the target string, so two agents
    summarizing different targets never collide.
    """

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, target: str) -> Path:
        return self.root / f"{target_key(target)}.json"

    def save(self, summary: EnvironmentSummary) -> Path:
        path = self.path_for(summary.target)
        path.write_text(
            json.dumps(
                summary.to_dict(), sort_keys=True, ensure_ascii=False, indent=2
            )
            + "\n",
            encoding="utf-8",
        )
        return path

    def load(self, target: str) -> EnvironmentSummary | None:
        path = self.path_for(target)
        if not path.is_file():
            return None
        return EnvironmentSummary.from_dict(
            json.loads(path.read_text(encoding="utf-8"))
        )

    def index_into(self, rag: RagStore, summary: EnvironmentSummary) -> str:
        """Index the summary as retrievable documents; returns the corpus id."""
        corpus_id = env_corpus_id(summary.target)
        documents = [
            (
                "summary",
                json.dumps(summary.to_dict(), sort_keys=True, ensure_ascii=False),
                f"env://{summary.target}/summary",
            )
        ]
        for i, fp in enumerate(summary.fingerprints):
            text = (
                f"host {fp.host} port {fp.port}/{fp.protocol} runs service "
                f"{fp.service}: product {fp.product} version {fp.version}. "
                f"evidence: {fp.evidence}"
            )
            documents.append((f"fingerprint-{i}", text, f"env://{summary.target}/fp{i}"))
        if summary.notes:
            documents.append(
                ("notes", summary.notes, f"env://{summary.target}/notes")
            )
        rag.index(corpus_id, documents)
        return corpus_id


def _excerpt(text: str, limit: int = OBSERVATION_EXCERPT_CHARS) -> str:
    if len(text) <= limit:
        return text
    return text[:limit] + "\n[... output truncated ...]"


def _tool_hints(rag: RagStore | None, corpus_id: str, query: str) -> str:
    if rag is None or not rag.corpus_exists(corpus_id):
        return ""
    hits = rag.retrieve(corpus_id, query, k=3)
    if not hits:
        return ""
    joined = "\n".join(hit.chunk.text for hit in hits)
    return prompts.RECON_TOOL_HINTS_HEADER + joined + "\n\n"


def _coerce_done(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.strip().lower() in ("true", "yes", "done", "1")
    return bool(value)


def recon_step(
    state: ReconState,
    session: ChatSession,
    executor: SandboxExecutor,
    tool_rag: RagStore | None = None,
    tool_corpus: str = "tooldocs",
) -> ReconState:
    """Advance the loop by one model turn (and at most one command).

    Returns the same state object, mutated. Once state.done is set, further
    calls are no-ops.
    """
    if state.done:
        return state

    if state.command_history:
        last_command, last_result = state.command_history[-1]
        observation = prompts.RECON_OBSERVATION_TEMPLATE.format(
            command=last_command,
            exit_code=last_result.exit_code,
            stdout=_excerpt(last_result.stdout),
            stderr=_excerpt(last_result.stderr),
        )
    else:
        observation = prompts.RECON_FIRST_OBSERVATION
    prompt = prompts.RECON_STEP_TEMPLATE.format(
        target=state.target,
        iteration=state.iteration + 1,
        max_iterations=state.max_iterations,
        tool_hints=_tool_hints(
            tool_rag, tool_corpus, f"reconnaissance fingerprint {state.target}"
        ),
        observation=observation,
    )

    try:
        response = session.complete_structured(prompt, "recon_step")
    except GatewayError as err:
        log.error("recon loop aborted by gateway failure: %s", err)
        state.stop(StopReason.FATAL_ERROR)
        return state

    state.iteration += 1
    if not response.valid:
        log.warning(
            "recon iteration %d produced no usable JSON; counting it against "
            "the budget",
            state.iteration,
        )
        if state.iteration >= state.max_iterations:
            state.stop(StopReason.MAX_ITERATIONS)
        return state

    if _coerce_done(response.parsed.get("done")):
        state.stop(StopReason.AGENT_DECLARED_DONE)
        return state

    command = str(response.parsed.get("command") or "").strip()
    if not command:
        log.warning("recon iteration %d: done=false with empty command", state.iteration)
        if state.iteration >= state.max_iterations:
            state.stop(StopReason.MAX_ITERATIONS)
        return state

    if command in state.seen_commands():
        log.info("recon loop stopping: command repeated verbatim: %s", command)
        state.stop(StopReason.REPEATED_COMMAND)
        return state

    try:
        result = executor.run(
            CommandSpec(command_line=command, target_scope=state.scope)
        )
    except SandboxError as err:
        result = rejection_result(str(err))
    state.command_history.append((command, result))

    if state.iteration >= state.max_iterations:
        state.stop(StopReason.MAX_ITERATIONS)
    return state


def run_recon(
    state: ReconState,
    session: ChatSession,
    executor: SandboxExecutor,
    tool_rag: RagStore | None = None,
    tool_corpus: str = "tooldocs",
) -> ReconState:
    """Drive recon_step until a stop reason fires."""
    while not state.done:
        recon_step(state, session, executor, tool_rag, tool_corpus)
    return state


def _render_history(state: ReconState, budget_tokens: int) -> str:
    """Serialize the command history, newest first dropped last.

    When the serialization would overrun the budget, older entries are
    elided and only the most informative suffix is kept; the model needs
    recent service banners more than early misses.
    """
    entries = []
    for i, (command, result) in enumerate(state.command_history, start=1):
        entries.append(
            f"### Command {i}\n$ {command}\n"
            f"exit={result.exit_code}\n"
            f"stdout:\n{_excerpt(result.stdout)}\n"
            f"stderr:\n{_excerpt(result.stderr)}\n"
        )
    if not entries:
        return "(no commands were run)"
    kept: list[str] = []
    used = 0
    for entry in reversed(entries):
        cost = estimate_tokens(entry)
        if used + cost > budget_tokens and kept:
            kept.append("(earlier commands elided for space)")
            break
        kept.append(entry)
        used += cost
    return "\n".join(reversed(kept))


def summarize_environment(
    state: ReconState,
    session: ChatSession,
    store: EnvironmentStore,
    rag: RagStore | None = None,
    collected_at: str = "",
) -> EnvironmentSummary:
    """Distill a finished loop into an EnvironmentSummary and persist it.

    Tolerant of model sloppiness: malformed fingerprint entries are dropped
    with a note rather than failing the stage, and conflicting claims about
    the same port are flagged for the planner to see.
    """
    if not state.done:
        raise ValueError("cannot summarize an unfinished recon loop")

    budget = (
        session.profile.context_window
        - estimate_tokens(session.system_message)
        - estimate_tokens(prompts.RECON_SUMMARY_TEMPLATE)
        - 1024
    )
    prompt = prompts.RECON_SUMMARY_TEMPLATE.format(
        target=state.target, history=_render_history(state, budget)
    )
    response = session.complete_structured(prompt, "recon_summary")

    notes_parts: list[str] = []
    fingerprints: list[ServiceFingerprint] = []
    os_guess = ""
    if response.valid:
        os_guess = str(response.parsed.get("os_guess") or "")
        notes = response.parsed.get("notes")
        if notes:
            notes_parts.append(str(notes))
        raw_fps = response.parsed.get("fingerprints")
        if isinstance(raw_fps, list):
            for raw in raw_fps:
                fp = _coerce_fingerprint(raw, state.target)
                if fp is None:
                    notes_parts.append(f"dropped malformed fingerprint entry: {raw!r}")
                else:
                    fingerprints.append(fp)
    else:
        notes_parts.append(
            "summary model output was unusable; no fingerprints extracted"
        )

    conflicts = _port_conflicts(fingerprints)
    if conflicts:
        notes_parts.append(
            "conflicting fingerprints for port(s): "
            + ", ".join(str(p) for p in conflicts)
        )

    summary = EnvironmentSummary(
        target=state.target,
        os_guess=os_guess,
        fingerprints=tuple(fingerprints),
        notes=" | ".join(notes_parts),
        collected_at=collected_at,
    )
    store.save(summary)
    if rag is not None:
        store.index_into(rag, summary)
    return summary


def _coerce_fingerprint(raw, default_host: str) -> ServiceFingerprint | None:
    if not isinstance(raw, dict):
        return None
    try:
        port = int(raw.get("port"))
    except (TypeError, ValueError):
        return None
    product = str(raw.get("product") or "").strip()
    version = str(raw.get("version") or "").strip()
    if version and not product:
        version = ""  # a version claim with no product is noise
    try:
        return ServiceFingerprint(
            host=str(raw.get("host") or default_host),
            port=port,
            protocol=str(raw.get("protocol") or "tcp"),
            service=str(raw.get("service") or ""),
            product=product,
            version=version,
            evidence=str(raw.get("evidence") or ""),
        )
    except ValueError:
        return None


def _port_conflicts(fingerprints: list[ServiceFingerprint]) -> list[int]:
    by_port: dict[tuple[str, int], set[tuple[str, str]]] = {}
    for fp in fingerprints:
        by_port.setdefault((fp.host, fp.port), set()).add((fp.product, fp.version))
    return sorted(port for (_, port), claims in by_port.items() if len(claims) > 1)


def is_target_identified(summary: EnvironmentSummary, application: str = "") -> bool:
    """Stage-completion test for reconnaissance.

    With an expected application name: some fingerprint's product must match
    it case-insensitively. Without one: any non-empty product counts.
    """
    if application:
        wanted = application.strip().lower()
        return any(fp.product.strip().lower() == wanted for fp in summary.fingerprints)
    return any(fp.product.strip() for fp in summary.fingerprints)
