"""Execution agent: prepares an exploit's parameters, then drives it through
a bounded command loop with error-aware self-reflection.

Two discipline rules distinguish this loop from plain "ask the model what to
run": errors are normalized and digested so the loop halts the second time
the same failure appears (no thrashing), and a success claim only counts
when the model's quoted evidence is verbatim in captured stdout (no
self-congratulation without proof).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from . import prompts
from .gateway import ChatSession, GatewayError, ResponseSchema, register_schema
from .knowledge import ExploitNode
from .planning import ExploitPlan
from .rag import RagStore
from .recon import env_corpus_id
from .sandbox import (
    CommandSpec,
    ExecutionResult,
    SandboxError,
    SandboxExecutor,
    rejection_result,
)

log = logging.getLogger(__name__)

MAX_STEPS = 20
PREP_TOP_K = 5

register_schema(
    ResponseSchema(
        schema_id="exploit_params",
        required_fields=("parameters",),
    )
)
register_schema(
    ResponseSchema(
        schema_id="param_fill",
        required_fields=("value", "found"),
    )
)
register_schema(
    ResponseSchema(
        schema_id="exploit_step",
        required_fields=("thought", "command", "done"),
        field_hints=(
            ("thought", '"<reasoning>"'),
            ("command", '"<shell command or empty>"'),
            ("done", "true|false"),
        ),
    )
)


class ParamSource(str, Enum):
    ENVIRONMENT_STORE = "environment_store"
    DEFAULT = "default"
    UNFILLABLE = "unfillable"


class OutcomeStatus(str, Enum):
    SUCCESS = "success"
    FAILED = "failed"
    ABORTED_REPEATED_ERROR = "aborted_repeated_error"
    ABORTED_MAX_STEPS = "aborted_max_steps"
    ABORTED_UNFILLABLE_PARAMS = "aborted_unfillable_params"


# Parameter names that default to the engagement target when the
# environment store cannot answer.
_TARGET_PARAM_NAMES = frozenset(
    {"target", "target_ip", "target_host", "host", "ip", "rhost", "rhosts", "url_host"}
)


@dataclass
class ParameterRequirement:
    name: str
    description: str = ""
    value: str = ""
    source: ParamSource = ParamSource.UNFILLABLE

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "value": self.value,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ParameterRequirement":
        return cls(
            name=str(raw["name"]),
            description=str(raw.get("description", "")),
            value=str(raw.get("value", "")),
            source=ParamSource(raw.get("source", "unfillable")),
        )


@dataclass
class ErrorHistoryEntry:
    step_no: int
    command: str
    error_digest: str
    error_excerpt: str = ""
    fix_applied: str = ""

    def to_dict(self) -> dict:
        return {
            "step_no": self.step_no,
            "command": self.command,
            "error_digest": self.error_digest,
            "error_excerpt": self.error_excerpt,
            "fix_applied": self.fix_applied,
        }


@dataclass
class ExploitOutcome:
    status: OutcomeStatus
    evidence: str = ""
    steps_taken: int = 0
    error_history: list[ErrorHistoryEntry] = field(default_factory=list)
    declared_success: bool = False

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "evidence": self.evidence,
            "steps_taken": self.steps_taken,
            "error_history": [entry.to_dict() for entry in self.error_history],
            "declared_success": self.declared_success,
        }


# -- error normalization -------------------------------------------------------

# Volatile substrings scrubbed before digesting, so that "same error, new
# timestamp" hashes identically: ISO and syslog timestamps, hex addresses,
# ephemeral ports, and temp paths.
_NORMALIZERS = (
    (re.compile(r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:?\d{2})?"), "<ts>"),
    (re.compile(r"\b(?:Mon|Tue|Wed|Thu|Fri|Sat|Sun)?\s?(?:Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec) +\d{1,2} \d{2}:\d{2}:\d{2}\b"), "<ts>"),
    (re.compile(r"\b\d{2}:\d{2}:\d{2}(?:\.\d+)?\b"), "<ts>"),
    (re.compile(r"0x[0-9a-fA-F]{4,}"), "<addr>"),
    (re.compile(r"(?<=[:\s])(?:3[2-9]\d{3}|[4-5]\d{4}|6[0-4]\d{3}|65[0-4]\d{2}|655[0-2]\d|6553[0-5])\b"), "<port>"),
    (re.compile(r"/tmp/[\w./-]+"), "<tmp>"),
    (re.compile(r"/var/(?:tmp|folders)/[\w./-]+"), "<tmp>"),
)


def normalize_error(text: str) -> str:
    for pattern, replacement in _NORMALIZERS:
        text = pattern.sub(replacement, text)
    return text.strip()


def error_digest(result: ExecutionResult) -> str:
    payload = f"exit={result.exit_code}\n{normalize_error(result.stderr)}\n{normalize_error(result.stdout)}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def is_error(result: ExecutionResult) -> bool:
    return result.exit_code != 0 or result.timed_out


# -- the agent -----------------------------------------------------------------


class ExecutionAgent:
    """Parameter preparation and the exploit command loop."""

    def __init__(
        self,
        executor: SandboxExecutor,
        rag: RagStore,
        scope: tuple[str, ...],
        max_steps: int = MAX_STEPS,
        history_sink: Callable[[dict], None] | None = None,
    ) -> None:
        self.executor = executor
        self.rag = rag
        self.scope = scope
        self.max_steps = max_steps
        self._history_sink = history_sink

    # -- preparation ------------------------------------------------------------

    def prepare(
        self, exploit: ExploitNode, target: str, session: ChatSession
    ) -> list[ParameterRequirement]:
        """Discover what the exploit needs, then fill it from what we know.

        Fill order per parameter: the environment store first, then built-in
        defaults (target-ish names resolve to the engagement target), else
        the requirement stays unfillable and the loop will refuse to start.
        """
        corpus_id = self._exploit_corpus(exploit)
        listing = self.rag.synthesize(
            corpus_id,
            prompts.PREP_LIST_TEMPLATE.format(source_ref=exploit.source_ref),
            PREP_TOP_K,
            session,
            "exploit_params",
        )
        if not listing.valid or not isinstance(listing.parsed.get("parameters"), list):
            log.warning(
                "parameter listing unusable for %s; marking exploit unrunnable",
                exploit.source_ref,
            )
            return [
                ParameterRequirement(
                    name="__parameter_listing__",
                    description="the exploit's parameter list could not be determined",
                    source=ParamSource.UNFILLABLE,
                )
            ]

        requirements: list[ParameterRequirement] = []
        seen: set[str] = set()
        for raw in listing.parsed["parameters"]:
            if not isinstance(raw, dict):
                continue
            name = str(raw.get("name") or "").strip()
            if not name or name.lower() in seen:
                continue
            seen.add(name.lower())
            requirements.append(
                ParameterRequirement(
                    name=name, description=str(raw.get("description") or "")
                )
            )

        env_corpus = env_corpus_id(target)
        have_env = self.rag.corpus_exists(env_corpus)
        for requirement in requirements:
            if have_env:
                fill = self.rag.synthesize(
                    env_corpus,
                    prompts.PREP_FILL_TEMPLATE.format(
                        name=requirement.name, description=requirement.description
                    ),
                    PREP_TOP_K,
                    session,
                    "param_fill",
                )
                if fill.valid and fill.parsed.get("found"):
                    value = str(fill.parsed.get("value") or "").strip()
                    if value:
                        requirement.value = value
                        requirement.source = ParamSource.ENVIRONMENT_STORE
                        continue
            if requirement.name.lower() in _TARGET_PARAM_NAMES:
                requirement.value = target
                requirement.source = ParamSource.DEFAULT
                continue
            requirement.source = ParamSource.UNFILLABLE
        return requirements

    def _exploit_corpus(self, exploit: ExploitNode) -> str:
        corpus_id = "exp_" + hashlib.sha256(
            exploit.source_ref.encode("utf-8")
        ).hexdigest()[:16]
        if self.rag.corpus_exists(corpus_id):
            return corpus_id
        documents: list[tuple[str, str, str]] = []
        local = Path(exploit.local_path) if exploit.local_path else None
        if local is not None and local.is_dir():
            for file_path in sorted(local.rglob("*")):
                if not file_path.is_file() or file_path.stat().st_size > 64 * 1024:
                    continue
                try:
                    text = file_path.read_text(encoding="utf-8", errors="replace")
                except OSError:
                    continue
                documents.append(
                    (
                        str(file_path.relative_to(local)),
                        text,
                        f"file://{file_path}",
                    )
                )
        elif local is not None and local.is_file():
            documents.append(
                (
                    local.name,
                    local.read_text(encoding="utf-8", errors="replace"),
                    f"file://{local}",
                )
            )
        meta = (
            f"exploit {exploit.source_ref}: effect {exploit.effect}; "
            f"applicable versions {exploit.applicable_versions or 'any'}; "
            f"requirements: {'; '.join(exploit.requirements) or 'none'}"
        )
        documents.append(("metadata", meta, exploit.source_ref))
        self.rag.index(corpus_id, documents)
        return corpus_id

    # -- the loop ----------------------------------------------------------------

    def exploit_loop(
        self,
        exploit: ExploitNode,
        parameters: list[ParameterRequirement],
        session: ChatSession,
    ) -> ExploitOutcome:
        """Drive one exploit to success, declared failure, or an abort.

        Aborts: unfillable parameters (before any command), a repeated
        normalized error digest, the step ceiling, or a fatal gateway error
        (folded into FAILED with the reason in the evidence field).
        """
        unfillable = [p.name for p in parameters if p.source is ParamSource.UNFILLABLE]
        if unfillable:
            log.info(
                "refusing to run %s: unfillable parameter(s) %s",
                exploit.source_ref,
                ", ".join(unfillable),
            )
            return ExploitOutcome(
                status=OutcomeStatus.ABORTED_UNFILLABLE_PARAMS,
                evidence="unfillable: " + ", ".join(unfillable),
            )

        stdout_log: list[str] = []
        error_history: list[ErrorHistoryEntry] = []
        seen_digests: set[str] = set()
        last: tuple[str, ExecutionResult] | None = None
        params_text = json.dumps(
            {p.name: p.value for p in parameters}, sort_keys=True, ensure_ascii=False
        )

        steps = 0
        while steps < self.max_steps:
            prompt = self._step_prompt(
                exploit, params_text, steps + 1, error_history, last
            )
            try:
                response = session.complete_structured(prompt, "exploit_step")
            except GatewayError as err:
                log.error("exploit loop aborted by gateway failure: %s", err)
                return ExploitOutcome(
                    status=OutcomeStatus.FAILED,
                    evidence=f"gateway failure: {err}",
                    steps_taken=steps,
                    error_history=error_history,
                )
            steps += 1
            if not response.valid:
                log.warning("exploit step %d unusable; counting it", steps)
                continue

            done = _coerce_bool(response.parsed.get("done"))
            if done:
                declared = _coerce_bool(response.parsed.get("success"))
                evidence = str(response.parsed.get("evidence") or "")
                verified = bool(
                    declared
                    and evidence
                    and any(evidence in captured for captured in stdout_log)
                )
                if declared and not verified:
                    log.warning(
                        "success claim rejected: evidence not found in stdout"
                    )
                return ExploitOutcome(
                    status=OutcomeStatus.SUCCESS if verified else OutcomeStatus.FAILED,
                    evidence=evidence if verified else "",
                    steps_taken=steps,
                    error_history=error_history,
                    declared_success=declared,
                )

            command = str(response.parsed.get("command") or "").strip()
            if not command:
                continue
            if error_history and not error_history[-1].fix_applied:
                error_history[-1].fix_applied = command

            try:
                result = self.executor.run(
                    CommandSpec(command_line=command, target_scope=self.scope)
                )
            except SandboxError as err:
                result = rejection_result(str(err))
            stdout_log.append(result.stdout)
            self._record_step(steps, command, result)
            last = (command, result)

            if is_error(result):
                digest = error_digest(result)
                entry = ErrorHistoryEntry(
                    step_no=steps,
                    command=command,
                    error_digest=digest,
                    error_excerpt=normalize_error(result.stderr)[:400],
                )
                error_history.append(entry)
                if digest in seen_digests:
                    log.info("same error twice (digest %s); aborting", digest)
                    return ExploitOutcome(
                        status=OutcomeStatus.ABORTED_REPEATED_ERROR,
                        steps_taken=steps,
                        error_history=error_history,
                    )
                seen_digests.add(digest)

        return ExploitOutcome(
            status=OutcomeStatus.ABORTED_MAX_STEPS,
            steps_taken=steps,
            error_history=error_history,
        )

    def _step_prompt(
        self,
        exploit: ExploitNode,
        params_text: str,
        step: int,
        error_history: list[ErrorHistoryEntry],
        last: tuple[str, ExecutionResult] | None,
    ) -> str:
        if last is None:
            observation = prompts.EXPLOIT_FIRST_OBSERVATION
        else:
            command, result = last
            observation = prompts.EXPLOIT_OBSERVATION_TEMPLATE.format(
                command=command,
                exit_code=result.exit_code,
                timeout_note=" (timed out)" if result.timed_out else "",
                stdout=result.stdout[:4000],
                stderr=result.stderr[:4000],
            )
        if error_history:
            lines = [
                f"  step {e.step_no}: {e.command} -> {e.error_excerpt[:160]}"
                for e in error_history[-5:]
            ]
            errors = prompts.ERROR_HISTORY_HEADER + "\n".join(lines) + "\n"
        else:
            errors = ""
        return prompts.EXPLOIT_STEP_TEMPLATE.format(
            source_ref=exploit.source_ref,
            cve_id="(see plan)",
            effect=exploit.effect,
            local_path=exploit.local_path or "(none)",
            parameters=params_text,
            step=step,
            max_steps=self.max_steps,
            error_history=errors,
            observation=observation,
        )

    def _record_step(self, step_no: int, command: str, result: ExecutionResult) -> None:
        if self._history_sink is None:
            return
        self._history_sink(
            {
                "step_no": step_no,
                "command": command,
                "exit_code": result.exit_code,
                "stdout": result.stdout[:2000],
                "stderr": result.stderr[:2000],
                "error_digest": error_digest(result) if is_error(result) else "",
                "timed_out": result.timed_out,
            }
        )

    # -- plan driver ---------------------------------------------------------------

    def run_plan(
        self,
        plan: ExploitPlan,
        target: str,
        session_factory: Callable[[str], ChatSession],
    ) -> tuple[list[ExploitOutcome], int | None]:
        """Attempt plan entries in order; stop at the first verified success.

        Returns (outcomes, index of the successful entry or None). The
        outcomes list covers exactly the attempted prefix of the plan.
        """
        outcomes: list[ExploitOutcome] = []
        for i, entry in enumerate(plan.entries):
            parameters = self.prepare(
                entry.exploit, target, session_factory(f"prep-{i}")
            )
            outcome = self.exploit_loop(
                entry.exploit, parameters, session_factory(f"exploit-{i}")
            )
            outcomes.append(outcome)
            if outcome.status is OutcomeStatus.SUCCESS:
                return outcomes, i
        return outcomes, None


def _coerce_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.strip().lower() in ("true", "yes", "1")
    return bool(value)
