"""Run orchestration: wires the agents into the three-stage pipeline and
owns everything on disk for a run.

Stage order is fixed: intelligence gathering, then vulnerability analysis,
then exploitation. A stage only runs when its predecessor completed (or the
operator forces it), and the run record is rewritten after every stage so a
crash mid-run leaves a loadable, reportable state behind.

Replay determinism is a first-class requirement: with a replay backend and
the deterministic clock, two runs of the same config produce byte-identical
records and reports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from . import prompts
from .config import ConfigError, ProviderSpec, resolve_provider
from .execution import ExecutionAgent, ExploitOutcome, OutcomeStatus
from .gateway import (
    Backend,
    ChatSession,
    HttpChatBackend,
    RecordingBackend,
    ReplayBackend,
    UsageLedger,
    write_transcript,
)
from .knowledge import KnowledgeTree
from .planning import AttackSurfaceSuggestion, ExploitPlan, PlanningAgent
from .rag import RagStore
from .recon import (
    EnvironmentStore,
    EnvironmentSummary,
    ReconState,
    is_target_identified,
    run_recon,
    summarize_environment,
)
from .sandbox import SandboxExecutor, ScopeSet
from .search import Connector, SearchAgent, SearchAgentConfig

log = logging.getLogger(__name__)

STAGE_INTELLIGENCE = "intelligence_gathering"
STAGE_ANALYSIS = "vulnerability_analysis"
STAGE_EXPLOITATION = "exploitation"
STAGES = (STAGE_INTELLIGENCE, STAGE_ANALYSIS, STAGE_EXPLOITATION)

STATUS_COMPLETE = "complete"
STATUS_INCOMPLETE = "incomplete"
STATUS_SKIPPED = "skipped"

KNOWLEDGE_ONLINE = "online"
KNOWLEDGE_OFFLINE = "offline_only"

_TOOLDOCS_DIR = Path(__file__).parent / "data" / "tooldocs"
TOOLDOCS_CORPUS = "tooldocs"


class StageIncomplete(Exception):
    """A stage was requested while its predecessor had not completed."""


@dataclass(frozen=True)
class RunConfig:
    """Operator intent for one run. Validation happens in __post_init__;
    an instance that exists is safe to run."""

    target: str
    scope: tuple[str, ...]
    provider: str = "replay"
    application: str = ""
    version: str = ""
    knowledge_mode: str = KNOWLEDGE_OFFLINE
    knowledge_dir: str = ""
    output_dir: str = "runs"
    replay_dir: str = ""
    record_dir: str = ""
    provider_config: str = ""
    max_iterations: int = 15
    max_steps: int = 20
    max_repairs: int = 2
    force_stages: bool = False

    def __post_init__(self) -> None:
        if not self.target.strip():
            raise ConfigError("target must be non-empty")
        if not self.scope:
            raise ConfigError("scope must be non-empty")
        if not ScopeSet(self.scope).contains(self.target):
            raise ConfigError(
                f"target {self.target!r} is outside the declared scope"
            )
        if self.knowledge_mode not in (KNOWLEDGE_ONLINE, KNOWLEDGE_OFFLINE):
            raise ConfigError(
                f"knowledge_mode must be {KNOWLEDGE_ONLINE!r} or "
                f"{KNOWLEDGE_OFFLINE!r}"
            )
        for name in ("max_iterations", "max_steps", "max_repairs"):
            if getattr(self, name) < 0 or (
                name != "max_repairs" and getattr(self, name) == 0
            ):
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "scope": list(self.scope),
            "provider": self.provider,
            "application": self.application,
            "version": self.version,
            "knowledge_mode": self.knowledge_mode,
            "knowledge_dir": self.knowledge_dir,
            "output_dir": self.output_dir,
            "replay_dir": self.replay_dir,
            "record_dir": self.record_dir,
            "provider_config": self.provider_config,
            "max_iterations": self.max_iterations,
            "max_steps": self.max_steps,
            "max_repairs": self.max_repairs,
            "force_stages": self.force_stages,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f: raw[f] for f in cls.__dataclass_fields__ if f in raw}
        if "scope" in known:
            known["scope"] = tuple(str(s) for s in known["scope"])
        return cls(**known)


def run_id_for(config: RunConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def iso_utc(timestamp: float) -> str:
    return datetime.fromtimestamp(timestamp, timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )


class ReplayClock:
    """Deterministic clock: starts at the epoch, advances 1s per reading."""

    def __init__(self, start: float = 0.0, tick: float = 1.0) -> None:
        self._now = start
        self._tick = tick

    def __call__(self) -> float:
        value = self._now
        self._now += self._tick
        return value


# ---------------------------------------------------------------------------
# Session factory
# ---------------------------------------------------------------------------


class SessionFactory:
    """Creates named sessions bound to the run's backend mode.

    Each logical conversation in a run ("recon", "prep-0", ...) gets its own
    session and, in replay/record mode, its own transcript file of the same
    name. Ledgers stay per-session; total_usage() folds them for the record.
    """

    def __init__(
        self,
        spec: ProviderSpec,
        replay_dir: Path | None = None,
        record: bool = False,
        max_repairs: int = 2,
        backend_factory: Callable[[str], Backend] | None = None,
    ) -> None:
        self.spec = spec
        self.replay_dir = replay_dir
        self.record = record
        self.max_repairs = max_repairs
        self._backend_factory = backend_factory
        self._sessions: dict[str, ChatSession] = {}
        self._lock = threading.Lock()

    def session(self, name: str, system_message: str) -> ChatSession:
        with self._lock:
            if name in self._sessions:
                raise ValueError(f"session name {name!r} already used in this run")
            if self._backend_factory is not None:
                backend: Backend = self._backend_factory(name)
            elif self.replay_dir is not None:
                backend = ReplayBackend(path=self.replay_dir / f"{name}.jsonl")
            else:
                backend = HttpChatBackend(
                    endpoint=self.spec.endpoint,
                    credential_env=self.spec.credential_env,
                )
            if self.record:
                backend = RecordingBackend(backend)
            session = ChatSession(
                session_id=name,
                system_message=system_message,
                profile=self.spec.profile,
                backend=backend,
            )
            self._sessions[name] = session
            return session

    def sessions(self) -> dict[str, ChatSession]:
        return dict(self._sessions)

    def total_usage(self) -> UsageLedger:
        total = UsageLedger()
        for session in self._sessions.values():
            total.merge(session.ledger)
        return total

    def flush_transcripts(self, directory: Path) -> int:
        """Write one transcript file per recorded session; returns count."""
        written = 0
        for name, session in self._sessions.items():
            backend = session.backend
            if isinstance(backend, RecordingBackend) and backend.entries:
                write_transcript(backend.entries, directory / f"{name}.jsonl")
                written += 1
        return written


# ---------------------------------------------------------------------------
# The run record
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    run_id: str
    config: RunConfig
    started_at: str = ""
    finished_at: str = ""
    stage_statuses: dict[str, dict] = field(default_factory=dict)
    summary: EnvironmentSummary | None = None
    suggestions: list[AttackSurfaceSuggestion] = field(default_factory=list)
    plan: ExploitPlan = field(default_factory=ExploitPlan)
    outcomes: list[ExploitOutcome] = field(default_factory=list)
    success_index: int | None = None
    ledger: dict = field(default_factory=dict)

    def stage_status(self, stage: str) -> str:
        return self.stage_statuses.get(stage, {}).get("status", STATUS_SKIPPED)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config.to_dict(),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "stage_statuses": self.stage_statuses,
            "summary": self.summary.to_dict() if self.summary else None,
            "suggestions": [s.to_dict() for s in self.suggestions],
            "plan": self.plan.to_dict(),
            "outcomes": [o.to_dict() for o in self.outcomes],
            "success_index": self.success_index,
            "ledger": self.ledger,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunRecord":
        from .execution import ErrorHistoryEntry

        outcomes = []
        for raw_outcome in raw.get("outcomes", []):
            outcome = ExploitOutcome(
                status=OutcomeStatus(raw_outcome["status"]),
                evidence=str(raw_outcome.get("evidence", "")),
                steps_taken=int(raw_outcome.get("steps_taken", 0)),
                declared_success=bool(raw_outcome.get("declared_success", False)),
            )
            for raw_entry in raw_outcome.get("error_history", []):
                outcome.error_history.append(
                    ErrorHistoryEntry(
                        step_no=int(raw_entry["step_no"]),
                        command=str(raw_entry.get("command", "")),
                        error_digest=str(raw_entry.get("error_digest", "")),
                        error_excerpt=str(raw_entry.get("error_excerpt", "")),
                        fix_applied=str(raw_entry.get("fix_applied", "")),
                    )
                )
            outcomes.append(outcome)
        return cls(
            run_id=str(raw["run_id"]),
            config=RunConfig.from_dict(raw["config"]),
            started_at=str(raw.get("started_at", "")),
            finished_at=str(raw.get("finished_at", "")),
            stage_statuses=dict(raw.get("stage_statuses", {})),
            summary=(
                EnvironmentSummary.from_dict(raw["summary"])
                if raw.get("summary")
                else None
            ),
            suggestions=[
                AttackSurfaceSuggestion.from_dict(s)
                for s in raw.get("suggestions", [])
            ],
            plan=ExploitPlan.from_dict(raw.get("plan", {})),
            outcomes=outcomes,
            success_index=raw.get("success_index"),
            ledger=dict(raw.get("ledger", {})),
        )


def record_to_bytes(record: RunRecord) -> bytes:
    return (
        json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False, indent=2)
        + "\n"
    ).encode("utf-8")


def save_record(record: RunRecord, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(record_to_bytes(record))
    tmp.replace(path)


def load_record(path: Path) -> RunRecord:
    return RunRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# The runner
# ---------------------------------------------------------------------------


class PipelineRunner:
    """Executes pipeline stages against one run directory.

    Construct it, then call run_intelligence / run_analysis /
    run_exploitation in order (or run_all). Stage gating is enforced here:
    asking for a stage whose predecessor is not complete raises
    StageIncomplete unless the config forces stages. Sessions for a stage
    are only created once the gate has passed.
    """

    def __init__(
        self,
        config: RunConfig,
        connectors: Sequence[Connector] = (),
        clock: Callable[[], float] | None = None,
        backend_factory: Callable[[str], Backend] | None = None,
        executor: SandboxExecutor | None = None,
    ) -> None:
        self.config = config
        self.connectors = list(connectors)
        if (
            config.knowledge_mode == KNOWLEDGE_ONLINE
            and not self.connectors
        ):
            raise ConfigError(
                "knowledge_mode online requires at least one search connector"
            )
        self.run_id = run_id_for(config)
        self.run_dir = Path(config.output_dir) / self.run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "transcripts").mkdir(exist_ok=True)

        if clock is not None:
            self.clock = clock
        elif config.replay_dir:
            self.clock = ReplayClock()
        else:
            import time

            self.clock = time.time

        spec = resolve_provider(
            config.provider, config.provider_config or None
        )
        self.factory = SessionFactory(
            spec=spec,
            replay_dir=Path(config.replay_dir) if config.replay_dir else None,
            record=bool(config.record_dir),
            max_repairs=config.max_repairs,
            backend_factory=backend_factory,
        )
        self.executor = executor or SandboxExecutor(
            audit_log_path=self.run_dir / "audit.jsonl"
        )
        self.rag = RagStore(self.run_dir / "rag")
        self.env_store = EnvironmentStore(self.run_dir / "env")
        knowledge_dir = config.knowledge_dir or str(self.run_dir / "kb")
        self.knowledge_dir = Path(knowledge_dir)
        self.tree = KnowledgeTree.load(self.knowledge_dir)
        self._history_path = self.run_dir / "history.jsonl"
        self._history_lock = threading.Lock()

        record_path = self.run_dir / "record.json"
        if record_path.is_file():
            self.record = load_record(record_path)
        else:
            self.record = RunRecord(run_id=self.run_id, config=config)
            self.record.started_at = iso_utc(self.clock())
        (self.run_dir / "config.json").write_text(
            json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        self._index_tooldocs()

    # -- shared plumbing ----------------------------------------------------

    def _index_tooldocs(self) -> None:
        if self.rag.corpus_exists(TOOLDOCS_CORPUS) or not _TOOLDOCS_DIR.is_dir():
            return
        documents = []
        for doc_path in sorted(_TOOLDOCS_DIR.glob("*.md")):
            documents.append(
                (
                    doc_path.stem,
                    doc_path.read_text(encoding="utf-8"),
                    f"tooldoc://{doc_path.name}",
                )
            )
        if documents:
            self.rag.index(TOOLDOCS_CORPUS, documents)

    def _history_event(self, stage: str, payload: dict) -> None:
        event = {"stage": stage, **payload}
        with self._history_lock:
            with self._history_path.open("a", encoding="utf-8") as handle:
                handle.write(
                    json.dumps(event, sort_keys=True, ensure_ascii=False) + "\n"
                )

    def _checkpoint(self) -> None:
        self.record.ledger = self.factory.total_usage().to_dict()
        save_record(self.record, self.run_dir / "record.json")
        if self.config.record_dir:
            self.factory.flush_transcripts(Path(self.config.record_dir))

    def _gate(self, stage: str) -> None:
        index = STAGES.index(stage)
        if index == 0 or self.config.force_stages:
            return
        predecessor = STAGES[index - 1]
        if self.record.stage_status(predecessor) != STATUS_COMPLETE:
            raise StageIncomplete(
                f"stage {stage} requires {predecessor} to be complete "
                f"(status: {self.record.stage_status(predecessor)}); "
                f"use force_stages to override"
            )

    def _finish_stage(
        self, stage: str, status: str, started: float, cost_before: float
    ) -> None:
        self.record.stage_statuses[stage] = {
            "status": status,
            "wall_time": round(self.clock() - started, 3),
            "cost": round(
                self.factory.total_usage().accumulated_cost - cost_before, 10
            ),
        }
        self.record.finished_at = iso_utc(self.clock())
        self._checkpoint()

    # -- stages ----------------------------------------------------------------

    def run_intelligence(self) -> RunRecord:
        self._gate(STAGE_INTELLIGENCE)
        started = self.clock()
        cost_before = self.factory.total_usage().accumulated_cost

        state = ReconState(
            target=self.config.target,
            scope=self.config.scope,
            max_iterations=self.config.max_iterations,
        )
        session = self.factory.session("recon", prompts.RECON_SYSTEM)
        run_recon(state, session, self.executor, self.rag, TOOLDOCS_CORPUS)
        for command, result in state.command_history:
            self._history_event(
                STAGE_INTELLIGENCE,
                {
                    "command": command,
                    "exit_code": result.exit_code,
                    "timed_out": result.timed_out,
                },
            )
        summary_session = self.factory.session(
            "recon-summary", prompts.RECON_SUMMARY_SYSTEM
        )
        summary = summarize_environment(
            state,
            summary_session,
            self.env_store,
            self.rag,
            collected_at=iso_utc(self.clock()),
        )
        self.record.summary = summary
        complete = is_target_identified(summary, self.config.application)
        self._finish_stage(
            STAGE_INTELLIGENCE,
            STATUS_COMPLETE if complete else STATUS_INCOMPLETE,
            started,
            cost_before,
        )
        return self.record

    def run_analysis(self) -> RunRecord:
        self._gate(STAGE_ANALYSIS)
        if self.record.summary is None:
            stored = self.env_store.load(self.config.target)
            if stored is None and not self.config.force_stages:
                raise StageIncomplete(
                    "no environment summary available for analysis"
                )
            self.record.summary = stored
        started = self.clock()
        cost_before = self.factory.total_usage().accumulated_cost
        summary = self.record.summary

        if self.config.knowledge_mode == KNOWLEDGE_ONLINE and summary is not None:
            agent = SearchAgent(
                connectors=self.connectors,
                rag=self.rag,
                tree=self.tree,
                config=SearchAgentConfig(),
            )
            seen_products: set[str] = set()
            for fp in summary.fingerprints:
                product = fp.product.strip()
                if not product or product.lower() in seen_products:
                    continue
                seen_products.add(product.lower())
                written = agent.acquire(
                    product,
                    fp.version.strip(),
                    lambda name, _p=product: self.factory.session(
                        f"{name}-{_slug(_p)}", prompts.SEARCH_SYSTEM
                    ),
                )
                log.info("acquisition wrote %d node(s) for %s", written, product)
            self.tree.save(self.knowledge_dir)

        planner = PlanningAgent(self.tree)
        suggestions: list[AttackSurfaceSuggestion] = []
        plan = ExploitPlan()
        if summary is not None:
            suggestions = planner.suggest_surfaces(
                summary, self.factory.session("plan-surfaces", prompts.PLANNING_SYSTEM)
            )
            if suggestions:
                plan = planner.plan_exploits(
                    suggestions,
                    self._planning_version(summary),
                    self.factory.session("plan-exploits", prompts.PLANNING_SYSTEM),
                )
        self.record.suggestions = suggestions
        self.record.plan = plan
        self._finish_stage(
            STAGE_ANALYSIS,
            STATUS_COMPLETE if plan.entries else STATUS_INCOMPLETE,
            started,
            cost_before,
        )
        return self.record

    def _planning_version(self, summary: EnvironmentSummary) -> str:
        if self.config.version:
            return self.config.version
        wanted = self.config.application.strip().lower()
        for fp in summary.fingerprints:
            if wanted and fp.product.strip().lower() != wanted:
                continue
            if fp.version.strip():
                return fp.version.strip()
        return ""

    def run_exploitation(self) -> RunRecord:
        self._gate(STAGE_EXPLOITATION)
        if not self.record.plan.entries:
            raise StageIncomplete("no exploit plan to execute")
        started = self.clock()
        cost_before = self.factory.total_usage().accumulated_cost

        agent = ExecutionAgent(
            executor=self.executor,
            rag=self.rag,
            scope=self.config.scope,
            max_steps=self.config.max_steps,
            history_sink=lambda payload: self._history_event(
                STAGE_EXPLOITATION, payload
            ),
        )
        outcomes, success_index = agent.run_plan(
            self.record.plan,
            self.config.target,
            lambda name: self.factory.session(name, prompts.EXECUTION_SYSTEM),
        )
        self.record.outcomes = outcomes
        self.record.success_index = success_index
        self._finish_stage(
            STAGE_EXPLOITATION,
            STATUS_COMPLETE if success_index is not None else STATUS_INCOMPLETE,
            started,
            cost_before,
        )
        return self.record

    def run_all(self) -> RunRecord:
        """All three stages with gating; an incomplete stage ends the run
        early (the report still renders from whatever exists)."""
        self.run_intelligence()
        if (
            self.record.stage_status(STAGE_INTELLIGENCE) == STATUS_COMPLETE
            or self.config.force_stages
        ):
            self.run_analysis()
        if (
            self.record.stage_status(STAGE_ANALYSIS) == STATUS_COMPLETE
            or self.config.force_stages
        ):
            self.run_exploitation()
        self.write_report()
        return self.record

    def write_report(self) -> tuple[Path, Path]:
        from .report import render_report

        markdown, json_doc = render_report(self.record.to_dict())
        md_path = self.run_dir / "report.md"
        json_path = self.run_dir / "report.json"
        md_path.write_text(markdown, encoding="utf-8")
        json_path.write_text(
            json.dumps(json_doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
        return md_path, json_path


def _slug(name: str) -> str:
    import re

    cleaned = re.sub(r"[^a-z0-9-]+", "-", name.lower()).strip("-")
    return cleaned or "x"


def run_pipeline(
    config: RunConfig,
    connectors: Sequence[Connector] = (),
    clock: Callable[[], float] | None = None,
    backend_factory: Callable[[str], Backend] | None = None,
    executor: SandboxExecutor | None = None,
) -> RunRecord:
    """One-call convenience: construct a runner and execute all stages."""
    runner = PipelineRunner(
        config,
        connectors=connectors,
        clock=clock,
        backend_factory=backend_factory,
        executor=executor,
    )
    return runner.run_all()
