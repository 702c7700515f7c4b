"""Planning agent: turns the environment summary plus the knowledge tree
into a ranked exploitation plan.

Two anti-hallucination rules run on every model ranking: a suggested CVE id
must name a node that was actually queried from the tree, and a planned
exploit's source_ref must belong to a fetched node. Anything else is
discarded and logged. When the model output is unusable altogether, a
deterministic fallback ranking (version-match class, then EPSS, then id)
keeps the pipeline moving.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from . import prompts
from .gateway import ChatSession, ResponseSchema, register_schema
from .knowledge import ExploitNode, KnowledgeTree, VulnerabilityNode
from .recon import EnvironmentSummary
from .versions import (
    MalformedConstraint,
    UnparseableVersion,
    VersionConstraint,
)

log = logging.getLogger(__name__)

register_schema(
    ResponseSchema(schema_id="surface_rank", required_fields=("suggestions",))
)
register_schema(
    ResponseSchema(schema_id="exploit_rank", required_fields=("entries",))
)

# Fallback confidence: class base plus a small EPSS bonus. The bonus stays
# below the gap between classes, so classes never interleave, and within a
# class a higher EPSS score sorts first.
_CLASS_BASE = {"exact": 0.8, "match": 0.5, "unknown": 0.2}
_EPSS_WEIGHT = 0.001


@dataclass(frozen=True)
class AttackSurfaceSuggestion:
    application: str
    cve_id: str
    vuln_type: str
    confidence: float
    rationale: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "application": self.application,
            "cve_id": self.cve_id,
            "vuln_type": self.vuln_type,
            "confidence": self.confidence,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "AttackSurfaceSuggestion":
        return cls(
            application=str(raw["application"]),
            cve_id=str(raw["cve_id"]),
            vuln_type=str(raw.get("vuln_type", "")),
            confidence=float(raw.get("confidence", 0.5)),
            rationale=str(raw.get("rationale", "")),
        )


@dataclass(frozen=True)
class PlanEntry:
    cve_id: str
    exploit: ExploitNode
    confidence: float
    effect: str
    application: str = ""

    def to_dict(self) -> dict:
        return {
            "cve_id": self.cve_id,
            "exploit": self.exploit.to_dict(),
            "confidence": self.confidence,
            "effect": self.effect,
            "application": self.application,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PlanEntry":
        return cls(
            cve_id=str(raw["cve_id"]),
            exploit=ExploitNode.from_dict(raw["exploit"]),
            confidence=float(raw.get("confidence", 0.5)),
            effect=str(raw.get("effect", "")),
            application=str(raw.get("application", "")),
        )


@dataclass
class ExploitPlan:
    entries: list[PlanEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"entries": [entry.to_dict() for entry in self.entries]}

    @classmethod
    def from_dict(cls, raw: dict) -> "ExploitPlan":
        return cls(entries=[PlanEntry.from_dict(e) for e in raw.get("entries", [])])


def _clamp_confidence(raw) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        return 0.5
    return max(0.0, min(1.0, value))


def _match_class(constraint_expr: str, version: str) -> str:
    """Classify how a constraint relates to a version: exact / match / unknown.

    Provably non-matching constraints never reach this point; callers filter
    them out before ranking.
    """
    try:
        constraint = VersionConstraint.parse(constraint_expr)
    except MalformedConstraint:
        return "unknown"
    if not version:
        return "match" if constraint.matches_all else "unknown"
    try:
        if not constraint.matches(version):
            return "unknown"
    except UnparseableVersion:
        return "unknown"
    parsed = _try_parse(version)
    exact = parsed is not None and any(
        clause[0] == "exact" and clause[1] == parsed for clause in constraint.clauses
    )
    return "exact" if exact else "match"


def _try_parse(version: str):
    from .versions import Version

    try:
        return Version.parse(version)
    except UnparseableVersion:
        return None


def _fallback_confidence(match_class: str, epss: float | None) -> float:
    bonus = (epss or 0.0) * _EPSS_WEIGHT
    return round(_CLASS_BASE[match_class] + bonus, 6)


class PlanningAgent:
    def __init__(self, tree: KnowledgeTree) -> None:
        self.tree = tree

    # -- attack surface ranking ------------------------------------------------

    def suggest_surfaces(
        self, summary: EnvironmentSummary, session: ChatSession
    ) -> list[AttackSurfaceSuggestion]:
        """Rank the knowledge-base nodes that apply to the detected software.

        Empty when nothing was detected or the tree knows none of it.
        Output ordering: confidence non-increasing, ties by cve_id.
        """
        detected: list[tuple[str, str]] = []
        seen_products = set()
        for fp in summary.fingerprints:
            product = fp.product.strip()
            if product and product.lower() not in seen_products:
                seen_products.add(product.lower())
                detected.append((product, fp.version.strip()))
        if not detected:
            return []

        queried: dict[tuple[str, str], tuple[VulnerabilityNode, str, str]] = {}
        for product, version in detected:
            matching, unknown = self.tree.query(product, version)
            for node in matching:
                match_class = _match_class(node.affected_versions, version)
                queried[(product.lower(), node.cve_id)] = (node, product, match_class)
            for node in unknown:
                queried[(product.lower(), node.cve_id)] = (node, product, "unknown")
        if not queried:
            return []

        node_lines = []
        for (app_key, cve_id), (node, product, match_class) in sorted(queried.items()):
            node_lines.append(
                f"- app={product} cve_id={cve_id} type={node.vuln_type or '?'} "
                f"affected={node.affected_versions or 'any'} "
                f"version_match={match_class} exploits={len(node.exploits)}"
            )
        environment = json.dumps(summary.to_dict(), indent=2, ensure_ascii=False)
        response = session.complete_structured(
            prompts.SURFACE_RANK_TEMPLATE.format(
                environment=environment, nodes="\n".join(node_lines)
            ),
            "surface_rank",
        )

        suggestions: list[AttackSurfaceSuggestion] = []
        if response.valid and isinstance(response.parsed.get("suggestions"), list):
            known_cves = {cve for (_, cve) in queried}
            seen: set[tuple[str, str]] = set()
            for raw in response.parsed["suggestions"]:
                if not isinstance(raw, dict):
                    continue
                cve_id = str(raw.get("cve_id") or "").strip().upper()
                app = str(raw.get("app") or raw.get("application") or "").strip()
                if cve_id not in known_cves:
                    log.warning(
                        "discarding suggestion with unqueried cve_id %r", cve_id
                    )
                    continue
                app_key = app.lower()
                if (app_key, cve_id) not in queried:
                    # right CVE, wrong/missing app label: recover the owner
                    owners = [k for k in queried if k[1] == cve_id]
                    if not owners:
                        continue
                    app_key = owners[0][0]
                    app = queried[(app_key, cve_id)][1]
                if (app_key, cve_id) in seen:
                    continue
                seen.add((app_key, cve_id))
                node = queried[(app_key, cve_id)][0]
                suggestions.append(
                    AttackSurfaceSuggestion(
                        application=app,
                        cve_id=cve_id,
                        vuln_type=str(raw.get("vuln_type") or node.vuln_type),
                        confidence=_clamp_confidence(raw.get("confidence", 0.5)),
                        rationale=str(raw.get("rationale") or ""),
                    )
                )

        if not suggestions:
            log.info("model ranking unusable; applying deterministic fallback")
            for (app_key, cve_id), (node, product, match_class) in queried.items():
                suggestions.append(
                    AttackSurfaceSuggestion(
                        application=product,
                        cve_id=cve_id,
                        vuln_type=node.vuln_type,
                        confidence=_fallback_confidence(match_class, node.epss),
                        rationale=f"fallback ranking: version {match_class}",
                    )
                )

        suggestions.sort(key=lambda s: (-s.confidence, s.cve_id))
        return suggestions

    # -- exploit ranking ---------------------------------------------------------

    def plan_exploits(
        self,
        suggestions: list[AttackSurfaceSuggestion],
        version: str,
        session: ChatSession,
    ) -> ExploitPlan:
        """Rank the exploits behind the suggested surfaces into a plan.

        Exploits whose version constraint provably excludes the target are
        dropped before ranking; constraint-unknown ones stay in. Empty
        suggestions yield an empty plan.
        """
        if not suggestions:
            return ExploitPlan()

        fetched: dict[tuple[str, str], tuple[ExploitNode, AttackSurfaceSuggestion, str]] = {}
        for suggestion in suggestions:
            node = self.tree.get(suggestion.application, suggestion.cve_id)
            if node is None:
                continue
            for exploit in node.exploits:
                match_class = _match_class(exploit.applicable_versions, version)
                try:
                    constraint = VersionConstraint.parse(exploit.applicable_versions)
                    if version and not constraint.matches_all:
                        if not constraint.matches(version):
                            continue  # provably inapplicable
                except (MalformedConstraint, UnparseableVersion):
                    match_class = "unknown"
                key = (suggestion.cve_id, exploit.source_ref)
                if key not in fetched:
                    fetched[key] = (exploit, suggestion, match_class)
        if not fetched:
            return ExploitPlan()

        lines = []
        for (cve_id, source_ref), (exploit, _, match_class) in sorted(fetched.items()):
            requirements = "; ".join(exploit.requirements) or "none"
            lines.append(
                f"- cve_id={cve_id} source_ref={source_ref} effect={exploit.effect} "
                f"versions={exploit.applicable_versions or 'any'} "
                f"version_match={match_class} requires: {requirements}"
            )
        response = session.complete_structured(
            prompts.EXPLOIT_RANK_TEMPLATE.format(
                version=version or "(unknown)", exploits="\n".join(lines)
            ),
            "exploit_rank",
        )

        entries: list[PlanEntry] = []
        if response.valid and isinstance(response.parsed.get("entries"), list):
            seen: set[tuple[str, str]] = set()
            for raw in response.parsed["entries"]:
                if not isinstance(raw, dict):
                    continue
                key = (
                    str(raw.get("cve_id") or "").strip().upper(),
                    str(raw.get("source_ref") or "").strip(),
                )
                if key not in fetched:
                    log.warning("discarding plan entry for unfetched %r", key)
                    continue
                if key in seen:
                    continue
                seen.add(key)
                exploit, suggestion, _ = fetched[key]
                entries.append(
                    PlanEntry(
                        cve_id=key[0],
                        exploit=exploit,
                        confidence=_clamp_confidence(raw.get("confidence", 0.5)),
                        effect=exploit.effect,
                        application=suggestion.application,
                    )
                )

        if not entries:
            log.info("model plan unusable; applying deterministic fallback")
            for (cve_id, source_ref), (exploit, suggestion, match_class) in fetched.items():
                node = self.tree.get(suggestion.application, cve_id)
                epss = node.epss if node is not None else None
                entries.append(
                    PlanEntry(
                        cve_id=cve_id,
                        exploit=exploit,
                        confidence=_fallback_confidence(match_class, epss),
                        effect=exploit.effect,
                        application=suggestion.application,
                    )
                )

        entries.sort(key=lambda e: (-e.confidence, e.cve_id, e.exploit.source_ref))
        return ExploitPlan(entries=entries)
