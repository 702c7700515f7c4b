"""Vulnerability knowledge tree: application -> vulnerability -> exploit.

Nodes accumulate across search runs; upsert merges rather than duplicates, so
re-running acquisition for the same application is idempotent. The tree
persists as one directory per application with one JSON file per
vulnerability, written deterministically so saved trees are diffable and
byte-stable across load/save cycles.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .versions import MalformedConstraint, UnparseableVersion, VersionConstraint

log = logging.getLogger(__name__)

CVE_ID_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")
UNASSIGNED = "UNASSIGNED"

# Canonical impact labels; anything else is carried as lowercase free text.
EFFECT_VOCABULARY = (
    "remote command execution",
    "remote code execution",
    "authentication bypass",
    "information disclosure",
    "file upload",
    "path traversal",
    "denial of service",
    "privilege escalation",
)
_EFFECT_SET = frozenset(EFFECT_VOCABULARY)


def normalize_effect(text: str) -> str:
    """Collapse to the canonical vocabulary spelling; off-vocabulary labels
    pass through lowercased (and logged) rather than being dropped."""
    cleaned = " ".join(text.lower().split())
    if cleaned and cleaned not in _EFFECT_SET:
        log.debug("effect %r is outside the canonical vocabulary", cleaned)
    return cleaned


def is_valid_cve_id(cve_id: str) -> bool:
    return cve_id == UNASSIGNED or bool(CVE_ID_RE.match(cve_id))


class KnowledgeError(Exception):
    pass


@dataclass
class ExploitNode:
    """One exploit artifact attached to a vulnerability."""

    source_ref: str
    effect: str
    applicable_versions: str = ""
    requirements: tuple[str, ...] = ()
    local_path: str = ""

    def __post_init__(self) -> None:
        if not self.source_ref:
            raise ValueError("source_ref must be non-empty")
        self.effect = normalize_effect(self.effect)
        if not self.effect:
            raise ValueError("effect must be non-empty")
        self.requirements = tuple(self.requirements)
        VersionConstraint.parse(self.applicable_versions)  # raises if malformed

    def to_dict(self) -> dict:
        return {
            "source_ref": self.source_ref,
            "effect": self.effect,
            "applicable_versions": self.applicable_versions,
            "requirements": list(self.requirements),
            "local_path": self.local_path,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExploitNode":
        return cls(
            source_ref=str(raw["source_ref"]),
            effect=str(raw["effect"]),
            applicable_versions=str(raw.get("applicable_versions", "")),
            requirements=tuple(str(r) for r in raw.get("requirements", [])),
            local_path=str(raw.get("local_path", "")),
        )


@dataclass
class VulnerabilityNode:
    """One vulnerability of an application, with any known exploits."""

    cve_id: str
    vuln_type: str = ""
    affected_versions: str = ""
    summary: str = ""
    exploits: list[ExploitNode] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    epss: float | None = None

    def __post_init__(self) -> None:
        if not is_valid_cve_id(self.cve_id):
            raise ValueError(
                f"cve_id must match CVE-YYYY-NNNN or be {UNASSIGNED!r}, "
                f"got {self.cve_id!r}"
            )
        VersionConstraint.parse(self.affected_versions)
        if self.epss is not None and not 0.0 <= self.epss <= 100.0:
            raise ValueError("epss must lie in [0, 100]")

    def to_dict(self) -> dict:
        doc = {
            "cve_id": self.cve_id,
            "vuln_type": self.vuln_type,
            "affected_versions": self.affected_versions,
            "summary": self.summary,
            "exploits": [e.to_dict() for e in sorted_exploits(self.exploits)],
            "sources": sorted(set(self.sources)),
        }
        if self.epss is not None:
            doc["epss"] = self.epss
        return doc

    @classmethod
    def from_dict(cls, raw: dict) -> "VulnerabilityNode":
        return cls(
            cve_id=str(raw["cve_id"]),
            vuln_type=str(raw.get("vuln_type", "")),
            affected_versions=str(raw.get("affected_versions", "")),
            summary=str(raw.get("summary", "")),
            exploits=[ExploitNode.from_dict(e) for e in raw.get("exploits", [])],
            sources=[str(s) for s in raw.get("sources", [])],
            epss=float(raw["epss"]) if raw.get("epss") is not None else None,
        )


def sorted_exploits(exploits: list[ExploitNode]) -> list[ExploitNode]:
    return sorted(exploits, key=lambda e: e.source_ref)


def _slug(name: str) -> str:
    cleaned = re.sub(r"[^a-z0-9._-]+", "_", name.lower()).strip("_")
    return cleaned or "app"


class KnowledgeTree:
    """In-memory tree with deterministic on-disk persistence.

    Applications are keyed case-insensitively; the first-seen spelling is
    kept for display. save() replaces the whole tree directory via a
    build-aside-then-swap so readers never observe a half-written tree.
    """

    def __init__(self) -> None:
        self._apps: dict[str, dict[str, VulnerabilityNode]] = {}
        self._display: dict[str, str] = {}
        self._lock = threading.RLock()

    # -- queries ------------------------------------------------------------

    def applications(self) -> list[str]:
        with self._lock:
            return sorted(self._display[key] for key in self._apps)

    def vulnerabilities(self, application: str) -> list[VulnerabilityNode]:
        with self._lock:
            nodes = self._apps.get(application.lower(), {})
            return [nodes[cve] for cve in sorted(nodes)]

    def get(self, application: str, cve_id: str) -> VulnerabilityNode | None:
        with self._lock:
            return self._apps.get(application.lower(), {}).get(cve_id)

    def node_count(self) -> int:
        """Vulnerability nodes plus exploit nodes, over all applications."""
        with self._lock:
            total = 0
            for nodes in self._apps.values():
                for node in nodes.values():
                    total += 1 + len(node.exploits)
            return total

    # -- mutation -----------------------------------------------------------

    def upsert(self, application: str, node: VulnerabilityNode) -> VulnerabilityNode:
        """Insert or merge a vulnerability under an application.

        Merge policy: scalar fields take the incoming value when it is
        non-empty, otherwise keep the existing one; sources are unioned;
        exploits are merged by source_ref with the same scalar policy.
        """
        if not application.strip():
            raise ValueError("application must be non-empty")
        key = application.strip().lower()
        with self._lock:
            self._display.setdefault(key, application.strip())
            nodes = self._apps.setdefault(key, {})
            existing = nodes.get(node.cve_id)
            if existing is None:
                nodes[node.cve_id] = node
                return node
            existing.vuln_type = node.vuln_type or existing.vuln_type
            existing.affected_versions = (
                node.affected_versions or existing.affected_versions
            )
            existing.summary = node.summary or existing.summary
            if node.epss is not None:
                existing.epss = node.epss
            existing.sources = sorted(set(existing.sources) | set(node.sources))
            by_ref = {e.source_ref: e for e in existing.exploits}
            for incoming in node.exploits:
                held = by_ref.get(incoming.source_ref)
                if held is None:
                    existing.exploits.append(incoming)
                    by_ref[incoming.source_ref] = incoming
                else:
                    held.effect = incoming.effect or held.effect
                    held.applicable_versions = (
                        incoming.applicable_versions or held.applicable_versions
                    )
                    held.local_path = incoming.local_path or held.local_path
                    merged = list(held.requirements)
                    for req in incoming.requirements:
                        if req not in merged:
                            merged.append(req)
                    held.requirements = tuple(merged)
            return existing

    # -- version-aware lookup ------------------------------------------------

    def query(
        self,
        application: str,
        version: str,
        effect_filter: str = "",
    ) -> tuple[list[VulnerabilityNode], list[VulnerabilityNode]]:
        """Split an application's nodes into (matching, version_unknown).

        A node lands in matching when its constraint accepts the version,
        in version_unknown when the version (or the node's reach) cannot be
        judged, and nowhere when the constraint provably excludes it.
        Unknown applications yield two empty lists.
        """
        wanted = normalize_effect(effect_filter) if effect_filter else ""
        matching: list[VulnerabilityNode] = []
        unknown: list[VulnerabilityNode] = []
        for node in self.vulnerabilities(application):
            if wanted and not _node_has_effect(node, wanted):
                continue
            try:
                constraint = VersionConstraint.parse(node.affected_versions)
            except MalformedConstraint:  # defensive: upsert validates
                unknown.append(node)
                continue
            if constraint.matches_all:
                matching.append(node)
                continue
            try:
                if constraint.matches(version):
                    matching.append(node)
            except UnparseableVersion:
                unknown.append(node)
        return matching, unknown

    # -- persistence ----------------------------------------------------------

    def save(self, root: Path | str) -> None:
        """Write the tree under root, replacing whatever was there.

        The new tree is built alongside and swapped in, so a crash cannot
        leave a mix of old and new files at the final path.
        """
        root = Path(root)
        with self._lock:
            staging = root.parent / (root.name + ".staging")
            if staging.exists():
                shutil.rmtree(staging)
            staging.mkdir(parents=True)
            for key in sorted(self._apps):
                app_dir = staging / _slug(key)
                app_dir.mkdir()
                (app_dir / "application.json").write_text(
                    json.dumps(
                        {"application": self._display[key]},
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                    + "\n",
                    encoding="utf-8",
                )
                for cve_id in sorted(self._apps[key]):
                    node = self._apps[key][cve_id]
                    (app_dir / f"{cve_id}.json").write_text(
                        json.dumps(
                            node.to_dict(),
                            sort_keys=True,
                            ensure_ascii=False,
                            indent=2,
                        )
                        + "\n",
                        encoding="utf-8",
                    )
            if root.exists():
                discard = root.parent / (root.name + ".discard")
                if discard.exists():
                    shutil.rmtree(discard)
                root.rename(discard)
                staging.rename(root)
                shutil.rmtree(discard)
            else:
                root.parent.mkdir(parents=True, exist_ok=True)
                staging.rename(root)

    @classmethod
    def load(cls, root: Path | str) -> "KnowledgeTree":
        root = Path(root)
        tree = cls()
        if not root.is_dir():
            return tree
        for app_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            display = app_dir.name
            meta_path = app_dir / "application.json"
            if meta_path.is_file():
                try:
                    display = str(
                        json.loads(meta_path.read_text(encoding="utf-8"))[
                            "application"
                        ]
                    )
                except (json.JSONDecodeError, KeyError) as err:
                    raise KnowledgeError(f"bad metadata in {meta_path}: {err}") from err
            for node_path in sorted(app_dir.glob("*.json")):
                if node_path.name == "application.json":
                    continue
                try:
                    raw = json.loads(node_path.read_text(encoding="utf-8"))
                    node = VulnerabilityNode.from_dict(raw)
                except (json.JSONDecodeError, KeyError, ValueError) as err:
                    raise KnowledgeError(f"bad node file {node_path}: {err}") from err
                tree.upsert(display, node)
        return tree


def _node_has_effect(node: VulnerabilityNode, wanted: str) -> bool:
    if normalize_effect(node.vuln_type) == wanted:
        return True
    return any(exploit.effect == wanted for exploit in node.exploits)
