"""Search agent: two-round vulnerability intelligence gathering.

Round one asks general web and vulnerability databases what is wrong with
the detected application/version and distills attack-surface candidates.
Round two takes each candidate's CVE id and leads, asks general web and code
repositories for exploits, and files what it finds into the knowledge tree.
The rounds are strictly ordered: every round-two query is seeded by a
round-one finding, never invented from nothing.

All connectors sit behind one interface. The live ones speak to public
APIs through an injectable HTTP callable; the fixture connector answers
from a directory keyed by query hash, which is how replayed runs and tests
stay offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

from . import prompts
from .gateway import ChatSession, ResponseSchema, register_schema
from .knowledge import (
    UNASSIGNED,
    ExploitNode,
    KnowledgeTree,
    VulnerabilityNode,
    is_valid_cve_id,
    normalize_effect,
)
from .rag import DEFAULT_TOP_K, RagStore
from .versions import MalformedConstraint, VersionConstraint

log = logging.getLogger(__name__)

DEFAULT_MAX_RESULTS = 5
LEAD_CAP = 10
ROUND_ONE_TEMPLATE = "{application} {version} vulnerability CVE"
ROUND_TWO_TEMPLATE = "{cve_id} exploit poc"
RETRY_ATTEMPTS = 3
SNAPSHOT_FILE_LIMIT = 32 * 1024

register_schema(
    ResponseSchema(
        schema_id="surface_doc",
        required_fields=("relevant", "summary"),
    )
)
register_schema(
    ResponseSchema(
        schema_id="surface_summary",
        required_fields=("candidates",),
    )
)
register_schema(
    ResponseSchema(
        schema_id="exploit_doc",
        required_fields=("relevant",),
    )
)


class ConnectorKind(str, Enum):
    GENERAL_WEB = "general_web"
    VULN_DB = "vuln_db"
    CODE_REPO = "code_repo"


class ConnectorUnavailable(Exception):
    """Connector cannot serve queries right now (network, auth, quota)."""


@dataclass(frozen=True)
class SearchQuery:
    connector: ConnectorKind
    query_string: str
    max_results: int = DEFAULT_MAX_RESULTS
    provenance: str = ""

    def __post_init__(self) -> None:
        if not self.query_string.strip():
            raise ValueError("query_string must be non-empty")
        if self.max_results < 1:
            raise ValueError("max_results must be at least 1")


@dataclass(frozen=True)
class SearchResultDoc:
    uri: str
    title: str
    body: str
    connector: ConnectorKind
    fetched_at: str = ""


@dataclass(frozen=True)
class AttackSurfaceCandidate:
    application: str
    cve_id: str
    vuln_type: str
    affected_versions: str
    leads: tuple[str, ...]
    relevance: bool
    source_uri: str
    summary: str = ""


@dataclass(frozen=True)
class ExploitCandidate:
    cve_id: str
    source_ref: str
    effect: str
    applicable_versions: str
    requirements: tuple[str, ...]
    source_uri: str


class Connector(Protocol):
    kind: ConnectorKind

    def search(self, query_string: str, max_results: int) -> list[SearchResultDoc]: ...


def query_fixture_name(query_string: str) -> str:
    return hashlib.sha256(query_string.encode("utf-8")).hexdigest()[:16] + ".json"


class FixtureConnector:
    """Answers queries from a directory of canned JSON result files.

    Each file is named by the query's hash (query_fixture_name) and holds a
    list of {uri, title, body} objects. Unknown queries yield no results,
    which mirrors a search that found nothing.
    """

    def __init__(self, kind: ConnectorKind, directory: Path | str) -> None:
        self.kind = kind
        self.directory = Path(directory)

    def search(self, query_string: str, max_results: int) -> list[SearchResultDoc]:
        path = self.directory / query_fixture_name(query_string)
        if not path.is_file():
            return []
        docs = []
        for raw in json.loads(path.read_text(encoding="utf-8"))[:max_results]:
            docs.append(
                SearchResultDoc(
                    uri=str(raw.get("uri", "")),
                    title=str(raw.get("title", "")),
                    body=str(raw.get("body", "")),
                    connector=self.kind,
                )
            )
        return docs


class _HttpConnectorBase:
    """Shared retry/backoff plumbing for the live connectors."""

    kind: ConnectorKind

    def __init__(
        self,
        http_get: Callable | None = None,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float = 30.0,
    ) -> None:
        self._get = http_get
        self._sleep = sleep
        self.timeout = timeout

    def _fetch_json(self, url: str, params: dict | None = None, headers: dict | None = None):
        import requests

        get = self._get or requests.get
        delay = 1.0
        last_err: Exception | None = None
        for _ in range(RETRY_ATTEMPTS):
            try:
                response = get(url, params=params, headers=headers, timeout=self.timeout)
                if getattr(response, "status_code", 200) == 429:
                    self._sleep(delay)
                    delay *= 2
                    continue
                response.raise_for_status()
                return response.json()
            except Exception as err:  # requests exceptions, JSON errors
                last_err = err
                self._sleep(delay)
                delay *= 2
        raise ConnectorUnavailable(f"{type(self).__name__}: {last_err}")


class GoogleSearchConnector(_HttpConnectorBase):
    """General web results from the Google Custom Search JSON API."""

    kind = ConnectorKind.GENERAL_WEB
    endpoint = "https://www.googleapis.com/customsearch/v1"

    def __init__(self, api_key: str, engine_id: str, **kwargs) -> None:
        super().__init__(**kwargs)
        self.api_key = api_key
        self.engine_id = engine_id

    def search(self, query_string: str, max_results: int) -> list[SearchResultDoc]:
        doc = self._fetch_json(
            self.endpoint,
            params={
                "key": self.api_key,
                "cx": self.engine_id,
                "q": query_string,
                "num": min(max_results, 10),
            },
        )
        results = []
        for item in (doc.get("items") or [])[:max_results]:
            results.append(
                SearchResultDoc(
                    uri=str(item.get("link", "")),
                    title=str(item.get("title", "")),
                    body=str(item.get("snippet", "")),
                    connector=self.kind,
                )
            )
        return results


class NvdConnector(_HttpConnectorBase):
    """CVE records from the NVD 2.0 keyword search API."""

    kind = ConnectorKind.VULN_DB
    endpoint = "https://services.nvd.nist.gov/rest/json/cves/2.0"

    def search(self, query_string: str, max_results: int) -> list[SearchResultDoc]:
        doc = self._fetch_json(
            self.endpoint,
            params={"keywordSearch": query_string, "resultsPerPage": max_results},
        )
        results = []
        for wrapper in (doc.get("vulnerabilities") or [])[:max_results]:
            cve = wrapper.get("cve") or {}
            cve_id = str(cve.get("id", ""))
            descriptions = cve.get("descriptions") or []
            english = next(
                (d.get("value", "") for d in descriptions if d.get("lang") == "en"),
                "",
            )
            results.append(
                SearchResultDoc(
                    uri=f"https://nvd.nist.gov/vuln/detail/{cve_id}",
                    title=cve_id,
                    body=f"{cve_id}: {english}",
                    connector=self.kind,
                )
            )
        return results


class CirclConnector(_HttpConnectorBase):
    """CVE records from the CIRCL cve-search public instance."""

    kind = ConnectorKind.VULN_DB
    endpoint = "https://cve.circl.lu/api/search"

    def search(self, query_string: str, max_results: int) -> list[SearchResultDoc]:
        words = query_string.split()
        vendor_product = "/".join(words[:2]) if len(words) >= 2 else query_string
        doc = self._fetch_json(f"{self.endpoint}/{vendor_product}")
        rows = doc if isinstance(doc, list) else doc.get("results", []) or []
        results = []
        for row in rows[:max_results]:
            cve_id = str(row.get("id", ""))
            results.append(
                SearchResultDoc(
                    uri=f"https://cve.circl.lu/cve/{cve_id}",
                    title=cve_id,
                    body=f"{cve_id}: {row.get('summary', '')}",
                    connector=self.kind,
                )
            )
        return results


class GitHubSearchConnector(_HttpConnectorBase):
    """Repository snapshots from the GitHub search API.

    Each hit is expanded into a snapshot document: readme plus top-level
    file listing plus file bodies under SNAPSHOT_FILE_LIMIT bytes, enough
    for the analysis prompt to judge whether the repo is a usable exploit.
    """

    kind = ConnectorKind.CODE_REPO
    endpoint = "https://api.github.com"

    def __init__(self, token: str = "", **kwargs) -> None:
        super().__init__(**kwargs)
        self.token = token

    def _headers(self) -> dict:
        headers = {"Accept": "application/vnd.github+json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def search(self, query_string: str, max_results: int) -> list[SearchResultDoc]:
        doc = self._fetch_json(
            f"{self.endpoint}/search/repositories",
            params={"q": query_string, "per_page": max_results},
            headers=self._headers(),
        )
        results = []
        for item in (doc.get("items") or [])[:max_results]:
            full_name = str(item.get("full_name", ""))
            body = self._snapshot(full_name, str(item.get("description") or ""))
            results.append(
                SearchResultDoc(
                    uri=str(item.get("html_url", "")),
                    title=full_name,
                    body=body,
                    connector=self.kind,
                )
            )
        return results

    def _snapshot(self, full_name: str, description: str) -> str:
        parts = [f"repository: {full_name}", f"description: {description}"]
        try:
            listing = self._fetch_json(
                f"{self.endpoint}/repos/{full_name}/contents/",
                headers=self._headers(),
            )
        except ConnectorUnavailable:
            return "\n".join(parts)
        names = []
        for entry in listing if isinstance(listing, list) else []:
            names.append(str(entry.get("name", "")))
            small_text = (
                entry.get("type") == "file"
                and int(entry.get("size", 0)) <= SNAPSHOT_FILE_LIMIT
                and str(entry.get("name", "")).lower().endswith(
                    (".md", ".txt", ".py", ".sh", ".rb", ".pl", ".c", ".go")
                )
            )
            if small_text and entry.get("download_url"):
                try:
                    content = self._fetch_text(str(entry["download_url"]))
                    parts.append(f"--- file: {entry['name']} ---\n{content}")
                except ConnectorUnavailable:
                    pass
        parts.insert(2, "files: " + ", ".join(names))
        return "\n".join(parts)

    def _fetch_text(self, url: str) -> str:
        import requests

        get = self._get or requests.get
        try:
            response = get(url, params=None, headers=self._headers(), timeout=self.timeout)
            response.raise_for_status()
            return response.text[:SNAPSHOT_FILE_LIMIT]
        except Exception as err:
            raise ConnectorUnavailable(f"snapshot fetch: {err}") from err


class ExploitDbConnector:
    """Searches a local mirror of the exploit-db index CSV.

    The CSV is the files_exploits.csv shipped with searchsploit; pointing
    this connector at it gives offline exploit lookups with no API at all.
    """

    kind = ConnectorKind.CODE_REPO

    def __init__(self, csv_path: Path | str) -> None:
        self.csv_path = Path(csv_path)

    def search(self, query_string: str, max_results: int) -> list[SearchResultDoc]:
        import csv

        if not self.csv_path.is_file():
            raise ConnectorUnavailable(f"no exploit index at {self.csv_path}")
        words = [w.lower() for w in query_string.split() if w]
        results: list[SearchResultDoc] = []
        with self.csv_path.open(encoding="utf-8", errors="replace") as handle:
            for row in csv.DictReader(handle):
                description = str(row.get("description", "")).lower()
                codes = str(row.get("codes", "")).lower()
                if not all(w in description or w in codes for w in words):
                    continue
                edb_id = str(row.get("id", ""))
                results.append(
                    SearchResultDoc(
                        uri=f"https://www.exploit-db.com/exploits/{edb_id}",
                        title=str(row.get("description", "")),
                        body=(
                            f"exploit-db {edb_id}: {row.get('description', '')} "
                            f"(file {row.get('file', '')}, type {row.get('type', '')}, "
                            f"platform {row.get('platform', '')}, codes {row.get('codes', '')})"
                        ),
                        connector=self.kind,
                    )
                )
                if len(results) >= max_results:
                    break
        return results


# ---------------------------------------------------------------------------
# The agent
# ---------------------------------------------------------------------------


@dataclass
class SearchAgentConfig:
    max_results: int = DEFAULT_MAX_RESULTS
    lead_cap: int = LEAD_CAP
    top_k: int = DEFAULT_TOP_K


class SearchAgent:
    """Runs the two-round search flow and files results into the tree."""

    def __init__(
        self,
        connectors: Sequence[Connector],
        rag: RagStore,
        tree: KnowledgeTree,
        config: SearchAgentConfig | None = None,
    ) -> None:
        self.connectors = list(connectors)
        self.rag = rag
        self.tree = tree
        self.config = config or SearchAgentConfig()
        self.query_log: list[SearchQuery] = []

    # -- plumbing -----------------------------------------------------------

    def search(self, query: SearchQuery) -> list[SearchResultDoc]:
        """Fan a query out to every connector of its kind, in order.

        Raises ConnectorUnavailable when no connector of that kind is
        configured or every one of them failed.
        """
        self.query_log.append(query)
        matching = [c for c in self.connectors if c.kind == query.connector]
        if not matching:
            raise ConnectorUnavailable(
                f"no connector configured for {query.connector.value}"
            )
        results: list[SearchResultDoc] = []
        seen_uris: set[str] = set()
        failures = 0
        for connector in matching:
            if len(results) >= query.max_results:
                break
            try:
                batch = connector.search(
                    query.query_string, query.max_results - len(results)
                )
            except ConnectorUnavailable as err:
                failures += 1
                log.warning("connector %s unavailable: %s", type(connector).__name__, err)
                continue
            for doc in batch:
                if doc.uri and doc.uri in seen_uris:
                    continue
                seen_uris.add(doc.uri)
                results.append(doc)
        if failures == len(matching):
            raise ConnectorUnavailable(
                f"every {query.connector.value} connector failed"
            )
        return results[: query.max_results]

    def _search_many(self, queries: Sequence[SearchQuery]) -> list[SearchResultDoc]:
        docs: list[SearchResultDoc] = []
        seen: set[str] = set()
        for query in queries:
            try:
                batch = self.search(query)
            except ConnectorUnavailable as err:
                log.warning("query %r skipped: %s", query.query_string, err)
                continue
            for doc in batch:
                key = doc.uri or f"{doc.title}:{hash(doc.body)}"
                if key in seen:
                    continue
                seen.add(key)
                docs.append(doc)
        return docs

    def _doc_corpus(self, doc: SearchResultDoc, tag: str) -> str:
        corpus_id = "doc_" + hashlib.sha256(
            f"{tag}:{doc.uri}:{doc.title}".encode("utf-8")
        ).hexdigest()[:16]
        if not self.rag.corpus_exists(corpus_id):
            text = f"{doc.title}\n{doc.body}" if doc.title else doc.body
            self.rag.index(corpus_id, [(doc.uri or doc.title or "doc", text, doc.uri)])
        return corpus_id

    # -- round one ------------------------------------------------------------

    def extract_attack_surfaces(
        self,
        application: str,
        version: str,
        docs: Sequence[SearchResultDoc],
        session: ChatSession,
    ) -> list[AttackSurfaceCandidate]:
        """Per-document analysis, then one consolidation call.

        Documents whose analysis never parses are skipped; consolidation
        falling over degrades to the raw per-document findings rather than
        losing the round.
        """
        findings: list[dict] = []
        for doc in docs:
            corpus_id = self._doc_corpus(doc, "r1")
            response = self.rag.synthesize(
                corpus_id,
                prompts.SURFACE_DOC_TEMPLATE.format(
                    application=application, version=version
                ),
                self.config.top_k,
                session,
                "surface_doc",
            )
            if not response.valid:
                log.warning("skipping document %s: analysis unusable", doc.uri)
                continue
            parsed = dict(response.parsed)
            parsed["_source_uri"] = doc.uri
            if parsed.get("relevant"):
                findings.append(parsed)
        if not findings:
            return []

        rendered = json.dumps(
            [
                {
                    "cve_ids": f.get("cve_ids", []),
                    "vuln_type": f.get("vuln_type", ""),
                    "affected_versions": f.get("affected_versions", ""),
                    "leads": f.get("leads", []),
                    "summary": f.get("summary", ""),
                    "source_uri": f.get("_source_uri", ""),
                }
                for f in findings
            ],
            indent=2,
            ensure_ascii=False,
        )
        response = session.complete_structured(
            prompts.SURFACE_SUMMARY_TEMPLATE.format(
                application=application, version=version, findings=rendered
            ),
            "surface_summary",
        )
        if response.valid and isinstance(response.parsed.get("candidates"), list):
            raw_candidates = response.parsed["candidates"]
        else:
            log.warning("consolidation unusable; falling back to per-document findings")
            raw_candidates = [
                {
                    "cve_id": (f.get("cve_ids") or [UNASSIGNED])[0],
                    "vuln_type": f.get("vuln_type", ""),
                    "affected_versions": f.get("affected_versions", ""),
                    "leads": f.get("leads", []),
                    "source_uri": f.get("_source_uri", ""),
                    "summary": f.get("summary", ""),
                }
                for f in findings
            ]

        uris_by_cve: dict[str, str] = {}
        for f in findings:
            for cve in f.get("cve_ids") or []:
                uris_by_cve.setdefault(str(cve).upper(), str(f.get("_source_uri", "")))
        candidates: list[AttackSurfaceCandidate] = []
        seen: set[str] = set()
        for raw in raw_candidates:
            if not isinstance(raw, dict):
                continue
            cve_id = str(raw.get("cve_id") or UNASSIGNED).strip().upper()
            if not is_valid_cve_id(cve_id):
                cve_id = UNASSIGNED
            leads = tuple(
                str(lead).strip()
                for lead in (raw.get("leads") or [])
                if str(lead).strip()
            )[: self.config.lead_cap]
            if cve_id == UNASSIGNED and not leads:
                continue  # nothing actionable to take into round two
            dedupe_key = cve_id if cve_id != UNASSIGNED else "|".join(leads)
            if dedupe_key in seen:
                continue
            seen.add(dedupe_key)
            affected = str(raw.get("affected_versions") or "")
            try:
                VersionConstraint.parse(affected)
            except MalformedConstraint:
                affected = ""
            candidates.append(
                AttackSurfaceCandidate(
                    application=application,
                    cve_id=cve_id,
                    vuln_type=str(raw.get("vuln_type") or ""),
                    affected_versions=affected,
                    leads=leads,
                    relevance=True,
                    source_uri=str(raw.get("source_uri") or "")
                    or uris_by_cve.get(cve_id, ""),
                    summary=str(raw.get("summary") or ""),
                )
            )
        return candidates

    # -- round two ------------------------------------------------------------

    def extract_exploits(
        self,
        surface: AttackSurfaceCandidate,
        docs: Sequence[SearchResultDoc],
        session: ChatSession,
    ) -> list[ExploitCandidate]:
        found: list[ExploitCandidate] = []
        for doc in docs:
            corpus_id = self._doc_corpus(doc, "r2")
            response = self.rag.synthesize(
                corpus_id,
                prompts.EXPLOIT_DOC_TEMPLATE.format(
                    cve_id=surface.cve_id,
                    application=surface.application,
                    version_hint=prompts.VERSION_FORMAT_HINT,
                ),
                self.config.top_k,
                session,
                "exploit_doc",
            )
            if not response.valid or not response.parsed.get("relevant"):
                continue
            parsed = response.parsed
            cve_id = str(parsed.get("cve_id") or surface.cve_id).strip().upper()
            if not is_valid_cve_id(cve_id):
                cve_id = surface.cve_id
            effect = normalize_effect(str(parsed.get("effect") or ""))
            source_ref = str(parsed.get("source_ref") or doc.uri or "").strip()
            if not effect or not source_ref:
                continue
            applicable = str(parsed.get("applicable_versions") or "")
            try:
                VersionConstraint.parse(applicable)
            except MalformedConstraint:
                applicable = ""
            found.append(
                ExploitCandidate(
                    cve_id=cve_id,
                    source_ref=source_ref,
                    effect=effect,
                    applicable_versions=applicable,
                    requirements=tuple(
                        str(r) for r in (parsed.get("requirements") or [])
                    ),
                    source_uri=doc.uri,
                )
            )
        return found

    # -- end to end -------------------------------------------------------------

    def acquire(
        self,
        application: str,
        version: str,
        session_factory: Callable[[str], ChatSession],
    ) -> int:
        """Both rounds plus knowledge-tree upserts; returns nodes written.

        Partial failures (a connector down, one document unusable) degrade
        coverage but never raise out of here; an empty round simply writes
        nothing.
        """
        round_one = [
            SearchQuery(
                connector=kind,
                query_string=" ".join(
                    ROUND_ONE_TEMPLATE.format(
                        application=application, version=version
                    ).split()
                ),
                max_results=self.config.max_results,
                provenance="round1",
            )
            for kind in (ConnectorKind.GENERAL_WEB, ConnectorKind.VULN_DB)
        ]
        docs = self._search_many(round_one)
        if not docs:
            log.info("round one found nothing for %s %s", application, version)
            return 0
        surfaces = self.extract_attack_surfaces(
            application, version, docs, session_factory("search-surfaces")
        )

        written = 0
        for i, surface in enumerate(surfaces):
            seeds: list[tuple[str, str]] = []
            if surface.cve_id != UNASSIGNED:
                seeds.append(
                    (
                        ROUND_TWO_TEMPLATE.format(cve_id=surface.cve_id),
                        f"round2:{surface.cve_id}",
                    )
                )
            for lead in surface.leads[: self.config.lead_cap]:
                seeds.append((f"{lead} exploit poc", f"round2:lead:{lead[:40]}"))
            round_two = [
                SearchQuery(
                    connector=kind,
                    query_string=seed,
                    max_results=self.config.max_results,
                    provenance=provenance,
                )
                for seed, provenance in seeds
                for kind in (ConnectorKind.GENERAL_WEB, ConnectorKind.CODE_REPO)
            ]
            exploit_docs = self._search_many(round_two)
            exploits = (
                self.extract_exploits(
                    surface, exploit_docs, session_factory(f"search-exploits-{i}")
                )
                if exploit_docs
                else []
            )

            node = VulnerabilityNode(
                cve_id=surface.cve_id,
                vuln_type=surface.vuln_type,
                affected_versions=surface.affected_versions,
                summary=surface.summary,
                exploits=[
                    ExploitNode(
                        source_ref=e.source_ref,
                        effect=e.effect,
                        applicable_versions=e.applicable_versions,
                        requirements=e.requirements,
                    )
                    for e in exploits
                    if e.cve_id in (surface.cve_id, UNASSIGNED)
                ],
                sources=[
                    uri
                    for uri in {surface.source_uri, *(e.source_uri for e in exploits)}
                    if uri
                ],
            )
            before = self.tree.node_count()
            self.tree.upsert(application, node)
            written += self.tree.node_count() - before
        return written
