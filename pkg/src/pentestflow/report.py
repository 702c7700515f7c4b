"""Report rendering: one markdown document plus a machine-readable twin.

render_report is a pure function of the run-record dict. Same record in,
same bytes out; the acceptance suite holds it to that. Nothing here reads
the filesystem or the clock.
"""

from __future__ import annotations

from typing import Any

_STAGE_TITLES = {
    "intelligence_gathering": "Intelligence gathering",
    "vulnerability_analysis": "Vulnerability analysis",
    "exploitation": "Exploitation",
}


def render_report(record: dict) -> tuple[str, dict]:
    """Render (markdown, json_doc) from a run-record dict."""
    lines: list[str] = []
    config = record.get("config", {})
    target = str(config.get("target", ""))

    lines.append(f"# Penetration test report: {target}")
    lines.append("")
    lines.append(f"- Run id: `{record.get('run_id', '')}`")
    lines.append(f"- Started: {record.get('started_at', '')}")
    lines.append(f"- Finished: {record.get('finished_at', '')}")
    scope = ", ".join(str(s) for s in config.get("scope", []))
    lines.append(f"- Scope: {scope}")
    lines.append(f"- Provider profile: {config.get('provider', '')}")
    lines.append("")

    lines.append("## Stage outcomes")
    lines.append("")
    lines.append("| Stage | Status | Wall time (s) | Cost (USD) |")
    lines.append("|---|---|---:|---:|")
    statuses = record.get("stage_statuses", {})
    for stage, title in _STAGE_TITLES.items():
        info = statuses.get(stage, {})
        status = info.get("status", "skipped")
        wall = _num(info.get("wall_time", 0))
        cost = _money(info.get("cost", 0))
        lines.append(f"| {title} | {status} | {wall} | {cost} |")
    lines.append("")

    summary = record.get("summary") or {}
    lines.append("## Environment")
    lines.append("")
    if summary:
        lines.append(f"- OS guess: {summary.get('os_guess') or '(none)'}")
        notes = summary.get("notes") or ""
        if notes:
            lines.append(f"- Notes: {notes}")
        fingerprints = summary.get("fingerprints", [])
        if fingerprints:
            lines.append("")
            lines.append("| Host | Port | Service | Product | Version |")
            lines.append("|---|---:|---|---|---|")
            for fp in fingerprints:
                lines.append(
                    f"| {fp.get('host', '')} | {fp.get('port', '')} "
                    f"| {fp.get('service', '')} | {fp.get('product', '')} "
                    f"| {fp.get('version', '')} |"
                )
        else:
            lines.append("- No services fingerprinted.")
    else:
        lines.append("- Reconnaissance did not produce a summary.")
    lines.append("")

    lines.append("## Attack surfaces considered")
    lines.append("")
    suggestions = record.get("suggestions", [])
    if suggestions:
        for s in suggestions:
            lines.append(
                f"- **{s.get('cve_id', '')}** ({s.get('application', '')}, "
                f"{s.get('vuln_type') or 'unclassified'}) "
                f"confidence {_num(s.get('confidence', 0))}"
                + (f": {s.get('rationale')}" if s.get("rationale") else "")
            )
    else:
        lines.append("- None identified.")
    lines.append("")

    lines.append("## Exploit plan and outcomes")
    lines.append("")
    entries = record.get("plan", {}).get("entries", [])
    outcomes = record.get("outcomes", [])
    success_index = record.get("success_index")
    if entries:
        for i, entry in enumerate(entries):
            exploit = entry.get("exploit", {})
            outcome = outcomes[i] if i < len(outcomes) else None
            if outcome is None:
                status = "not attempted"
            else:
                status = str(outcome.get("status", ""))
            marker = " **<- success**" if success_index == i else ""
            lines.append(
                f"{i + 1}. `{exploit.get('source_ref', '')}` for "
                f"{entry.get('cve_id', '')} ({entry.get('effect', '')}), "
                f"confidence {_num(entry.get('confidence', 0))}: {status}{marker}"
            )
            if outcome:
                steps = outcome.get("steps_taken", 0)
                lines.append(f"   - steps taken: {steps}")
                evidence = outcome.get("evidence", "")
                if outcome.get("status") == "success" and evidence:
                    lines.append(f"   - evidence: `{_squash(evidence)}`")
                errors = outcome.get("error_history", [])
                if errors:
                    lines.append(f"   - errors encountered: {len(errors)}")
    else:
        lines.append("- No exploit plan was produced.")
    lines.append("")

    ledger = record.get("ledger", {})
    lines.append("## Usage")
    lines.append("")
    lines.append(f"- Provider calls: {ledger.get('call_count', 0)}")
    lines.append(f"- Input tokens: {ledger.get('input_tokens', 0)}")
    lines.append(f"- Output tokens: {ledger.get('output_tokens', 0)}")
    lines.append(f"- Accumulated cost: {_money(ledger.get('accumulated_cost', 0))}")
    lines.append("")

    markdown = "\n".join(lines)
    json_doc = {
        "run_id": record.get("run_id", ""),
        "target": target,
        "scope": [str(s) for s in config.get("scope", [])],
        "started_at": record.get("started_at", ""),
        "finished_at": record.get("finished_at", ""),
        "stages": statuses,
        "environment": summary or None,
        "suggestions": suggestions,
        "plan": record.get("plan", {}),
        "outcomes": outcomes,
        "success_index": success_index,
        "usage": ledger,
    }
    return markdown, json_doc


def _num(value: Any) -> str:
    try:
        number = float(value)
    except (TypeError, ValueError):
        return str(value)
    if number == int(number):
        return str(int(number))
    return f"{number:.3f}".rstrip("0").rstrip(".")


def _money(value: Any) -> str:
    try:
        return f"${float(value):.6f}"
    except (TypeError, ValueError):
        return str(value)


def _squash(text: str) -> str:
    return " ".join(text.split())[:200]
