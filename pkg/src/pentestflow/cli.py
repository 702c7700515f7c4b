"""Command-line interface.

Subcommands mirror the pipeline stages plus end-to-end and utility modes:

    run      all three stages with gating
    recon    intelligence gathering only
    acquire  vulnerability knowledge acquisition for one application
    plan     vulnerability analysis (acquisition + planning)
    exploit  exploitation of an existing plan
    report   re-render the report from a run record
    bench    benchmark a directory of target manifests

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 stage
prerequisites not met, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError
from .pipeline import (
    KNOWLEDGE_OFFLINE,
    KNOWLEDGE_ONLINE,
    PipelineRunner,
    RunConfig,
    StageIncomplete,
    load_record,
    run_id_for,
)
from .search import ConnectorKind, FixtureConnector

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_INTERNAL = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse maps its own errors to exit code 2; we reserve 2 for
    configuration problems, so usage errors are rethrown and mapped to 1."""

    def error(self, message):  # noqa: D401 - argparse signature
        raise UsageError(message)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    parser.add_argument("--target", help="target host or address")
    parser.add_argument(
        "--scope",
        action="append",
        default=None,
        metavar="ENTRY",
        help="in-scope host or CIDR (repeatable, or comma-separated)",
    )
    parser.add_argument("--provider", help="provider profile id (default: replay)")
    parser.add_argument(
        "--provider-config", help="JSON file with provider profiles"
    )
    parser.add_argument(
        "--replay", metavar="DIR", help="replay transcripts from this directory"
    )
    parser.add_argument(
        "--record", metavar="DIR", help="record transcripts into this directory"
    )
    parser.add_argument(
        "--offline",
        action="store_true",
        help="skip live vulnerability acquisition (knowledge_mode=offline_only)",
    )
    parser.add_argument(
        "--online",
        action="store_true",
        help="enable live vulnerability acquisition (knowledge_mode=online)",
    )
    parser.add_argument("--output", metavar="DIR", help="run output directory root")
    parser.add_argument(
        "--knowledge", metavar="DIR", help="knowledge tree directory"
    )
    parser.add_argument("--application", help="expected application name")
    parser.add_argument("--app-version", help="expected application version")
    parser.add_argument(
        "--search-fixtures",
        metavar="DIR",
        help="serve search queries from fixture files in DIR (offline search)",
    )
    parser.add_argument("--max-iterations", type=int, help="recon iteration cap")
    parser.add_argument("--max-steps", type=int, help="exploit step cap")
    parser.add_argument("--max-repairs", type=int, help="structured-output repair cap")
    parser.add_argument(
        "--force",
        action="store_true",
        help="run stages even when prerequisites are incomplete",
    )
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="pentestflow", description=__doc__.split("\n")[0])
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    for name, help_text in (
        ("run", "run the full pipeline"),
        ("recon", "run intelligence gathering only"),
        ("acquire", "acquire vulnerability knowledge for an application"),
        ("plan", "run vulnerability analysis against an existing recon"),
        ("exploit", "execute an existing exploit plan"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        _common_flags(sub)

    report = subparsers.add_parser("report", help="re-render a run's report")
    report.add_argument("--run-dir", required=True, help="run directory")
    report.add_argument(
        "--format", choices=("md", "json"), default="md", help="print format"
    )
    report.add_argument("-v", "--verbose", action="store_true")

    bench = subparsers.add_parser("bench", help="benchmark target manifests")
    _common_flags(bench)
    bench.add_argument(
        "--manifests", required=True, metavar="DIR", help="manifest directory"
    )
    bench.add_argument(
        "--replay-root",
        metavar="DIR",
        help="per-target transcript directories named after each manifest",
    )
    return parser


def _build_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")

    scope: list[str] = [str(s) for s in raw.get("scope", [])]
    if args.scope:
        scope = []
        for entry in args.scope:
            scope.extend(s.strip() for s in entry.split(",") if s.strip())

    def pick(flag_value, key: str, default):
        if flag_value is not None:
            return flag_value
        return raw.get(key, default)

    knowledge_mode = raw.get("knowledge_mode", KNOWLEDGE_OFFLINE)
    if args.offline and args.online:
        raise UsageError("--offline and --online are mutually exclusive")
    if args.offline:
        knowledge_mode = KNOWLEDGE_OFFLINE
    elif args.online:
        knowledge_mode = KNOWLEDGE_ONLINE

    return RunConfig(
        target=str(pick(args.target, "target", "")),
        scope=tuple(scope),
        provider=str(pick(args.provider, "provider", "replay")),
        application=str(pick(args.application, "application", "")),
        version=str(pick(args.app_version, "version", "")),
        knowledge_mode=str(knowledge_mode),
        knowledge_dir=str(pick(args.knowledge, "knowledge_dir", "")),
        output_dir=str(pick(args.output, "output_dir", "runs")),
        replay_dir=str(pick(args.replay, "replay_dir", "")),
        record_dir=str(pick(args.record, "record_dir", "")),
        provider_config=str(pick(args.provider_config, "provider_config", "")),
        max_iterations=int(pick(args.max_iterations, "max_iterations", 15)),
        max_steps=int(pick(args.max_steps, "max_steps", 20)),
        max_repairs=int(pick(args.max_repairs, "max_repairs", 2)),
        force_stages=bool(args.force or raw.get("force_stages", False)),
    )


def _build_connectors(args: argparse.Namespace) -> list:
    if not getattr(args, "search_fixtures", None):
        return []
    directory = Path(args.search_fixtures)
    return [FixtureConnector(kind, directory) for kind in ConnectorKind]


def _runner(args: argparse.Namespace) -> PipelineRunner:
    config = _build_config(args)
    return PipelineRunner(config, connectors=_build_connectors(args))


def _cmd_run(args) -> int:
    runner = _runner(args)
    record = runner.run_all()
    md_path = runner.run_dir / "report.md"
    print(f"run {record.run_id}: report at {md_path}")
    for stage, info in record.stage_statuses.items():
        print(f"  {stage}: {info.get('status')}")
    return EXIT_OK


def _cmd_recon(args) -> int:
    runner = _runner(args)
    record = runner.run_intelligence()
    runner.write_report()
    status = record.stage_status("intelligence_gathering")
    print(f"run {record.run_id}: intelligence_gathering {status}")
    return EXIT_OK


def _cmd_acquire(args) -> int:
    from . import prompts
    from .search import SearchAgent, SearchAgentConfig

    runner = _runner(args)
    application = runner.config.application
    version = runner.config.version
    if not application:
        summary = runner.record.summary or runner.env_store.load(
            runner.config.target
        )
        if summary is None or not summary.fingerprints:
            raise StageIncomplete(
                "acquire needs --application or a completed recon summary"
            )
        products = [fp for fp in summary.fingerprints if fp.product.strip()]
        if not products:
            raise StageIncomplete("recon summary has no identified products")
        application = products[0].product
        version = version or products[0].version
    if not runner.connectors:
        raise ConfigError("acquire needs --search-fixtures or configured connectors")
    agent = SearchAgent(
        connectors=runner.connectors,
        rag=runner.rag,
        tree=runner.tree,
        config=SearchAgentConfig(),
    )
    written = agent.acquire(
        application,
        version,
        lambda name: runner.factory.session(name, prompts.SEARCH_SYSTEM),
    )
    runner.tree.save(runner.knowledge_dir)
    print(f"acquired {written} knowledge node(s) for {application}")
    return EXIT_OK


def _cmd_plan(args) -> int:
    runner = _runner(args)
    record = runner.run_analysis()
    runner.write_report()
    status = record.stage_status("vulnerability_analysis")
    print(
        f"run {record.run_id}: vulnerability_analysis {status} "
        f"({len(record.plan.entries)} plan entries)"
    )
    return EXIT_OK


def _cmd_exploit(args) -> int:
    runner = _runner(args)
    record = runner.run_exploitation()
    runner.write_report()
    status = record.stage_status("exploitation")
    print(f"run {record.run_id}: exploitation {status}")
    if record.success_index is not None:
        entry = record.plan.entries[record.success_index]
        print(f"  success with {entry.exploit.source_ref} ({entry.cve_id})")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .report import render_report

    run_dir = Path(args.run_dir)
    record_path = run_dir / "record.json"
    if not record_path.is_file():
        raise ConfigError(f"no run record at {record_path}")
    record = load_record(record_path)
    markdown, json_doc = render_report(record.to_dict())
    (run_dir / "report.md").write_text(markdown, encoding="utf-8")
    (run_dir / "report.json").write_text(
        json.dumps(json_doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    if args.format == "json":
        print(json.dumps(json_doc, sort_keys=True, ensure_ascii=False, indent=2))
    else:
        print(markdown)
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .bench import load_manifests, run_benchmark

    manifests, exclusions = load_manifests(args.manifests)
    if not manifests and not exclusions:
        raise ConfigError(f"no manifests found in {args.manifests}")
    base = _build_config(args) if (args.target or args.config) else None
    output_root = Path(args.output or "bench-out")

    def make_config(manifest):
        target = manifest.target_address or (base.target if base else "127.0.0.1")
        scope = base.scope if base else ("127.0.0.1",)
        if target not in scope:
            scope = (*scope, target)
        replay_dir = ""
        if args.replay_root:
            replay_dir = str(Path(args.replay_root) / manifest.name)
        elif base and base.replay_dir:
            replay_dir = base.replay_dir
        return RunConfig(
            target=target,
            scope=scope,
            provider=base.provider if base else "replay",
            application=manifest.application,
            version=manifest.version,
            knowledge_mode=base.knowledge_mode if base else KNOWLEDGE_OFFLINE,
            knowledge_dir=base.knowledge_dir if base else "",
            output_dir=str(output_root / "runs" / manifest.name),
            replay_dir=replay_dir,
            max_iterations=base.max_iterations if base else 15,
            max_steps=base.max_steps if base else 20,
            max_repairs=base.max_repairs if base else 2,
        )

    connectors = _build_connectors(args)
    report = run_benchmark(
        manifests,
        make_config,
        runner=lambda config: PipelineRunner(
            config, connectors=connectors
        ).run_all(),
        exclusions=exclusions,
    )
    report.write_csv(output_root / "results.csv")
    report.write_json(output_root / "aggregates.json")
    aggregates = report.aggregates()
    print(
        f"benchmarked {aggregates['targets']} target(s), "
        f"{aggregates['excluded']} excluded"
    )
    print(f"results: {output_root / 'results.csv'}")
    print(f"aggregates: {output_root / 'aggregates.json'}")
    return EXIT_OK


_HANDLERS = {
    "run": _cmd_run,
    "recon": _cmd_recon,
    "acquire": _cmd_acquire,
    "plan": _cmd_plan,
    "exploit": _cmd_exploit,
    "report": _cmd_report,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _HANDLERS[args.subcommand](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except StageIncomplete as err:
        print(f"stage prerequisites not met: {err}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as err:  # noqa: BLE001 - the CLI boundary
        log.exception("internal error")
        print(f"internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
