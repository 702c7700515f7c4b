"""CLI tests: exit-code mapping and replayed end-to-end runs."""

import json

import pytest

from pentestflow import cli
from pentestflow.gateway import ScriptedBackend
from pentestflow.knowledge import ExploitNode, KnowledgeTree, VulnerabilityNode
from pentestflow.pipeline import (
    STAGES,
    STATUS_COMPLETE,
    PipelineRunner,
    ReplayClock,
    RunConfig,
    load_record,
)

TARGET = "127.0.0.1"
TOKEN = "TOKEN-OK-c0ffee"
BANNER = "8080/tcp open http DemoSrv/1.2.3"
BANNER_CMD = f"echo '{BANNER}'"
POC_CMD = f"echo 'pwned, proof: {TOKEN}'"


def full_scripts():
    return {
        "recon": [
            json.dumps({"thought": "banner", "command": BANNER_CMD, "done": False}),
            json.dumps({"thought": "enough", "command": "", "done": True}),
        ],
        "recon-summary": [
            json.dumps(
                {
                    "os_guess": "linux",
                    "fingerprints": [
                        {
                            "port": 8080,
                            "protocol": "tcp",
                            "service": "http",
                            "product": "DemoSrv",
                            "version": "1.2.3",
                            "evidence": BANNER,
                        }
                    ],
                    "notes": "",
                }
            )
        ],
        "plan-surfaces": [
            json.dumps(
                {
                    "suggestions": [
                        {"cve_id": "CVE-2024-0001", "app": "DemoSrv", "confidence": 0.9}
                    ]
                }
            )
        ],
        "plan-exploits": [
            json.dumps(
                {
                    "entries": [
                        {
                            "cve_id": "CVE-2024-0001",
                            "source_ref": "repo/poc",
                            "confidence": 0.9,
                        }
                    ]
                }
            )
        ],
        "prep-0": [
            json.dumps({"parameters": [{"name": "target"}]}),
            json.dumps({"found": False, "value": ""}),
        ],
        "exploit-0": [
            json.dumps({"thought": "go", "command": POC_CMD, "done": False}),
            json.dumps(
                {
                    "thought": "verify",
                    "command": "",
                    "done": True,
                    "success": True,
                    "evidence": TOKEN,
                }
            ),
        ],
    }


def seeded_kb(tmp_path):
    kb_dir = tmp_path / "kb"
    tree = KnowledgeTree()
    tree.upsert(
        "DemoSrv",
        VulnerabilityNode(
            cve_id="CVE-2024-0001",
            vuln_type="rce",
            affected_versions="<=1.2.3",
            exploits=[
                ExploitNode(
                    source_ref="repo/poc",
                    effect="remote command execution",
                    applicable_versions="1.2.*",
                )
            ],
        ),
    )
    tree.save(kb_dir)
    return kb_dir


@pytest.fixture()
def recorded_transcripts(tmp_path):
    """Record a scripted full run; commands execute through the real sandbox."""
    transcripts = tmp_path / "transcripts"
    kb_dir = seeded_kb(tmp_path)
    scripts = full_scripts()
    config = RunConfig(
        target=TARGET,
        scope=(TARGET,),
        provider="replay",
        application="DemoSrv",
        knowledge_dir=str(kb_dir),
        output_dir=str(tmp_path / "runs-record"),
        record_dir=str(transcripts),
    )
    runner = PipelineRunner(
        config,
        clock=ReplayClock(),
        backend_factory=lambda name: ScriptedBackend(responses=list(scripts[name])),
    )
    record = runner.run_all()
    assert record.success_index == 0  # recording itself must have succeeded
    return transcripts, kb_dir


# ---------------------------------------------------------------------------
# Exit-code mapping
# ---------------------------------------------------------------------------


def test_unknown_subcommand_is_usage_error(capsys):
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_missing_required_flag_is_usage_error(capsys):
    assert cli.main(["bench"]) == cli.EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_offline_online_conflict_is_usage_error(tmp_path, capsys):
    rc = cli.main(
        [
            "run",
            "--target",
            TARGET,
            "--scope",
            TARGET,
            "--offline",
            "--online",
            "--output",
            str(tmp_path / "runs"),
        ]
    )
    assert rc == cli.EXIT_USAGE
    assert "mutually exclusive" in capsys.readouterr().err


def test_missing_target_is_config_error(tmp_path, capsys):
    rc = cli.main(["run", "--scope", TARGET, "--output", str(tmp_path / "runs")])
    assert rc == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_target_outside_scope_is_config_error(tmp_path):
    rc = cli.main(
        [
            "run",
            "--target",
            "203.0.113.9",
            "--scope",
            "10.0.0.0/8",
            "--output",
            str(tmp_path / "runs"),
        ]
    )
    assert rc == cli.EXIT_CONFIG


def test_unknown_provider_is_config_error(tmp_path, capsys):
    rc = cli.main(
        [
            "run",
            "--target",
            TARGET,
            "--scope",
            TARGET,
            "--provider",
            "no-such-provider",
            "--output",
            str(tmp_path / "runs"),
        ]
    )
    assert rc == cli.EXIT_CONFIG
    assert "no-such-provider" in capsys.readouterr().err


def test_plan_before_recon_is_stage_error(tmp_path, capsys):
    rc = cli.main(
        [
            "plan",
            "--target",
            TARGET,
            "--scope",
            TARGET,
            "--output",
            str(tmp_path / "runs"),
        ]
    )
    assert rc == cli.EXIT_STAGE
    assert "stage prerequisites not met" in capsys.readouterr().err


def test_exploit_before_plan_is_stage_error(tmp_path):
    rc = cli.main(
        [
            "exploit",
            "--target",
            TARGET,
            "--scope",
            TARGET,
            "--output",
            str(tmp_path / "runs"),
        ]
    )
    assert rc == cli.EXIT_STAGE


def test_report_without_record_is_config_error(tmp_path):
    assert cli.main(["report", "--run-dir", str(tmp_path)]) == cli.EXIT_CONFIG


def test_corrupt_record_is_internal_error(tmp_path, capsys):
    (tmp_path / "record.json").write_text("{not json", encoding="utf-8")
    assert cli.main(["report", "--run-dir", str(tmp_path)]) == cli.EXIT_INTERNAL
    assert "internal error" in capsys.readouterr().err


def test_empty_manifest_dir_is_config_error(tmp_path):
    rc = cli.main(["bench", "--manifests", str(tmp_path), "--output", str(tmp_path / "o")])
    assert rc == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# End-to-end subcommands over replayed transcripts
# ---------------------------------------------------------------------------


def test_run_replay_end_to_end(tmp_path, recorded_transcripts, capsys):
    transcripts, kb_dir = recorded_transcripts
    out_dir = tmp_path / "runs-replay"
    rc = cli.main(
        [
            "run",
            "--target",
            TARGET,
            "--scope",
            TARGET,
            "--replay",
            str(transcripts),
            "--knowledge",
            str(kb_dir),
            "--application",
            "DemoSrv",
            "--output",
            str(out_dir),
        ]
    )
    captured = capsys.readouterr()
    assert rc == cli.EXIT_OK, captured.err
    assert "report at" in captured.out

    run_dirs = [p for p in out_dir.iterdir() if p.is_dir()]
    assert len(run_dirs) == 1
    record = load_record(run_dirs[0] / "record.json")
    for stage in STAGES:
        assert record.stage_status(stage) == STATUS_COMPLETE, stage
    assert record.success_index == 0
    report = (run_dirs[0] / "report.md").read_text(encoding="utf-8")
    assert TOKEN in report


def test_recon_subcommand_replay(tmp_path, recorded_transcripts, capsys):
    transcripts, kb_dir = recorded_transcripts
    rc = cli.main(
        [
            "recon",
            "--target",
            TARGET,
            "--scope",
            TARGET,
            "--replay",
            str(transcripts),
            "--knowledge",
            str(kb_dir),
            "--application",
            "DemoSrv",
            "--output",
            str(tmp_path / "runs-recon"),
        ]
    )
    captured = capsys.readouterr()
    assert rc == cli.EXIT_OK, captured.err
    assert "intelligence_gathering complete" in captured.out


def test_report_subcommand_round_trip(tmp_path, recorded_transcripts, capsys):
    transcripts, kb_dir = recorded_transcripts
    out_dir = tmp_path / "runs-replay"
    assert (
        cli.main(
            [
                "run",
                "--target",
                TARGET,
                "--scope",
                TARGET,
                "--replay",
                str(transcripts),
                "--knowledge",
                str(kb_dir),
                "--application",
                "DemoSrv",
                "--output",
                str(out_dir),
            ]
        )
        == cli.EXIT_OK
    )
    capsys.readouterr()
    run_dir = next(p for p in out_dir.iterdir() if p.is_dir())
    rc = cli.main(["report", "--run-dir", str(run_dir), "--format", "json"])
    captured = capsys.readouterr()
    assert rc == cli.EXIT_OK
    doc = json.loads(captured.out)
    assert doc["success_index"] == 0
    assert doc["target"] == TARGET


def test_bench_subcommand_smoke(tmp_path, recorded_transcripts, capsys):
    transcripts, _kb_dir = recorded_transcripts
    manifest_dir = tmp_path / "manifests"
    manifest_dir.mkdir()
    (manifest_dir / "alpha.json").write_text(
        json.dumps(
            {
                "name": "alpha",
                "application": "DemoSrv",
                "version": "1.2.3",
                "target_address": TARGET,
                "cves": {"CVE-2024-0001": {"epss": 97.19, "exploitability": 3.9}},
            }
        ),
        encoding="utf-8",
    )
    replay_root = tmp_path / "replays"
    replay_root.mkdir()
    (replay_root / "alpha").symlink_to(transcripts)

    out_dir = tmp_path / "bench-out"
    rc = cli.main(
        [
            "bench",
            "--manifests",
            str(manifest_dir),
            "--replay-root",
            str(replay_root),
            "--output",
            str(out_dir),
        ]
    )
    captured = capsys.readouterr()
    assert rc == cli.EXIT_OK, captured.err
    assert "benchmarked 1 target(s), 0 excluded" in captured.out
    assert (out_dir / "results.csv").is_file()
    doc = json.loads((out_dir / "aggregates.json").read_text(encoding="utf-8"))
    aggregates = doc["aggregates"]
    assert aggregates["targets"] == 1
    # no seeded knowledge for the bench run: the plan stays empty, so the
    # target is counted as a non-success rather than excluded or crashed
    assert aggregates["overall_success_rate"] == 0.0
    assert aggregates["per_difficulty"]["easy"] == {"targets": 1, "success_rate": 0.0}
