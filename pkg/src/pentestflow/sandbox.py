"""Guarded shell execution for agent-issued commands.

Three gates run before anything spawns: target-scope enforcement (host
literals in the command must fall inside the engagement scope), an
interactivity guard (editors, pagers, and bare REPLs hang unattended runs),
and stdin is wired to /dev/null so stray prompts fail fast instead of
blocking. Timed-out process groups are killed outright.
"""

from __future__ import annotations

import ipaddress
import json
import logging
import os
import re
import shlex
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0
OUTPUT_CAP_BYTES = 256 * 1024
TIMEOUT_EXIT_CODE = 124  # same sentinel as coreutils timeout(1)
REJECTED_EXIT_CODE = 126

_DENYLIST_PATH = Path(__file__).parent / "data" / "interactive_denylist.txt"


class SandboxError(Exception):
    pass


class ScopeViolation(SandboxError):
    """Command referenced a host outside the engagement scope; not spawned."""

    def __init__(self, hosts: Iterable[str]) -> None:
        self.hosts = sorted(hosts)
        super().__init__(f"out-of-scope host(s): {', '.join(self.hosts)}")


class GuardRejection(SandboxError):
    """Command matched the interactivity denylist; not spawned."""


class SpawnFailure(SandboxError):
    """The OS refused to start the process."""


@dataclass(frozen=True)
class CommandSpec:
    command_line: str
    target_scope: tuple[str, ...]
    working_dir: Path | None = None
    timeout: float = DEFAULT_TIMEOUT
    env_overrides: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.command_line.strip():
            raise ValueError("command_line must be non-empty")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class ExecutionResult:
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    truncated: bool
    timed_out: bool


# -- scope ------------------------------------------------------------------

_IPV4_RE = re.compile(r"(?<![\w.])(\d{1,3}(?:\.\d{1,3}){3})(?![\w.])")
_HOSTNAME_RE = re.compile(
    r"(?<![\w.-])([a-zA-Z0-9][a-zA-Z0-9-]{0,62}(?:\.[a-zA-Z0-9][a-zA-Z0-9-]{0,62})+)"
    r"(?![\w-])"
)

# Dotted tokens whose last label is one of these are file names, not hosts.
_FILE_SUFFIXES = frozenset(
    """
    py pyc sh bash txt text json jsonl yaml yml xml html htm css js ts md rst
    c h cpp hpp cc java rb pl php go rs lua sql db sqlite csv tsv log conf cfg
    ini toml lock pem key crt cer der pub asc sig tar gz tgz bz2 xz zip 7z rar
    jar war whl egg deb rpm img iso bin exe dll so a o elf out bak tmp old pid
    sock service socket timer env gitignore dockerfile
    """.split()
)


class ScopeSet:
    """Engagement scope: CIDR networks, single addresses, and hostnames."""

    def __init__(self, entries: Iterable[str]) -> None:
        self.networks: list[ipaddress.IPv4Network | ipaddress.IPv6Network] = []
        self.hostnames: set[str] = set()
        for entry in entries:
            entry = entry.strip()
            if not entry:
                continue
            try:
                self.networks.append(ipaddress.ip_network(entry, strict=False))
            except ValueError:
                self.hostnames.add(entry.lower())

    def __bool__(self) -> bool:
        return bool(self.networks or self.hostnames)

    def contains(self, host: str) -> bool:
        host = host.strip().lower()
        try:
            address = ipaddress.ip_address(host)
        except ValueError:
            return host in self.hostnames
        return any(address in network for network in self.networks)


def extract_host_literals(command_line: str) -> set[str]:
    """Host-looking tokens in a command: IPv4 literals and dotted hostnames.

    Deliberately conservative, with no DNS resolution: version strings and
    file names with dots are excluded by shape, everything else dotted is
    treated as a host so the scope check errs toward blocking.
    """
    hosts: set[str] = set()
    for match in _IPV4_RE.findall(command_line):
        try:
            ipaddress.ip_address(match)
        except ValueError:
            continue
        hosts.add(match)
    for match in _HOSTNAME_RE.finditer(command_line):
        lowered = match.group(1).lower()
        if lowered in hosts:
            continue
        labels = lowered.split(".")
        if all(label.isdigit() for label in labels):
            continue  # partial IP or version string
        if labels[-1] in _FILE_SUFFIXES:
            continue
        start = match.start(1)
        if start > 0 and command_line[start - 1] == "/":
            # a slash right before means path component, except the "//host"
            # of a URL authority
            if start < 2 or command_line[start - 2] not in ":/":
                continue
        hosts.add(lowered)
    return hosts


# -- interactivity guard ------------------------------------------------------

_SEGMENT_SPLIT_RE = re.compile(r"\|\||&&|[|;]|\n")


class InteractivityGuard:
    """Denylist of terminal-bound commands, loaded from an editable file."""

    def __init__(self, denylist_path: Path | str | None = None) -> None:
        path = Path(denylist_path) if denylist_path else _DENYLIST_PATH
        self.always_denied: set[str] = set()
        self.bare_repl_denied: set[str] = set()
        for raw in path.read_text(encoding="utf-8").splitlines():
            entry = raw.strip()
            if not entry or entry.startswith("#"):
                continue
            if entry.endswith("!"):
                self.bare_repl_denied.add(entry[:-1])
            else:
                self.always_denied.add(entry)

    def check(self, command_line: str) -> None:
        for segment in _SEGMENT_SPLIT_RE.split(command_line):
            segment = segment.strip()
            if not segment:
                continue
            try:
                words = shlex.split(segment, posix=True)
            except ValueError:
                words = segment.split()
            if not words:
                continue
            # skip leading VAR=value assignments and common wrappers
            while words and ("=" in words[0] and not words[0].startswith("=")):
                words = words[1:]
            while words and Path(words[0]).name in ("env", "sudo", "nohup", "timeout"):
                words = words[1:]
                while words and (
                    words[0].startswith("-") or ("=" in words[0]) or words[0].isdigit()
                ):
                    words = words[1:]
            if not words:
                continue
            head = Path(words[0]).name
            if head in self.always_denied:
                raise GuardRejection(f"{head!r} is interactive; refusing to run it")
            if head in self.bare_repl_denied and len(words) == 1:
                raise GuardRejection(
                    f"bare {head!r} would open a REPL; give it a script or -c"
                )


# -- executor -----------------------------------------------------------------


class SandboxExecutor:
    """Runs agent commands under scope, guard, cap, and timeout policy.

    Every spawned command is appended to the audit log (JSON lines);
    commands rejected before spawning never appear there.
    """

    def __init__(
        self,
        audit_log_path: Path | str | None = None,
        denylist_path: Path | str | None = None,
        output_cap: int = OUTPUT_CAP_BYTES,
    ) -> None:
        self.audit_log_path = Path(audit_log_path) if audit_log_path else None
        self.guard = InteractivityGuard(denylist_path)
        self.output_cap = output_cap
        self._audit_lock = threading.Lock()

    def run(self, spec: CommandSpec) -> ExecutionResult:
        self.check_scope(spec)
        self.guard.check(spec.command_line)

        env = dict(os.environ)
        env.update(spec.env_overrides)
        start = time.monotonic()
        try:
            proc = subprocess.Popen(
                spec.command_line,
                shell=True,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=str(spec.working_dir) if spec.working_dir else None,
                env=env,
                start_new_session=True,
            )
        except OSError as err:
            raise SpawnFailure(f"could not spawn command: {err}") from err

        timed_out = False
        try:
            out_bytes, err_bytes = proc.communicate(timeout=spec.timeout)
            exit_code = proc.returncode
        except subprocess.TimeoutExpired:
            timed_out = True
            exit_code = TIMEOUT_EXIT_CODE
            self._kill_group(proc)
            try:
                out_bytes, err_bytes = proc.communicate(timeout=5)
            except subprocess.TimeoutExpired:  # pragma: no cover - kill raced
                proc.kill()
                out_bytes, err_bytes = proc.communicate()
        duration = time.monotonic() - start

        stdout, trunc_out = self._cap(out_bytes)
        stderr, trunc_err = self._cap(err_bytes)
        result = ExecutionResult(
            exit_code=exit_code,
            stdout=stdout,
            stderr=stderr,
            duration=duration,
            truncated=trunc_out or trunc_err,
            timed_out=timed_out,
        )
        self._audit(spec, result)
        return result

    def check_scope(self, spec: CommandSpec) -> None:
        scope = ScopeSet(spec.target_scope)
        outside = {
            host
            for host in extract_host_literals(spec.command_line)
            if not scope.contains(host)
        }
        if outside:
            raise ScopeViolation(outside)

    def _cap(self, raw: bytes | None) -> tuple[str, bool]:
        raw = raw or b""
        truncated = len(raw) > self.output_cap
        if truncated:
            raw = raw[: self.output_cap]
        return raw.decode("utf-8", errors="replace"), truncated

    @staticmethod
    def _kill_group(proc: subprocess.Popen) -> None:
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            proc.kill()

    def _audit(self, spec: CommandSpec, result: ExecutionResult) -> None:
        if self.audit_log_path is None:
            return
        record = json.dumps(
            {
                "timestamp": time.time(),
                "argv": spec.command_line,
                "exit_code": result.exit_code,
                "duration": round(result.duration, 6),
                "timed_out": result.timed_out,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        with self._audit_lock:
            self.audit_log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.audit_log_path.open("a", encoding="utf-8") as handle:
                handle.write(record + "\n")


def rejection_result(reason: str) -> ExecutionResult:
    """Synthetic observation for a command that was refused before spawning.

    Agent loops feed this back to the model so it can self-correct instead
    of crashing the run.
    """
    return ExecutionResult(
        exit_code=REJECTED_EXIT_CODE,
        stdout="",
        stderr=f"command rejected: {reason}",
        duration=0.0,
        truncated=False,
        timed_out=False,
    )
