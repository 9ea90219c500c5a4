"""Execution-runner protocol and the scripted stub runner.

Protocol (version 1): a runner process reads one RunRequest as a single
canonical-form JSON object on stdin and writes one RunReport as a single
JSON object on stdout. Exit code 0 covers every well-formed report,
including failed/timeout outcomes; a nonzero exit means the runner itself
broke (runner_error to the caller).

The stub runner executes nothing. It reports whatever a ``# stub-runner:``
directive embedded in the submitted sources prescribes, which gives
offline tests full control over pass/fail/coverage outcomes through the
exact same protocol the real runner speaks. A directive in the solution
takes precedence over one in the tests, so reject-sampling runs (new
solution against stored tests) can override the stored outcome.
"""

from __future__ import annotations

import json
import re
import shlex
import subprocess
import sys
from dataclasses import dataclass
from typing import Protocol

from .records import InvariantViolation, canonical_dumps

PROTO_VERSION = 1
STDERR_TAIL_LIMIT = 4096

RUN_STATUSES = ("passed", "failed", "timeout", "crash", "collection_error")


class RunnerError(RuntimeError):
    """The runner itself failed; distinct from a failing solution."""


@dataclass(frozen=True)
class RunRequest:
    solution_code: str
    test_code: str
    timeout_s: float = 30.0
    memory_mb: int = 1024

    def validate(self) -> None:
        if not self.solution_code.strip() or not self.test_code.strip():
            raise InvariantViolation("code fields non-empty")
        if self.timeout_s <= 0 or self.memory_mb <= 0:
            raise InvariantViolation("resource limits positive")

    def to_dict(self) -> dict:
        return {
            "proto": PROTO_VERSION,
            "solution_code": self.solution_code,
            "test_code": self.test_code,
            "timeout_s": self.timeout_s,
            "memory_mb": self.memory_mb,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRequest":
        if d.get("proto") != PROTO_VERSION:
            raise RunnerError(f"unsupported protocol version {d.get('proto')!r}")
        return cls(
            solution_code=d["solution_code"],
            test_code=d["test_code"],
            timeout_s=d.get("timeout_s", 30.0),
            memory_mb=d.get("memory_mb", 1024),
        )


@dataclass(frozen=True)
class RunReport:
    status: str
    tests_passed: int
    tests_failed: int
    tests_collected: int
    branch_coverage: float
    stderr_tail: str = ""
    duration_ms: int = 0

    def validate(self) -> None:
        if self.status not in RUN_STATUSES:
            raise InvariantViolation("known run status", self.status)
        if min(self.tests_passed, self.tests_failed, self.tests_collected) < 0:
            raise InvariantViolation("test counts non-negative")
        if self.tests_passed + self.tests_failed > self.tests_collected:
            raise InvariantViolation("passed+failed <= collected")
        if not (0.0 <= self.branch_coverage <= 1.0):
            raise InvariantViolation("coverage in [0,1]", str(self.branch_coverage))
        if self.status == "passed" and (self.tests_failed != 0 or self.tests_collected < 1):
            raise InvariantViolation("passed implies no failures and >=1 collected")
        if len(self.stderr_tail.encode("utf-8")) > STDERR_TAIL_LIMIT:
            raise InvariantViolation("stderr_tail <= 4 KiB")

    def to_dict(self) -> dict:
        return {
            "proto": PROTO_VERSION,
            "status": self.status,
            "tests_passed": self.tests_passed,
            "tests_failed": self.tests_failed,
            "tests_collected": self.tests_collected,
            "branch_coverage": self.branch_coverage,
            "stderr_tail": self.stderr_tail,
            "duration_ms": self.duration_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("proto") != PROTO_VERSION:
            raise RunnerError(f"unsupported protocol version {d.get('proto')!r}")
        report = cls(
            status=d["status"],
            tests_passed=d["tests_passed"],
            tests_failed=d["tests_failed"],
            tests_collected=d["tests_collected"],
            branch_coverage=d["branch_coverage"],
            stderr_tail=d.get("stderr_tail", ""),
            duration_ms=d.get("duration_ms", 0),
        )
        report.validate()
        return report


class Runner(Protocol):
    def run(self, request: RunRequest) -> RunReport: ...


# -- stub runner ---------------------------------------------------------------

_DIRECTIVE_RE = re.compile(r"^\s*#\s*stub-runner:\s*(.+)$", re.MULTILINE)
_DEFAULT_FIELDS = {"passed": 0, "failed": 1, "collected": 1, "coverage": 0.0, "duration_ms": 0}


def _parse_directive(source: str) -> dict | None:
    m = _DIRECTIVE_RE.search(source)
    if not m:
        return None
    fields: dict = {}
    for token in shlex.split(m.group(1)):
        if "=" not in token:
            raise RunnerError(f"malformed stub directive token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    return fields


def stub_report(request: RunRequest) -> RunReport:
    """Report prescribed by the request's stub directive (solution wins over tests)."""
    directive = _parse_directive(request.solution_code) or _parse_directive(request.test_code)
    if directive is None:
        return RunReport(
            status="failed", tests_passed=0, tests_failed=1,
            tests_collected=1, branch_coverage=0.0,
        )
    status = directive.get("status", "failed")
    if status not in RUN_STATUSES:
        raise RunnerError(f"stub directive has unknown status {status!r}")
    if status in ("timeout", "crash", "collection_error"):
        return RunReport(
            status=status,
            tests_passed=int(directive.get("passed", 0)),
            tests_failed=int(directive.get("failed", 0)),
            tests_collected=int(directive.get("collected", 0)),
            branch_coverage=float(directive.get("coverage", 0.0)),
            stderr_tail=directive.get("stderr", ""),
            duration_ms=int(directive.get("duration_ms", 0)),
        )
    collected = int(directive.get("collected", _DEFAULT_FIELDS["collected"]))
    if status == "passed":
        tests_passed = int(directive.get("passed", collected))
        tests_failed = int(directive.get("failed", 0))
        coverage = float(directive.get("coverage", 1.0))
    else:
        tests_failed = int(directive.get("failed", 1))
        tests_passed = int(directive.get("passed", max(0, collected - tests_failed)))
        coverage = float(directive.get("coverage", 0.0))
    report = RunReport(
        status=status,
        tests_passed=tests_passed,
        tests_failed=tests_failed,
        tests_collected=collected,
        branch_coverage=coverage,
        stderr_tail=directive.get("stderr", ""),
        duration_ms=int(directive.get("duration_ms", 0)),
    )
    report.validate()
    return report


class StubRunner:
    """In-process stub for the fast offline path; same semantics as the subprocess stub."""

    def run(self, request: RunRequest) -> RunReport:
        request.validate()
        return stub_report(request)


class SubprocessRunner:
    """Client for any runner process speaking protocol version 1."""

    def __init__(self, command: list[str], startup_timeout_s: float = 120.0):
        if not command:
            raise InvariantViolation("runner command non-empty")
        self.command = list(command)
        self.startup_timeout_s = startup_timeout_s

    def run(self, request: RunRequest) -> RunReport:
        request.validate()
        try:
            proc = subprocess.run(
                self.command,
                input=canonical_dumps(request.to_dict()),
                capture_output=True,
                text=True,
                timeout=request.timeout_s + self.startup_timeout_s,
            )
        except FileNotFoundError as exc:
            raise RunnerError(f"runner executable not found: {self.command[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise RunnerError("runner process hung past its own timeout budget") from exc
        if proc.returncode != 0:
            raise RunnerError(
                f"runner exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        line = proc.stdout.strip().splitlines()
        if not line:
            raise RunnerError("runner produced no report")
        try:
            payload = json.loads(line[-1])
        except ValueError as exc:
            raise RunnerError(f"runner emitted invalid JSON: {line[-1][:200]}") from exc
        return RunReport.from_dict(payload)


def stub_main() -> int:
    """Entry point for the subprocess stub runner (console script)."""
    try:
        payload = json.load(sys.stdin)
        request = RunRequest.from_dict(payload)
        request.validate()
        report = stub_report(request)
    except (RunnerError, InvariantViolation, ValueError) as exc:
        print(f"stub runner error: {exc}", file=sys.stderr)
        return 1
    print(canonical_dumps(report.to_dict()))
    return 0


if __name__ == "__main__":
    sys.exit(stub_main())
