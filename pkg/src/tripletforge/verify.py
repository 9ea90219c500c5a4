"""Self-verification loop: generate (solution, tests), execute, gate, label.

Each attempt regenerates both the solution and its tests from scratch with
an identical prompt (only the sampling nonce differs), so a buggy test
suite from one attempt cannot poison later ones. A passing attempt
replaces the current best only at equal or higher branch coverage, which
keeps regenerated tests from getting progressively weaker; final retention
requires a passing attempt at the configured coverage gate (1.0 by
default). Pass counting for difficulty ignores coverage: difficulty
measures whether generated tests pass at all.
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass

from .gateway import ChatPrompt, Gateway, PermanentRequestError, SamplingParams, user_prompt
from .records import (
    AttemptOutcome,
    Difficulty,
    FailureKind,
    InvariantViolation,
    QuestionRecord,
    QuestionStyle,
    Triplet,
    triplet_id,
)
from .sandbox import Runner, RunReport, RunRequest, RunnerError
from .synthesis import ParseError, load_template, parse_delimited

log = logging.getLogger(__name__)

SOLUTION_BEGIN = "<|Solution Begin|>"
SOLUTION_END = "<|Solution End|>"
TEST_BEGIN = "<|Test Begin|>"
TEST_END = "<|Test End|>"

FIRST_TEMPERATURE = 0.7
RETRY_TEMPERATURE = 0.8


@dataclass
class VerifyConfig:
    n_attempts: int = 10
    timeout_s: float = 30.0
    memory_mb: int = 1024
    require_full_coverage: bool = True
    run_all_attempts: bool = True

    def validate(self) -> None:
        if self.n_attempts < 1:
            raise InvariantViolation("n_attempts >= 1")
        if self.timeout_s <= 0 or self.memory_mb <= 0:
            raise InvariantViolation("resource limits positive")

    @property
    def required_coverage(self) -> float:
        return 1.0 if self.require_full_coverage else 0.0


@dataclass(frozen=True)
class SolutionTestPair:
    solution: str
    tests: str
    raw: str


class DeferredQuestion(RuntimeError):
    """Backend failed permanently for this question; defer, do not drop silently."""


def build_solution_prompt(question: QuestionRecord | str,
                          sampling: SamplingParams | None = None) -> ChatPrompt:
    """Solution-and-tests template with the question appended to the Question slot."""
    text = question.text if isinstance(question, QuestionRecord) else question
    if not text.strip():
        raise InvariantViolation("question non-empty")
    rendered = load_template("solution_tests") + text.rstrip() + "\n"
    return user_prompt(rendered, sampling)


def strip_one_fence(section: str) -> str:
    """Unwrap a single markdown code fence if the section is wrapped in one."""
    lines = section.strip().splitlines()
    if len(lines) >= 2 and lines[0].startswith("```") and lines[-1].strip() == "```":
        return "\n".join(lines[1:-1]).strip("\n")
    return section.strip()


_TOP_LEVEL_TEST_RE = re.compile(r"^def test_\w", re.MULTILINE)


def has_test_function(tests: str) -> bool:
    try:
        tree = ast.parse(tests)
    except SyntaxError:
        return bool(_TOP_LEVEL_TEST_RE.search(tests))
    return any(
        isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef))
        and node.name.startswith("test_")
        for node in tree.body
    )


def parse_solution_test(raw: str) -> SolutionTestPair:
    """Extract the solution and test sections, unwrapping one fence level each."""
    solution = strip_one_fence(parse_delimited(raw, SOLUTION_BEGIN, SOLUTION_END))
    tests = strip_one_fence(parse_delimited(raw, TEST_BEGIN, TEST_END))
    if not solution:
        raise ParseError("empty section: solution")
    if not tests:
        raise ParseError("empty section: tests")
    if not has_test_function(tests):
        raise InvariantViolation("tests define at least one test_ function")
    return SolutionTestPair(solution=solution, tests=tests, raw=raw)


def classify_difficulty(pass_count: int, attempts: int) -> Difficulty:
    """Pass-rate buckets: fail / easy (> 2/3) / medium ([1/3, 2/3]) / hard (< 1/3).

    Comparisons are done in integers (3*pass vs attempts, 2*attempts) so the
    1/3 and 2/3 boundaries land exactly in the closed medium interval.
    """
    if attempts < 1 or not (0 <= pass_count <= attempts):
        raise InvariantViolation(
            "0 <= pass_count <= attempts, attempts >= 1",
            f"pass_count={pass_count}, attempts={attempts}",
        )
    if pass_count == 0:
        return Difficulty.FAIL
    if 3 * pass_count > 2 * attempts:
        return Difficulty.EASY
    if 3 * pass_count < attempts:
        return Difficulty.HARD
    return Difficulty.MEDIUM


def coverage_gate(best_so_far: float | None, attempt: AttemptOutcome) -> bool:
    """True when the attempt should replace the best: passing at equal-or-higher coverage."""
    if not attempt.passed or attempt.coverage is None:
        return False
    return best_so_far is None or attempt.coverage >= best_so_far


def outcome_from_report(index: int, report: RunReport) -> AttemptOutcome:
    if report.status == "passed":
        return AttemptOutcome(
            index=index,
            passed=True,
            coverage=report.branch_coverage,
            tests_collected=report.tests_collected,
            failure=FailureKind.NONE,
            duration_ms=report.duration_ms,
        )
    failure = {
        "failed": FailureKind.TEST_FAILURE,
        "timeout": FailureKind.TIMEOUT,
        "crash": FailureKind.CRASH,
        "collection_error": FailureKind.CRASH,
    }[report.status]
    completed = report.status == "failed"
    return AttemptOutcome(
        index=index,
        passed=False,
        coverage=report.branch_coverage if completed else None,
        tests_collected=report.tests_collected,
        failure=failure,
        duration_ms=report.duration_ms,
    )


def parse_failure_outcome(index: int) -> AttemptOutcome:
    # a malformed model response consumes one of the n attempts
    return AttemptOutcome(
        index=index,
        passed=False,
        coverage=None,
        tests_collected=0,
        failure=FailureKind.PARSE_ERROR,
        duration_ms=0,
    )


def verify_question(
    question: QuestionRecord,
    gateway: Gateway,
    runner: Runner,
    config: VerifyConfig,
    backend_role: str = "solution_gen",
) -> Triplet:
    """Run the attempt loop for one question and build its triplet.

    Runs all n attempts by default so the pass rate has a fixed denominator
    for difficulty labeling; with run_all_attempts=False the loop stops at
    the first accepted attempt and the triplet is labeled ``unlabeled``.
    Runner failures mark the attempt runner_error and the loop continues;
    a permanent gateway error defers the whole question.
    """
    config.validate()

    attempts: list[AttemptOutcome] = []
    best_pair: SolutionTestPair | None = None
    best_coverage: float | None = None
    stopped_early = False

    for index in range(1, config.n_attempts + 1):
        # retries run hotter; the prompt content (and hash) never changes
        temperature = FIRST_TEMPERATURE if index == 1 else RETRY_TEMPERATURE
        sampling = SamplingParams(temperature=temperature, max_tokens=4096, n_samples=1)
        prompt = build_solution_prompt(question, sampling)
        nonce = f"{question.id}:attempt:{index}"
        try:
            completion = gateway.complete(backend_role, prompt, nonce=nonce)[0]
        except PermanentRequestError as exc:
            raise DeferredQuestion(f"question {question.id}: {exc}") from exc

        try:
            pair = parse_solution_test(completion.text)
        except (ParseError, InvariantViolation) as exc:
            log.debug("question %s attempt %d parse failure: %s", question.id, index, exc)
            attempts.append(parse_failure_outcome(index))
            continue

        try:
            report = runner.run(
                RunRequest(
                    solution_code=pair.solution,
                    test_code=pair.tests,
                    timeout_s=config.timeout_s,
                    memory_mb=config.memory_mb,
                )
            )
            outcome = outcome_from_report(index, report)
        except RunnerError as exc:
            log.warning("runner error on question %s attempt %d: %s", question.id, index, exc)
            outcome = AttemptOutcome(
                index=index, passed=False, coverage=None, tests_collected=0,
                failure=FailureKind.RUNNER_ERROR, duration_ms=0,
            )
        attempts.append(outcome)

        if coverage_gate(best_coverage, outcome):
            best_pair = pair
            best_coverage = outcome.coverage
        if (
            not config.run_all_attempts
            and best_coverage is not None
            and best_coverage >= config.required_coverage
        ):
            stopped_early = True
            break

    pass_count = sum(1 for a in attempts if a.passed)
    if stopped_early:
        difficulty = Difficulty.UNLABELED
    else:
        difficulty = classify_difficulty(pass_count, len(attempts))

    retained = best_coverage is not None and best_coverage >= config.required_coverage
    triplet = Triplet(
        id=triplet_id(question.id, QuestionStyle.NATURAL_LANGUAGE),
        question_id=question.id,
        style=QuestionStyle.NATURAL_LANGUAGE,
        solution_source=best_pair.solution if best_pair else "",
        test_source=best_pair.tests if best_pair else "",
        attempts=attempts,
        best_coverage=best_coverage if best_coverage is not None else 0.0,
        difficulty=difficulty,
        retained=retained,
        required_coverage=config.required_coverage,
    )
    triplet.validate(max_attempts=config.n_attempts)
    return triplet
