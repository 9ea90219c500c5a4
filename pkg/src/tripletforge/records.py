"""Domain record types and their canonical on-disk form.

Every pipeline stage reads and writes records defined here. Records are
serialized one-per-line as canonical JSON (sorted keys, no whitespace,
UTF-8, shortest round-trip floats) so that serialize(deserialize(x)) is
byte-identical and re-runs diff cleanly. Timestamps are RFC 3339 UTC
strings and are excluded from content hashes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

SCHEMA_VERSION = 1


class InvariantViolation(ValueError):
    """A record failed one of its type invariants.

    Args:
        invariant: Short name of the violated invariant (e.g. "text non-empty").
        detail: Optional human-readable context.
    """

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


def canonical_dumps(obj: Any) -> str:
    """Serialize to the canonical single-line JSON form used on disk."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def content_hash(obj: Any) -> str:
    """Stable sha256 hex digest of an object's canonical form."""
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()


class SubsetTag(str, Enum):
    PREFILL = "prefill"
    LEETCODE = "leetcode"
    CODEFORCES = "codeforces"
    APPS = "apps"
    TACO = "taco"
    CODE_CONTESTS = "code_contests"
    ALGORITHM = "algorithm"
    DATA_STRUCTURE = "data_structure"
    DOCS = "docs"
    FILTER = "filter"
    PACKAGE = "package"
    EVOL = "evol"


class GenMethod(str, Enum):
    MAGPIE_PREFILL = "magpie_prefill"
    SEED_ASSESSMENT = "seed_assessment"
    DSA_CONVERSION = "dsa_conversion"
    DOCS_CONVERSION = "docs_conversion"
    HARVEST_FILTER = "harvest_filter"
    CORPUS_EXPANSION = "corpus_expansion"
    STYLE_CONVERSION = "style_conversion"


class DedupStatus(str, Enum):
    PENDING = "pending"
    RETAINED = "retained"
    DROPPED_DUPLICATE = "dropped_duplicate"


class QuestionStyle(str, Enum):
    NATURAL_LANGUAGE = "natural_language"
    COMPLETION = "completion"


class Difficulty(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    FAIL = "fail"
    UNLABELED = "unlabeled"


class FailureKind(str, Enum):
    NONE = "none"
    TEST_FAILURE = "test_failure"
    PARSE_ERROR = "parse_error"
    TIMEOUT = "timeout"
    CRASH = "crash"
    RUNNER_ERROR = "runner_error"


@dataclass(frozen=True)
class GenerationProvenance:
    """How a question came to exist: method, seeds, model, exact prompt hash."""

    method: GenMethod
    seed_ids: tuple[str, ...]
    model_id: str
    prompt_hash: str

    def validate(self) -> None:
        if self.method is GenMethod.SEED_ASSESSMENT and len(self.seed_ids) != 3:
            raise InvariantViolation(
                "seed_assessment carries exactly 3 seed_ids", f"got {len(self.seed_ids)}"
            )
        if self.method is GenMethod.DOCS_CONVERSION and len(self.seed_ids) != 1:
            raise InvariantViolation(
                "docs_conversion carries exactly 1 seed_id", f"got {len(self.seed_ids)}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method.value,
            "seed_ids": list(self.seed_ids),
            "model_id": self.model_id,
            "prompt_hash": self.prompt_hash,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GenerationProvenance":
        return cls(
            method=GenMethod(d["method"]),
            seed_ids=tuple(d["seed_ids"]),
            model_id=d["model_id"],
            prompt_hash=d["prompt_hash"],
        )


@dataclass
class QuestionRecord:
    """A synthesized coding question plus bookkeeping for dedup and provenance."""

    id: str
    subset: SubsetTag
    text: str
    provenance: GenerationProvenance
    created_at: str
    dedup_status: DedupStatus = DedupStatus.PENDING
    duplicate_of: str | None = None
    embedding_ref: str | None = None

    KIND = "question"

    def validate(self) -> None:
        if not self.text.strip():
            raise InvariantViolation("text non-empty")
        if self.dedup_status is DedupStatus.DROPPED_DUPLICATE and not self.duplicate_of:
            raise InvariantViolation(
                "dropped_duplicate requires duplicate_of", f"record {self.id}"
            )
        if self.dedup_status is not DedupStatus.DROPPED_DUPLICATE and self.duplicate_of:
            raise InvariantViolation(
                "duplicate_of only on dropped records", f"record {self.id}"
            )
        self.provenance.validate()

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.KIND,
            "id": self.id,
            "subset": self.subset.value,
            "text": self.text,
            "provenance": self.provenance.to_dict(),
            "created_at": self.created_at,
            "dedup_status": self.dedup_status.value,
            "duplicate_of": self.duplicate_of,
            "embedding_ref": self.embedding_ref,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QuestionRecord":
        return cls(
            id=d["id"],
            subset=SubsetTag(d["subset"]),
            text=d["text"],
            provenance=GenerationProvenance.from_dict(d["provenance"]),
            created_at=d["created_at"],
            dedup_status=DedupStatus(d["dedup_status"]),
            duplicate_of=d.get("duplicate_of"),
            embedding_ref=d.get("embedding_ref"),
        )


@dataclass(frozen=True)
class AttemptOutcome:
    """One self-verification attempt for a question.

    ``coverage`` is None when execution never completed (timeout, crash,
    parse failure before execution); it is only meaningful on completed runs.
    """

    index: int
    passed: bool
    coverage: float | None
    tests_collected: int
    failure: FailureKind
    duration_ms: int

    def validate(self) -> None:
        if self.index < 1:
            raise InvariantViolation("attempt index is 1-based", f"got {self.index}")
        if self.tests_collected < 0 or self.duration_ms < 0:
            raise InvariantViolation("counts non-negative")
        if self.coverage is not None and not (0.0 <= self.coverage <= 1.0):
            raise InvariantViolation("coverage in [0,1]", f"got {self.coverage}")
        if self.passed:
            if self.failure is not FailureKind.NONE:
                raise InvariantViolation(
                    "passed implies failure=none", self.failure.value
                )
            if self.tests_collected < 1:
                raise InvariantViolation("passed implies tests_collected >= 1")
            if self.coverage is None:
                raise InvariantViolation("passed implies coverage present")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "passed": self.passed,
            "coverage": self.coverage,
            "tests_collected": self.tests_collected,
            "failure": self.failure.value,
            "duration_ms": self.duration_ms,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttemptOutcome":
        return cls(
            index=d["index"],
            passed=d["passed"],
            coverage=d["coverage"],
            tests_collected=d["tests_collected"],
            failure=FailureKind(d["failure"]),
            duration_ms=d["duration_ms"],
        )


@dataclass
class Triplet:
    """Question + solution source + test source + attempt history.

    ``required_coverage`` snapshots the retention gate the triplet was
    verified under (1.0 by default: full branch coverage required).
    """

    id: str
    question_id: str
    style: QuestionStyle
    solution_source: str
    test_source: str
    attempts: list[AttemptOutcome]
    best_coverage: float
    difficulty: Difficulty
    retained: bool
    required_coverage: float = 1.0

    KIND = "triplet"

    def validate(self, max_attempts: int | None = None) -> None:
        for a in self.attempts:
            a.validate()
        if max_attempts is not None and len(self.attempts) > max_attempts:
            raise InvariantViolation(
                "attempts length <= configured n",
                f"{len(self.attempts)} > {max_attempts}",
            )
        passing = [a.coverage for a in self.attempts if a.passed and a.coverage is not None]
        expected_best = max(passing) if passing else 0.0
        if abs(self.best_coverage - expected_best) > 1e-12:
            raise InvariantViolation(
                "best_coverage equals max passing coverage",
                f"{self.best_coverage} != {expected_best}",
            )
        if self.retained:
            if not any(
                a.passed and a.coverage is not None and a.coverage >= self.required_coverage
                for a in self.attempts
            ):
                raise InvariantViolation(
                    "retained implies a passing attempt at required coverage"
                )
        if not self.solution_source.strip() and self.retained:
            raise InvariantViolation("retained triplet has empty solution")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.KIND,
            "id": self.id,
            "question_id": self.question_id,
            "style": self.style.value,
            "solution_source": self.solution_source,
            "test_source": self.test_source,
            "attempts": [a.to_dict() for a in self.attempts],
            "best_coverage": self.best_coverage,
            "difficulty": self.difficulty.value,
            "retained": self.retained,
            "required_coverage": self.required_coverage,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Triplet":
        return cls(
            id=d["id"],
            question_id=d["question_id"],
            style=QuestionStyle(d["style"]),
            solution_source=d["solution_source"],
            test_source=d["test_source"],
            attempts=[AttemptOutcome.from_dict(a) for a in d["attempts"]],
            best_coverage=d["best_coverage"],
            difficulty=Difficulty(d["difficulty"]),
            retained=d["retained"],
            required_coverage=d.get("required_coverage", 1.0),
        )


@dataclass
class SftRecord:
    """One accepted chain-of-thought response for supervised fine-tuning."""

    id: str
    triplet_ref: str
    question_text: str
    response: str
    final_code: str
    passed_tests: bool
    token_len: int

    KIND = "sft"

    def validate(self) -> None:
        if not self.passed_tests:
            raise InvariantViolation("included-in-dataset implies passed_tests")
        if self.token_len < 0:
            raise InvariantViolation("token_len non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.KIND,
            "id": self.id,
            "triplet_ref": self.triplet_ref,
            "question_text": self.question_text,
            "response": self.response,
            "final_code": self.final_code,
            "passed_tests": self.passed_tests,
            "token_len": self.token_len,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SftRecord":
        return cls(
            id=d["id"],
            triplet_ref=d["triplet_ref"],
            question_text=d["question_text"],
            response=d["response"],
            final_code=d["final_code"],
            passed_tests=d["passed_tests"],
            token_len=d["token_len"],
        )


@dataclass
class StageCount:
    input: int = 0
    retained: int = 0
    discarded: int = 0

    def validate(self, stage: str) -> None:
        if min(self.input, self.retained, self.discarded) < 0:
            raise InvariantViolation("counts non-negative", stage)
        if self.input != self.retained + self.discarded:
            raise InvariantViolation(
                "input = retained + discarded",
                f"stage {stage}: {self.input} != {self.retained}+{self.discarded}",
            )


# Stage dependency edges: input of a stage must equal the sum of its
# upstreams' retained counts. convert/distill/analyze fan out after verify.
STAGE_UPSTREAMS: dict[str, tuple[str, ...]] = {
    "synth": (),
    "dedup": ("synth",),
    "verify": ("dedup",),
    "convert": ("verify",),
    "distill": ("verify", "convert"),
    "analyze": ("verify", "convert"),
}

STAGE_ORDER = ("synth", "dedup", "verify", "convert", "distill", "analyze")


@dataclass
class PipelineManifest:
    """Per-stage record counts and discard reasons for a run (data-flow source)."""

    run_id: str
    stage_counts: dict[str, StageCount] = field(default_factory=dict)
    discard_reasons: dict[str, dict[str, int]] = field(default_factory=dict)
    config_snapshot: dict[str, Any] = field(default_factory=dict)
    completed_stages: list[str] = field(default_factory=list)

    def validate(self) -> None:
        for stage, counts in self.stage_counts.items():
            counts.validate(stage)
            reasons = self.discard_reasons.get(stage, {})
            total_reasons = sum(reasons.values())
            if total_reasons != counts.discarded:
                raise InvariantViolation(
                    "discard reasons sum to discarded",
                    f"stage {stage}: {total_reasons} != {counts.discarded}",
                )
        for stage in self.completed_stages:
            upstreams = STAGE_UPSTREAMS.get(stage, ())
            if not upstreams or stage not in self.stage_counts:
                continue
            if not all(u in self.stage_counts for u in upstreams):
                continue
            expected = sum(self.stage_counts[u].retained for u in upstreams)
            if self.stage_counts[stage].input != expected:
                raise InvariantViolation(
                    "stage input equals upstream retained",
                    f"stage {stage}: {self.stage_counts[stage].input} != {expected}",
                )

    def record(self, stage: str, counts: StageCount, reasons: dict[str, int]) -> None:
        counts.validate(stage)
        self.stage_counts[stage] = counts
        self.discard_reasons[stage] = dict(sorted(reasons.items()))
        if stage not in self.completed_stages:
            self.completed_stages.append(stage)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "stage_counts": {
                s: {"input": c.input, "retained": c.retained, "discarded": c.discarded}
                for s, c in sorted(self.stage_counts.items())
            },
            "discard_reasons": {
                s: dict(sorted(r.items())) for s, r in sorted(self.discard_reasons.items())
            },
            "config_snapshot": self.config_snapshot,
            "completed_stages": list(self.completed_stages),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelineManifest":
        return cls(
            run_id=d["run_id"],
            stage_counts={
                s: StageCount(c["input"], c["retained"], c["discarded"])
                for s, c in d.get("stage_counts", {}).items()
            },
            discard_reasons={
                s: dict(r) for s, r in d.get("discard_reasons", {}).items()
            },
            config_snapshot=d.get("config_snapshot", {}),
            completed_stages=list(d.get("completed_stages", [])),
        )


RECORD_TYPES = {
    QuestionRecord.KIND: QuestionRecord,
    Triplet.KIND: Triplet,
    SftRecord.KIND: SftRecord,
}


def record_from_dict(d: dict[str, Any]):
    """Rehydrate any domain record from its canonical dict form."""
    kind = d.get("kind")
    if kind not in RECORD_TYPES:
        raise InvariantViolation("known record kind", f"got {kind!r}")
    return RECORD_TYPES[kind].from_dict(d)


def question_id(subset: SubsetTag, prompt_hash: str, nonce: str) -> str:
    """Content-derived question id: identical inputs give identical ids."""
    digest = hashlib.sha256(
        f"{subset.value}:{prompt_hash}:{nonce}".encode("utf-8")
    ).hexdigest()
    return f"q_{digest[:16]}"


def triplet_id(qid: str, style: QuestionStyle) -> str:
    digest = hashlib.sha256(f"{qid}:{style.value}".encode("utf-8")).hexdigest()
    return f"t_{digest[:16]}"


def sft_record_id(triplet_ref: str, sample_index: int) -> str:
    digest = hashlib.sha256(f"{triplet_ref}:sft:{sample_index}".encode("utf-8")).hexdigest()
    return f"s_{digest[:16]}"


def iter_validate(records: Iterable[Any]) -> Iterable[Any]:
    """Yield records, validating each; raises on first invariant violation."""
    for r in records:
        r.validate()
        yield r
