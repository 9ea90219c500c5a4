"""Post-training data synthesis: style conversion, CoT distillation, SFT filters.

Style conversion rewrites a natural-language question into a completion
task (signature + docstring + examples) that reuses the original solution
and tests. Distillation samples chain-of-thought responses from a
reasoning backend and keeps only those whose extracted final code passes
the triplet's stored tests (test-based reject sampling), then drops
responses that are too long, too short, or answer with a top-level class.
"""

from __future__ import annotations

import logging
import math
import random
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .gateway import ChatPrompt, Gateway, SamplingParams, user_prompt
from .records import (
    GenerationProvenance,
    GenMethod,
    InvariantViolation,
    QuestionRecord,
    QuestionStyle,
    SftRecord,
    Triplet,
    question_id,
    sft_record_id,
    triplet_id,
)
from .sandbox import Runner, RunnerError, RunRequest
from .synthesis import ParseError, load_template, parse_delimited

log = logging.getLogger(__name__)

COMPLETION_BEGIN = "<|Completion Begin|>"
COMPLETION_END = "<|Completion End|>"

TASK_SLOT = "[Coding Task Placeholder]"
TEST_SLOT = "[Unit Test Placeholder]"
SOLUTION_SLOT = "[Solution Placeholder]"

Tokenizer = Callable[[str], int]


def approx_token_len(text: str) -> int:
    """Default tokenizer approximation: ceil(utf-8 bytes / 4). Injectable."""
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass
class SftFilterConfig:
    min_tokens: int = 64
    max_tokens: int = 16384
    reject_class_solutions: bool = True
    samples_per_question: int = 3

    def validate(self) -> None:
        if self.min_tokens >= self.max_tokens:
            raise InvariantViolation("min_tokens < max_tokens")
        if self.samples_per_question < 1:
            raise InvariantViolation("samples_per_question >= 1")


class LeakageError(ValueError):
    """The converted completion task embeds the solution body."""


def build_style_prompt(triplet: Triplet, question_text: str,
                       sampling: SamplingParams | None = None) -> ChatPrompt:
    """Converter template filled with the triplet's question, tests and solution."""
    if not triplet.retained:
        raise InvariantViolation("triplet retained before conversion", triplet.id)
    if triplet.style is not QuestionStyle.NATURAL_LANGUAGE:
        raise InvariantViolation("conversion starts from natural_language style")
    template = load_template("style_converter")
    rendered = (
        template.replace(TASK_SLOT, question_text.strip())
        .replace(TEST_SLOT, f"\n```python\n{triplet.test_source.strip()}\n```")
        .replace(SOLUTION_SLOT, f"\n```python\n{triplet.solution_source.strip()}\n```")
    )
    return user_prompt(rendered, sampling)


_WS_RUN = re.compile(r"\s+")


def _squash_ws(text: str) -> str:
    return _WS_RUN.sub(" ", text).strip()


def parse_completion_task(raw: str, solution_source: str) -> str:
    """Completion-style question text; rejects outputs that leak the solution."""
    from .verify import strip_one_fence  # shared fence rule

    task = strip_one_fence(parse_delimited(raw, COMPLETION_BEGIN, COMPLETION_END))
    if not task:
        raise ParseError("empty completion section")
    if not any(line.startswith("def ") for line in task.splitlines()):
        raise ParseError("completion task lacks a function signature", reason="missing_signature")
    if _squash_ws(solution_source) and _squash_ws(solution_source) in _squash_ws(task):
        raise LeakageError("completion task contains the solution body")
    return task


def make_converted_question(
    original_question: QuestionRecord,
    completion_text: str,
    prompt_hash: str,
    model_id: str,
    created_at: str,
) -> QuestionRecord:
    """New completion-style question derived from the original by conversion."""
    provenance = GenerationProvenance(
        method=GenMethod.STYLE_CONVERSION,
        seed_ids=(original_question.id,),
        model_id=model_id,
        prompt_hash=prompt_hash,
    )
    record = QuestionRecord(
        id=question_id(original_question.subset, prompt_hash, f"convert:{original_question.id}"),
        subset=original_question.subset,
        text=completion_text,
        provenance=provenance,
        created_at=created_at,
        dedup_status=original_question.dedup_status,
    )
    record.validate()
    return record


def make_converted_triplet(original: Triplet, converted_question: QuestionRecord) -> Triplet:
    """Completion-style twin sharing the original solution, tests and difficulty."""
    if converted_question.provenance.method is not GenMethod.STYLE_CONVERSION:
        raise InvariantViolation("completion style requires style_conversion provenance")
    twin = Triplet(
        id=triplet_id(converted_question.id, QuestionStyle.COMPLETION),
        question_id=converted_question.id,
        style=QuestionStyle.COMPLETION,
        solution_source=original.solution_source,
        test_source=original.test_source,
        attempts=list(original.attempts),
        best_coverage=original.best_coverage,
        difficulty=original.difficulty,
        retained=original.retained,
        required_coverage=original.required_coverage,
    )
    twin.validate()
    return twin


_THINK_CLOSE = "</think>"
_CODE_BLOCK = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)


def extract_final_code(response: str) -> str | None:
    """Last fenced code block after the reasoning section, if any."""
    tail = response
    close = response.rfind(_THINK_CLOSE)
    if close >= 0:
        tail = response[close + len(_THINK_CLOSE):]
    blocks = _CODE_BLOCK.findall(tail)
    if not blocks:
        return None
    code = blocks[-1].strip()
    return code or None


@dataclass
class DistillSampleStats:
    requested: int = 0
    accepted: int = 0
    failed_tests: int = 0
    no_code: int = 0
    runner_errors: int = 0
    too_short: int = 0
    too_long: int = 0
    class_based: int = 0


def distill_cot(
    triplet: Triplet,
    question_text: str,
    gateway: Gateway,
    runner: Runner,
    config: SftFilterConfig,
    backend_role: str = "reasoner",
    tokenizer: Tokenizer = approx_token_len,
    apply_filter: bool = True,
) -> tuple[list[SftRecord], DistillSampleStats]:
    """Sample CoT responses and keep those whose final code passes the stored tests."""
    config.validate()
    if not triplet.retained:
        raise InvariantViolation("triplet retained before distillation", triplet.id)
    system = load_template("reasoning_system").strip()
    sampling = SamplingParams(temperature=0.7, max_tokens=config.max_tokens,
                              n_samples=config.samples_per_question)
    prompt = user_prompt(question_text, sampling, system=system)
    completions = gateway.complete(backend_role, prompt, nonce=f"{triplet.id}:distill")

    stats = DistillSampleStats(requested=len(completions))
    records: list[SftRecord] = []
    for i, completion in enumerate(completions):
        code = extract_final_code(completion.text)
        if code is None:
            stats.no_code += 1
            continue
        try:
            report = runner.run(
                RunRequest(solution_code=code, test_code=triplet.test_source)
            )
        except RunnerError as exc:
            log.warning("distill runner error on %s sample %d: %s", triplet.id, i, exc)
            stats.runner_errors += 1
            continue
        if report.status != "passed":
            stats.failed_tests += 1
            continue
        record = SftRecord(
            id=sft_record_id(triplet.id, i),
            triplet_ref=triplet.id,
            question_text=question_text,
            response=completion.text,
            final_code=code,
            passed_tests=True,
            token_len=tokenizer(completion.text),
        )
        records.append(record)

    if apply_filter:
        records, reasons = sft_filter(records, config)
        stats.too_short = reasons.get("too_short", 0)
        stats.too_long = reasons.get("too_long", 0)
        stats.class_based = reasons.get("class_based", 0)
    stats.accepted = len(records)
    return records, stats


_TOP_LEVEL_CLASS = re.compile(r"^class\s+\w+", re.MULTILINE)


def _has_top_level_class(code: str) -> bool:
    return any(
        _TOP_LEVEL_CLASS.match(line) for line in code.splitlines()
    )


def sft_filter(
    records: Sequence[SftRecord], config: SftFilterConfig
) -> tuple[list[SftRecord], dict[str, int]]:
    """Drop too-short/too-long responses and class-based answers. Idempotent."""
    config.validate()
    kept: list[SftRecord] = []
    reasons: dict[str, int] = {}
    for record in records:
        if record.token_len < config.min_tokens:
            reasons["too_short"] = reasons.get("too_short", 0) + 1
        elif record.token_len > config.max_tokens:
            reasons["too_long"] = reasons.get("too_long", 0) + 1
        elif config.reject_class_solutions and _has_top_level_class(record.final_code):
            reasons["class_based"] = reasons.get("class_based", 0) + 1
        else:
            kept.append(record)
    return kept, reasons


def sft_conversation(record: SftRecord) -> dict:
    """One exported fine-tuning conversation: system, user, assistant."""
    return {
        "system": load_template("reasoning_system").strip(),
        "user": record.question_text,
        "assistant": record.response,
    }


def rl_record(question_text: str, triplet: Triplet) -> dict:
    """Binary-reward environment record; deliberately excludes the solution."""
    return {
        "question_text": question_text,
        "test_source": triplet.test_source,
        "entry_module": "solution",
    }


def split_rl_dataset(
    records: list[dict], rng_seed: int, validation_fraction: float = 0.05
) -> tuple[list[dict], list[dict]]:
    """Seeded-shuffle split into train and validation lists."""
    if not (0.0 <= validation_fraction < 1.0):
        raise InvariantViolation("validation_fraction in [0,1)")
    shuffled = list(records)
    random.Random(rng_seed).shuffle(shuffled)
    n_val = int(round(len(shuffled) * validation_fraction))
    return shuffled[n_val:], shuffled[:n_val]


def spot_check_records(
    records: Sequence[SftRecord],
    triplets_by_id: dict[str, Triplet],
    runner: Runner,
    rng_seed: int,
    fraction: float = 0.1,
) -> int:
    """Re-run a random sample of exported records against their tests; raises on regression."""
    if not records:
        return 0
    rng = random.Random(rng_seed)
    count = max(1, int(len(records) * fraction))
    sample: Iterable[SftRecord] = rng.sample(list(records), count)
    for record in sample:
        triplet = triplets_by_id[record.triplet_ref]
        report = runner.run(RunRequest(solution_code=record.final_code,
                                       test_code=triplet.test_source))
        if report.status != "passed":
            raise InvariantViolation(
                "exported record re-verifies", f"record {record.id} now {report.status}"
            )
    return count
