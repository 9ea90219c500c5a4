"""Question synthesis: prompt builders, output parsers and quality filters.

Prompt templates are versioned text assets under ``assets/prompts/``; slot
substitution is literal string replacement so every built prompt differs
from its template only inside the slots. Parsers are strict about the
delimiter grammar and raise ParseError with the missing marker named.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .gateway import ChatPrompt, SamplingParams, user_prompt
from .records import InvariantViolation

END_OF_TURN = "<|im_end|>"
MIN_QUESTION_CHARS = 10
MAX_QUESTION_CHARS = 8192

PREFILL_PREFIXES = {
    1: "Write a function to",
    2: "Write a Python function",
    3: "Create a function that",
}

QUALITY_VOCAB = ("very poor", "poor", "average", "good", "excellent")

CATEGORY_VOCAB = (
    "Debugging",
    "Code Review",
    "Code Refactoring",
    "Code Optimization",
    "Function Generation",
    "Class Design",
    "Algorithm Implementation",
    "API Integration",
    "Database Operations",
    "Testing",
    "Security",
    "Error Handling",
    "Concurrency",
    "UI/UX Implementation",
    "DevOps",
    "Documentation",
    "Dependency Management",
    "Code Migration",
    "Performance Profiling",
    "Others",
)

KEEP_CATEGORIES = ("Algorithm Implementation", "Function Generation")
KEEP_QUALITIES = ("good", "excellent")

ABSTAIN_SENTINEL = "BAD_DOCUMENT"


class ParseError(ValueError):
    def __init__(self, message: str, reason: str = "parse_error"):
        self.reason = reason
        super().__init__(message)


class QualityLevel(str, Enum):
    VERY_POOR = "very_poor"
    POOR = "poor"
    AVERAGE = "average"
    GOOD = "good"
    EXCELLENT = "excellent"

    @classmethod
    def from_template_value(cls, raw: str) -> "QualityLevel":
        if raw not in QUALITY_VOCAB:
            raise InvariantViolation("quality in template vocabulary", repr(raw))
        return cls(raw.replace(" ", "_"))


@dataclass(frozen=True)
class HarvestLabel:
    quality: QualityLevel
    primary_tag: str
    other_tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class SeedItem:
    id: str
    text: str


@dataclass(frozen=True)
class SnippetSource:
    kind: str  # "dsa_snippet" | "doc_page"
    content: str
    origin: str

    def validate(self) -> None:
        if not self.content.strip():
            raise InvariantViolation("content non-empty")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """Load one prompt template asset verbatim."""
    return (
        resources.files("tripletforge.assets.prompts")
        .joinpath(f"{name}.txt")
        .read_text(encoding="utf-8")
    )


def _fill(template: str, slots: dict[str, str]) -> str:
    out = template
    for placeholder, value in slots.items():
        if placeholder not in out:
            raise InvariantViolation("template slot present", placeholder)
        out = out.replace(placeholder, value)
    return out


# -- builders ----------------------------------------------------------------


def build_prefill_prompt(prefix_choice: int,
                         sampling: SamplingParams | None = None) -> ChatPrompt:
    """Raw-completion prompt with the user turn opened by the chosen prefix.

    The rendered text ends exactly at the prefix, with no end-of-turn token,
    so the model completes the remaining part of the user query.
    """
    if prefix_choice not in PREFILL_PREFIXES:
        raise InvariantViolation("prefix_choice in {1,2,3}", str(prefix_choice))
    text = _fill(load_template("prefill_chat"),
                 {"{Prefilling Content}": PREFILL_PREFIXES[prefix_choice]})
    return ChatPrompt(prefill=text, sampling=sampling or SamplingParams())


def parse_prefill_completion(raw: str, prefix: str = "") -> str:
    """Prefix + completion truncated at the first end-of-turn marker."""
    if not raw:
        raise ParseError("empty completion")
    completion = raw.split(END_OF_TURN, 1)[0]
    question = (prefix + completion).strip()
    if not question:
        raise ParseError("completion empty after truncation")
    if len(question) < MIN_QUESTION_CHARS:
        raise ParseError(f"question shorter than {MIN_QUESTION_CHARS} chars", reason="too_short")
    return question


def build_assessment_prompt(seeds: list[SeedItem],
                            sampling: SamplingParams | None = None) -> ChatPrompt:
    """Fill the three seed slots; the model writes the Question 4 slot."""
    if len(seeds) != 3:
        raise InvariantViolation("exactly 3 seeds", f"got {len(seeds)}")
    if len({s.id for s in seeds}) != 3:
        raise InvariantViolation("seed ids distinct")
    for s in seeds:
        if not s.text.strip():
            raise InvariantViolation("seed text non-empty", s.id)
    text = _fill(
        load_template("assessment"),
        {"{Seed 1}": seeds[0].text, "{Seed 2}": seeds[1].text, "{Seed 3}": seeds[2].text},
    )
    return user_prompt(text, sampling)


def parse_assessment_question(raw: str) -> str:
    question = raw.strip()
    if not question:
        raise ParseError("empty assessment output")
    if len(question) < MIN_QUESTION_CHARS:
        raise ParseError("assessment question too short", reason="too_short")
    return question


def parse_delimited(raw: str, begin: str, end: str) -> str:
    """Text strictly between the first ``begin`` marker and the next ``end``."""
    start = raw.find(begin)
    if start < 0:
        raise ParseError(f"missing marker {begin}")
    after = start + len(begin)
    stop = raw.find(end, after)
    if stop < 0:
        raise ParseError(f"missing marker {end}")
    return raw[after:stop].strip()


def build_dsa_prompt(snippet: SnippetSource,
                     sampling: SamplingParams | None = None) -> ChatPrompt:
    if snippet.kind != "dsa_snippet":
        raise InvariantViolation("snippet kind dsa_snippet", snippet.kind)
    snippet.validate()
    text = load_template("dsa_snippet") + snippet.content.rstrip() + "\n"
    return user_prompt(text, sampling)


def build_docs_prompt(doc: SnippetSource,
                      sampling: SamplingParams | None = None) -> ChatPrompt:
    if doc.kind != "doc_page":
        raise InvariantViolation("doc kind doc_page", doc.kind)
    doc.validate()
    text = _fill(
        load_template("docs_page"),
        {"{PACKAGE_NAME}": doc.origin, "{CONTENT}": doc.content.rstrip()},
    )
    return user_prompt(text, sampling)


def parse_generated_question(raw: str) -> str | None:
    """Question section of a DSA/Docs response; None on abstention."""
    question = parse_delimited(raw, "<|Question Begin|>", "<|Question End|>")
    if question == ABSTAIN_SENTINEL:
        return None
    if not question:
        raise ParseError("empty question section")
    if len(question) < MIN_QUESTION_CHARS:
        raise ParseError("question too short", reason="too_short")
    return question


def build_quality_prompt(question: str,
                         sampling: SamplingParams | None = None) -> ChatPrompt:
    if not question.strip():
        raise InvariantViolation("question non-empty")
    return user_prompt(_fill(load_template("quality_label"), {"{input}": question}), sampling)


def build_category_prompt(question: str,
                          sampling: SamplingParams | None = None) -> ChatPrompt:
    if not question.strip():
        raise InvariantViolation("question non-empty")
    return user_prompt(_fill(load_template("category_label"), {"{input}": question}), sampling)


_FENCED_BLOCK = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)


def first_fenced_block(raw: str) -> str:
    m = _FENCED_BLOCK.search(raw)
    if not m:
        raise ParseError("missing fenced block")
    return m.group(1).strip()


def parse_quality_label(raw: str) -> QualityLevel:
    block = first_fenced_block(raw)
    try:
        payload = json.loads(block)
    except ValueError as exc:
        raise ParseError(f"quality block is not valid JSON: {exc}") from exc
    value = payload.get("input_quality")
    if not isinstance(value, str):
        raise ParseError("quality block missing input_quality")
    return QualityLevel.from_template_value(value)


def parse_category_label(raw: str) -> tuple[str, tuple[str, ...]]:
    block = first_fenced_block(raw)
    try:
        payload = json.loads(block)
    except ValueError as exc:
        raise ParseError(f"category block is not valid JSON: {exc}") from exc
    primary = payload.get("primary_tag")
    others = payload.get("other_tags", [])
    if not isinstance(primary, str) or primary not in CATEGORY_VOCAB:
        raise InvariantViolation("primary_tag in template vocabulary", repr(primary))
    for tag in others:
        if tag not in CATEGORY_VOCAB:
            raise InvariantViolation("other_tags in template vocabulary", repr(tag))
    return primary, tuple(others)


def harvest_filter(label: HarvestLabel) -> bool:
    """Keep only high-quality queries in the two retained task categories."""
    return (
        label.quality.value.replace("_", " ") in KEEP_QUALITIES
        and label.primary_tag in KEEP_CATEGORIES
    )


def enforce_question_bounds(question: str) -> str:
    """Shared length guard applied to every parsed question."""
    text = question.strip()
    if len(text) < MIN_QUESTION_CHARS:
        raise ParseError("question too short", reason="too_short")
    if len(text) > MAX_QUESTION_CHARS:
        raise ParseError("runaway generation", reason="too_long")
    return text
