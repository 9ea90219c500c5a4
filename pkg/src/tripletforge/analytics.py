"""Run measurement: pass@k, difficulty distributions, test stats, data flow.

Pure functions over loaded data. pass@k defaults to prefix semantics (at
least one pass among the first k sequential attempts); the combinatorial
estimator is available as a secondary mode for comparison.
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Sequence

from .records import InvariantViolation, PipelineManifest, STAGE_ORDER

log = logging.getLogger(__name__)


@dataclass
class OutcomeMatrix:
    """Question-by-attempt pass/fail grid; all rows share the attempt count."""

    rows: list[list[bool]]

    def validate(self) -> None:
        if self.rows:
            width = len(self.rows[0])
            if width < 1:
                raise InvariantViolation("at least one attempt column")
            if any(len(r) != width for r in self.rows):
                raise InvariantViolation("matrix rectangular")

    @property
    def n_attempts(self) -> int:
        return len(self.rows[0]) if self.rows else 0


def pass_at_k(matrix: OutcomeMatrix, k: int, mode: str = "prefix") -> float:
    """Fraction of questions with >=1 pass among the first k attempts.

    mode="estimator" instead averages the unbiased combinatorial estimator
    1 - C(n-c, k)/C(n, k) over questions, c being each row's pass count.
    """
    matrix.validate()
    if not matrix.rows:
        return 0.0
    n = matrix.n_attempts
    if not (1 <= k <= n):
        raise InvariantViolation("1 <= k <= n", f"k={k}, n={n}")
    if mode == "prefix":
        hits = sum(1 for row in matrix.rows if any(row[:k]))
        return hits / len(matrix.rows)
    if mode == "estimator":
        total = 0.0
        for row in matrix.rows:
            c = sum(row)
            total += 1.0 - comb(n - c, k) / comb(n, k)
        return total / len(matrix.rows)
    raise InvariantViolation("mode prefix|estimator", mode)


DIFFICULTY_BINS = ("easy", "medium", "hard", "fail")


def difficulty_histogram(
    labeled: Iterable[tuple[str, str]]
) -> dict[str, dict[str, object]]:
    """Per-subset difficulty counts with percentages.

    Takes (subset, difficulty) pairs; unlabeled triplets are counted in a
    separate bin, never merged into the four pass-rate bins.
    """
    counts: dict[str, dict[str, int]] = {}
    for subset, difficulty in labeled:
        bins = counts.setdefault(
            subset, {d: 0 for d in DIFFICULTY_BINS} | {"unlabeled": 0}
        )
        if difficulty not in bins:
            raise InvariantViolation("known difficulty label", difficulty)
        bins[difficulty] += 1
    out: dict[str, dict[str, object]] = {}
    for subset in sorted(counts):
        bins = counts[subset]
        total = sum(bins.values())
        out[subset] = {
            "counts": dict(bins),
            "total": total,
            "percent": {
                d: (100.0 * bins[d] / total if total else 0.0) for d in bins
            },
        }
    return out


_TEST_DEF_RE = re.compile(r"^def (test_\w*)", re.MULTILINE)


def test_count(test_source: str) -> int:
    """Number of top-level functions named test_*.

    Unparseable source falls back to a line-regex count with a warning.
    """
    try:
        tree = ast.parse(test_source)
    except SyntaxError:
        count = len(_TEST_DEF_RE.findall(test_source))
        log.warning("test source unparseable; regex fallback counted %d tests", count)
        return count
    return sum(
        1
        for node in tree.body
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef))
        and node.name.startswith("test_")
    )


def token_length_stats(lengths: Sequence[int]) -> dict[str, float]:
    if not lengths:
        return {"count": 0, "mean": 0.0, "min": 0, "max": 0}
    return {
        "count": len(lengths),
        "mean": sum(lengths) / len(lengths),
        "min": min(lengths),
        "max": max(lengths),
    }


class ManifestIntegrityError(ValueError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")


@dataclass
class DataflowReport:
    """Sankey-ready nodes and links; link values conserve stage flow."""

    nodes: list[str] = field(default_factory=list)
    links: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "links": list(self.links)}


def dataflow_report(manifest: PipelineManifest) -> DataflowReport:
    """Flow structure from per-stage accounting.

    Every stage's outgoing flow splits into a retained link toward the next
    recorded stage (or the terminal node) plus one discard link per reason;
    a stage with retained > input or mismatched reason totals is an
    integrity error naming the stage.
    """
    stages = [s for s in STAGE_ORDER if s in manifest.stage_counts]
    report = DataflowReport()
    for stage in stages:
        counts = manifest.stage_counts[stage]
        if counts.retained > counts.input:
            raise ManifestIntegrityError(stage, "retained exceeds input")
        if counts.input != counts.retained + counts.discarded:
            raise ManifestIntegrityError(stage, "input != retained + discarded")
        reasons = manifest.discard_reasons.get(stage, {})
        if sum(reasons.values()) != counts.discarded:
            raise ManifestIntegrityError(stage, "discard reasons do not sum to discarded")
        report.nodes.append(stage)

    for i, stage in enumerate(stages):
        counts = manifest.stage_counts[stage]
        target = stages[i + 1] if i + 1 < len(stages) else "final"
        report.links.append(
            {"source": stage, "target": target, "value": counts.retained, "reason": "retained"}
        )
        for reason, value in sorted(manifest.discard_reasons.get(stage, {}).items()):
            report.links.append(
                {
                    "source": stage,
                    "target": f"discarded@{stage}",
                    "value": value,
                    "reason": reason,
                }
            )
    if stages:
        report.nodes.append("final")
        report.nodes.extend(
            f"discarded@{s}" for s in stages if manifest.stage_counts[s].discarded
        )
    return report
