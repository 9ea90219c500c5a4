"""Acceptance suite: one test per criterion, one printed line per criterion.

Run with ``pytest -v -s tests/test_acceptance.py`` (or the full suite; the
lines land in the captured output either way). Criteria 9 and 10 need the
execution runner built under runner/dist; they skip with a reason when it
is absent. Criterion 11 needs a live LLM backend and is informative only.
"""

from __future__ import annotations

import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from tripletforge import synthesis as syn
from tripletforge.dedupe import DedupConfig, VectorIndex, contamination_report, dedup_scan
from tripletforge.engine import Engine, STAGES
from tripletforge.gateway import BackendDescriptor, BackendKind, Gateway
from tripletforge.analytics import OutcomeMatrix, pass_at_k
from tripletforge.records import Difficulty
from tripletforge.sandbox import RunRequest, SubprocessRunner
from tripletforge.verify import (
    classify_difficulty,
    coverage_gate,
    parse_solution_test,
)
from tripletforge.posttrain import parse_completion_task

from .pipeline_utils import (
    assert_identical_trees,
    golden_config,
    run_all_stages,
    stage_workspace,
)
from .test_engine import AbortRun, Killer

RUNNER_MAIN = Path(__file__).parent.parent / "runner" / "dist" / "main.js"


def report_pass(number: int | str, description: str) -> None:
    print(f"ACCEPTANCE CRITERION {number}: PASS - {description}")


# -- criterion 1: template/parser golden suite --------------------------------


def test_criterion_1_template_and_parser_golden_suite():
    started = time.monotonic()
    cases = 0

    # prefill prompt endings, byte-exact per fixed prefix
    for choice, suffix in {
        1: "Write a function to",
        2: "Write a Python function",
        3: "Create a function that",
    }.items():
        assert syn.build_prefill_prompt(choice).prefill.endswith(suffix)
        cases += 1

    # prefill template fidelity outside the slot
    built = syn.build_prefill_prompt(1).prefill
    assert built.replace("Write a function to", "{Prefilling Content}", 1) == (
        syn.load_template("prefill_chat")
    )
    cases += 1

    # representative prefill sample accepted verbatim
    sample = (
        "Write a function to find max and min from an array in Python. "
        "I am looking for an O(n) time complexity solution."
    )
    assert syn.parse_prefill_completion(sample) == sample
    cases += 1

    # assessment seeds land under their numbered slots byte-for-byte
    seeds = [
        syn.SeedItem("a", "Seed alpha body."),
        syn.SeedItem("b", "Seed beta body."),
        syn.SeedItem("c", "Seed gamma body."),
    ]
    text = syn.build_assessment_prompt(seeds).turns[0].content
    for i, seed in enumerate(seeds, start=1):
        assert f"## Question {i} \n{seed.text}" in text
        cases += 1
    assert text.rstrip("\n").endswith("## Question 4 ")
    cases += 1

    # docs abstention: sentinel instruction in the template, abstention yields no record
    assert 'please output "BAD_DOCUMENT"' in syn.load_template("docs_page")
    abstained = (
        "<|Analysis Begin|>\nthin\n<|Analysis End|>\n\n"
        "<|Question Begin|>\nBAD_DOCUMENT\n<|Question End|>"
    )
    assert syn.parse_generated_question(abstained) is None
    cases += 1

    # solution template worked example parses to add + its four tests, in order
    template = syn.load_template("solution_tests")
    exemplar = template[
        template.index("<|Solution Begin|>", template.index("## Example")):
        template.index("## Question:")
    ]
    pair = parse_solution_test(exemplar)
    assert "def add(a, b):" in pair.solution
    assert pair.tests.startswith("from solution import add")
    names = [
        line.split("(")[0].removeprefix("def ")
        for line in pair.tests.splitlines()
        if line.startswith("def test_")
    ]
    assert names == [
        "test_add_positive_numbers",
        "test_add_with_zero",
        "test_add_negative_numbers",
        "test_add_mixed_sign_numbers",
    ]
    cases += 2

    # style converter worked example round-trips through the completion parser
    converter = syn.load_template("style_converter")
    start = converter.index("```python\ndef longest_common_prefix")
    end = converter.index("```", start + 10)
    body = converter[start + len("```python\n"): end]
    task = parse_completion_task(
        f"<|Completion Begin|>\n{body}<|Completion End|>",
        solution_source="def longestCommonPrefix(strs): pass",
    )
    assert task.startswith("def longest_common_prefix(strs: List[str]) -> str:")
    cases += 1

    # generic delimiter grammar: wrap-then-parse identity
    assert syn.parse_delimited(
        "<|Question Begin|>Q<|Question End|>", "<|Question Begin|>", "<|Question End|>"
    ) == "Q"
    cases += 1

    # label templates: slots only differ, closed vocabularies enforced
    for builder, asset in (
        (syn.build_quality_prompt, "quality_label"),
        (syn.build_category_prompt, "category_label"),
    ):
        built = builder("How do I sort a list?").turns[0].content
        assert built.replace("How do I sort a list?", "{input}", 1) == syn.load_template(asset)
        cases += 1

    # fine-tuning system prompt keeps the think-section markers verbatim
    system = syn.load_template("reasoning_system")
    assert "<think> {thought with steps} </think>" in system
    cases += 1

    elapsed = time.monotonic() - started
    assert cases >= 15
    assert elapsed < 5.0, f"golden suite took {elapsed:.2f}s"
    report_pass(1, f"{cases} template/parser golden cases in {elapsed:.2f}s")


# -- criterion 2: difficulty oracle --------------------------------------------


def test_criterion_2_difficulty_oracle_table():
    oracle = {
        0: Difficulty.FAIL,
        1: Difficulty.HARD, 2: Difficulty.HARD, 3: Difficulty.HARD,
        4: Difficulty.MEDIUM, 5: Difficulty.MEDIUM, 6: Difficulty.MEDIUM,
        7: Difficulty.EASY, 8: Difficulty.EASY, 9: Difficulty.EASY, 10: Difficulty.EASY,
    }
    for pass_count, expected in oracle.items():
        got = classify_difficulty(pass_count, 10)
        assert got is expected, f"({pass_count}, 10) -> {got}, oracle says {expected}"
    report_pass(2, "classify_difficulty matches the 11-entry oracle for n=10 exactly")


# -- criterion 3: dedup / nearest-neighbor oracle -------------------------------


def test_criterion_3_dedup_and_nearest_match_bruteforce_oracle():
    started = time.monotonic()
    rng = random.Random(31337)
    dim, total = 16, 2000

    vectors: list[list[float]] = []
    for i in range(total):
        if i > 100 and rng.random() < 0.08:
            vectors.append(list(vectors[rng.randrange(i)]))  # planted duplicate
        else:
            raw = [rng.gauss(0.0, 1.0) for _ in range(dim)]
            norm = math.sqrt(sum(x * x for x in raw))
            vectors.append([x / norm for x in raw])
    ids = [f"q{i:05d}" for i in range(total)]

    # oracle: one exhaustive pairwise similarity matrix, then a literal greedy replay
    matrix = np.asarray(vectors)
    sims = matrix @ matrix.T
    # anchor the precomputed matrix to arithmetic independent of any library
    for _ in range(2000):
        i, j = rng.randrange(total), rng.randrange(total)
        by_hand = sum(a * b for a, b in zip(vectors[i], vectors[j]))
        assert abs(sims[i, j] - by_hand) < 1e-12
    retained_rows: list[int] = []
    oracle_decisions = []
    for i in range(total):
        best_j = -1
        best = -2.0
        for j in retained_rows:
            if sims[i, j] > best:
                best, best_j = sims[i, j], j
        if best_j >= 0 and best > 0.9:
            oracle_decisions.append((ids[i], False, ids[best_j]))
        else:
            retained_rows.append(i)
            oracle_decisions.append((ids[i], True, None))

    scan = [
        (d.record_id, d.retained, d.duplicate_of)
        for d in dedup_scan(
            ((rid, "s", vec) for rid, vec in zip(ids, vectors)),
            DedupConfig(threshold=0.9),
        )
    ]
    assert scan == oracle_decisions
    dropped = sum(1 for _, retained, _ in scan if not retained)
    assert dropped > 50, "fixture must exercise real duplicate pressure"

    index = VectorIndex(dimension=dim)
    for rid, vec in zip(ids, vectors):
        index.add(rid, vec)
    for qi in range(0, total, 97):
        got = index.nearest(vectors[qi], k=5)
        order = sorted(range(total), key=lambda j: (-sims[qi, j], ids[j]))[:5]
        assert [rid for rid, _ in got] == [ids[j] for j in order]

    elapsed = time.monotonic() - started
    assert elapsed < 30.0, f"oracle comparison took {elapsed:.2f}s"
    report_pass(3, f"2000-vector dedup+nearest equals brute force (dropped={dropped}) in {elapsed:.1f}s")


# -- criterion 4: contamination fixture -----------------------------------------


def test_criterion_4_contamination_known_overlap_pair(tmp_path):
    record_text = (
        "How do I write a Python function to count the number of uppercase "
        "letters in a given string?"
    )
    bench_text = "Write a python function to count the upper case characters in a given string."
    # stub embedder prescribes cos(record, benchmark) = 0.959 exactly
    fixtures = tmp_path / "embed.json"
    fixtures.write_text(json.dumps({
        "embeddings": {
            record_text: [1.0, 0.0],
            bench_text: [0.959, math.sqrt(1.0 - 0.959 ** 2)],
        }
    }))
    gw = Gateway({
        "embedder": BackendDescriptor(
            kind=BackendKind.MOCK, model_id="m", fixtures=str(fixtures), mock_mode="strict"
        )
    })
    (record_vec,) = gw.embed("embedder", [record_text])
    (bench_vec,) = gw.embed("embedder", [bench_text])

    flagged_at_095 = contamination_report(
        [("kod-upper", record_vec)], {"mbpp": [("MBPP/450", bench_vec)]}, threshold=0.95
    ).per_benchmark["mbpp"].flagged
    assert len(flagged_at_095) == 1
    assert flagged_at_095[0].benchmark_id == "MBPP/450"
    assert flagged_at_095[0].similarity == pytest.approx(0.959, abs=1e-9)

    flagged_at_096 = contamination_report(
        [("kod-upper", record_vec)], {"mbpp": [("MBPP/450", bench_vec)]}, threshold=0.96
    ).per_benchmark["mbpp"].flagged
    assert flagged_at_096 == []
    report_pass(4, "uppercase-count overlap pair flagged at 0.95, not at 0.96")


# -- criterion 5: coverage-gate properties ---------------------------------------


def test_criterion_5_coverage_gate_properties():
    from tripletforge.records import AttemptOutcome, FailureKind

    started = time.monotonic()
    rng = random.Random(0xC0FFEE)
    coverages = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0]
    violations = 0
    for _ in range(10_000):
        best: float | None = None
        history: list[float] = []
        attempts = []
        for index in range(1, rng.randrange(1, 12)):
            if rng.random() < 0.45:
                outcome = AttemptOutcome(
                    index, True, rng.choice(coverages), 4, FailureKind.NONE, 0
                )
            else:
                outcome = AttemptOutcome(
                    index, False, rng.random(), 4, FailureKind.TEST_FAILURE, 0
                )
            attempts.append(outcome)
            if coverage_gate(best, outcome):
                best = outcome.coverage
                history.append(best)
        if history != sorted(history):
            violations += 1
        retained = best is not None and best >= 1.0
        if retained and not any(
            a.passed and a.coverage == 1.0 for a in attempts
        ):
            violations += 1
    elapsed = time.monotonic() - started
    assert violations == 0
    assert elapsed < 10.0, f"property run took {elapsed:.2f}s"
    report_pass(5, f"10,000 attempt sequences, zero gate violations in {elapsed:.1f}s")


# -- criterion 6: pass@k oracle ---------------------------------------------------


def test_criterion_6_pass_at_k_matches_prefix_enumeration():
    rng = random.Random(2718)
    for _ in range(500):
        rows = [
            [rng.random() < rng.choice([0.1, 0.4, 0.8]) for _ in range(10)]
            for _ in range(rng.randrange(1, 40))
        ]
        m = OutcomeMatrix(rows=rows)
        previous = 0.0
        for k in (1, 5, 10):
            expected_hits = 0
            for row in rows:
                hit = False
                for cell in row[:k]:
                    if cell:
                        hit = True
                if hit:
                    expected_hits += 1
            got = pass_at_k(m, k)
            assert got == expected_hits / len(rows)
            assert got >= previous  # monotone in k
            previous = got
    report_pass(6, "pass@k equals brute-force prefix enumeration on 500 matrices")


# -- criterion 7: end-to-end mock golden run --------------------------------------


def test_criterion_7_end_to_end_mock_golden_run(tmp_path):
    started = time.monotonic()
    work = stage_workspace(tmp_path, "golden_run")
    config = golden_config(work)
    engine = Engine(config, mock_only=True)
    summaries = {stage: engine.run_stage(stage) for stage in STAGES}

    # conservation at every stage
    for stage, s in summaries.items():
        assert s.input == s.retained + s.discarded, stage
        assert sum(s.discard_reasons.values()) == s.discarded, stage
    assert summaries["dedup"].input == summaries["synth"].retained
    assert summaries["verify"].input == summaries["dedup"].retained
    assert summaries["convert"].input == summaries["verify"].retained
    assert summaries["distill"].input == (
        summaries["verify"].retained + summaries["convert"].retained
    )

    produced = (work / "runs" / "golden" / "manifest.json").read_bytes()
    golden = (work / "manifest.golden.json").read_bytes()
    assert produced == golden, "manifest must be byte-identical to the committed golden"

    flow = (work / "runs" / "golden" / "reports" / "dataflow.json").read_bytes()
    assert flow == (work / "dataflow.golden.json").read_bytes()

    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"end-to-end run took {elapsed:.2f}s"
    report_pass(7, f"mock pipeline matches committed golden manifest in {elapsed:.1f}s")


# -- criterion 8: resumability ------------------------------------------------------


def test_criterion_8_killed_runs_resume_to_identical_outputs(tmp_path):
    baseline = stage_workspace(tmp_path, "baseline")
    run_all_stages(golden_config(baseline))

    rng = random.Random(8086)
    kill_points = sorted(rng.sample(range(4, 140), 3))
    interrupted = stage_workspace(tmp_path, "interrupted")
    remaining = list(kill_points)
    attempts = 0
    while True:
        attempts += 1
        hook = Killer(remaining.pop(0)) if remaining else None
        engine = Engine(golden_config(interrupted), mock_only=True, checkpoint_hook=hook)
        try:
            for stage in STAGES:
                engine.run_stage(stage)
        except AbortRun:
            continue
        break
    assert attempts == 4  # three kills happened, then one clean pass

    assert_identical_trees(
        baseline / "runs" / "golden", interrupted / "runs" / "golden"
    )
    golden = (interrupted / "manifest.golden.json").read_bytes()
    produced = (interrupted / "runs" / "golden" / "manifest.json").read_bytes()
    assert produced == golden
    report_pass(8, f"killed at journal commits {kill_points}, resumed byte-identically")


# -- criteria 9/10: the execution runner (secondary component) ----------------------

ADD_SOLUTION = '''def add(a, b):
    """
    Returns the sum of a and b.
    """
    return a + b
'''

ADD_TESTS = """from solution import add

def test_add_positive_numbers():
    assert add(2, 3) == 5

def test_add_with_zero():
    assert add(0, 5) == 5
    assert add(5, 0) == 5

def test_add_negative_numbers():
    assert add(-1, -1) == -2

def test_add_mixed_sign_numbers():
    assert add(-1, 3) == 2
"""

SIGN_SOLUTION = """def sign(x):
    if x >= 0:
        return 1
    return -1
"""

SIGN_ONE_TEST = """from solution import sign

def test_sign_positive():
    assert sign(5) == 1
"""


def real_runner() -> SubprocessRunner:
    if not RUNNER_MAIN.exists():
        pytest.skip("execution runner not built (run `npm run build` under runner/)")
    return SubprocessRunner(["node", str(RUNNER_MAIN)])


def _no_leaked_pytest_children() -> bool:
    import subprocess

    out = subprocess.run(
        ["ps", "-eo", "args"], capture_output=True, text=True
    ).stdout
    return not any(
        "runner-workspace" in line and "pytest" in line for line in out.splitlines()
    )


def test_criterion_9_runner_correctness():
    runner = real_runner()

    report = runner.run(RunRequest(solution_code=ADD_SOLUTION, test_code=ADD_TESTS))
    assert report.status == "passed"
    assert report.tests_collected == 4
    assert report.tests_passed == 4
    assert report.branch_coverage == 1.0  # zero branches, vacuously full

    report = runner.run(RunRequest(solution_code=SIGN_SOLUTION, test_code=SIGN_ONE_TEST))
    assert report.status == "passed"
    assert report.tests_collected == 1
    assert report.branch_coverage == 0.5  # one of two branch arms taken; exact

    failing = ADD_TESTS + "\n\ndef test_add_wrong():\n    assert add(2, 2) == 5\n"
    report = runner.run(RunRequest(solution_code=ADD_SOLUTION, test_code=failing))
    assert report.status == "failed"
    assert report.tests_failed == 1
    assert report.tests_passed == 4

    hang = "from solution import add\n\ndef test_hang():\n    while True:\n        pass\n"
    started = time.monotonic()
    report = runner.run(
        RunRequest(solution_code=ADD_SOLUTION, test_code=hang, timeout_s=2.0)
    )
    elapsed = time.monotonic() - started
    assert report.status == "timeout"
    # the runner's own wall clock honors timeout + grace <= 1 s exactly;
    # the outer elapsed additionally absorbs node startup
    assert report.duration_ms <= 3000
    assert elapsed < 2.0 + 1.0 + 2.0

    assert _no_leaked_pytest_children(), "runner must leave no processes alive"
    report_pass(9, "add=pass@1.0(4 tests), sign=0.5, fail, timeout; no leaks")


def test_criterion_10_protocol_conformance_stub_vs_real():
    runner = real_runner()
    from tripletforge.sandbox import StubRunner

    corpus_path = Path(__file__).parent / "fixtures" / "runner_corpus.json"
    corpus = json.loads(corpus_path.read_text(encoding="utf-8"))
    stub = StubRunner()
    for case in corpus:
        request = RunRequest(
            solution_code=case["solution"], test_code=case["tests"],
            timeout_s=case.get("timeout_s", 30.0),
        )
        stub_dict = stub.run(request).to_dict()
        real_dict = runner.run(request).to_dict()
        stub_dict.pop("duration_ms")
        real_dict.pop("duration_ms")
        assert stub_dict == real_dict, f"field-level diff on case {case['name']}"
    report_pass(10, f"stub and real runner agree on {len(corpus)} shared fixtures")


@pytest.mark.skip(
    reason="informative, non-gating: needs a live LLM backend; expected "
    "self-verification band 70-95% on the 90-question validation set"
)
def test_criterion_11_live_backend_validation_band():
    pass
