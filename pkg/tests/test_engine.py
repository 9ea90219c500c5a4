from __future__ import annotations

import json
import random

import pytest

from tripletforge.engine import (
    DependencyError,
    Engine,
    EngineConfigError,
    STAGES,
)
from tripletforge.records import DedupStatus, GenMethod, QuestionStyle
from tripletforge.store import RunStore

from .pipeline_utils import (
    assert_identical_trees,
    golden_config,
    run_all_stages,
    snapshot_tree,
    stage_workspace,
)


class AbortRun(BaseException):
    """Simulated hard kill at a journal commit boundary."""


class Killer:
    def __init__(self, after: int):
        self.after = after
        self.count = 0

    def __call__(self) -> None:
        self.count += 1
        if self.count >= self.after:
            raise AbortRun


@pytest.fixture
def workspace(tmp_path):
    return stage_workspace(tmp_path)


class TestPipelineRun:
    def test_stage_summaries_and_conservation(self, workspace):
        config = golden_config(workspace)
        engine = Engine(config, mock_only=True)
        summaries = {stage: engine.run_stage(stage) for stage in STAGES}
        assert summaries["synth"].input == 61
        for stage in STAGES:
            s = summaries[stage]
            assert s.input == s.retained + s.discarded
            assert sum(s.discard_reasons.values()) == s.discarded
        assert summaries["dedup"].input == summaries["synth"].retained
        assert summaries["verify"].input == summaries["dedup"].retained
        assert summaries["convert"].input == summaries["verify"].retained
        assert summaries["distill"].input == (
            summaries["verify"].retained + summaries["convert"].retained
        )

    def test_converted_questions_carry_conversion_provenance(self, workspace):
        config = golden_config(workspace)
        run_all_stages(config)
        store = RunStore(config.runs_root_path, config.run_id)
        for q in store.load_stage("convert", "questions"):
            assert q.provenance.method is GenMethod.STYLE_CONVERSION
        for t in store.load_stage("convert"):
            assert t.style is QuestionStyle.COMPLETION

    def test_exports_round_trip_through_the_record_loader(self, workspace):
        from tripletforge.records import canonical_dumps
        from tripletforge.store import iter_shard

        config = golden_config(workspace)
        run_all_stages(config)
        exports = config.runs_root_path / "golden" / "exports"
        for name in ("rl_train.jsonl", "rl_val.jsonl", "sft.jsonl"):
            path = exports / name
            raw_lines = path.read_text(encoding="utf-8").splitlines()
            reloaded = [canonical_dumps(row) for row in iter_shard(path)]
            assert reloaded == raw_lines, name
        # RL records never contain solution text
        store = RunStore(config.runs_root_path, config.run_id)
        solutions = [t.solution_source for t in store.load_stage("verify") if t.retained]
        rl_text = (exports / "rl_train.jsonl").read_text(encoding="utf-8")
        for solution in solutions:
            assert canonical_dumps(solution)[1:-1] not in rl_text

    def test_dropped_duplicates_point_at_retained_records(self, workspace):
        config = golden_config(workspace)
        engine = Engine(config, mock_only=True)
        engine.run_stage("synth")
        engine.run_stage("dedup")
        store = RunStore(config.runs_root_path, config.run_id)
        records = {q.id: q for q in store.load_stage("dedup")}
        dropped = [q for q in records.values() if q.dedup_status is DedupStatus.DROPPED_DUPLICATE]
        assert dropped, "golden fixture must exercise duplicates"
        for q in dropped:
            assert q.duplicate_of in records
            assert records[q.duplicate_of].dedup_status is DedupStatus.RETAINED

    def test_rerunning_a_completed_stage_is_a_noop(self, workspace):
        config = golden_config(workspace)
        engine = Engine(config, mock_only=True)
        first = engine.run_stage("synth")
        manifest_bytes = (config.runs_root_path / "golden" / "manifest.json").read_bytes()
        again = engine.run_stage("synth")
        assert again.status == "noop"
        assert again.retained == first.retained
        assert (config.runs_root_path / "golden" / "manifest.json").read_bytes() == manifest_bytes

    def test_stage_before_upstream_is_dependency_error(self, workspace):
        config = golden_config(workspace)
        engine = Engine(config, mock_only=True)
        with pytest.raises(DependencyError, match="dedup"):
            engine.run_stage("verify")

    def test_unknown_stage_is_config_error(self, workspace):
        engine = Engine(golden_config(workspace), mock_only=True)
        with pytest.raises(EngineConfigError, match="unknown stage"):
            engine.run_stage("launch")

    def test_mock_only_rejects_live_backends(self, workspace):
        config = golden_config(workspace)
        config.backends["solution_gen"].kind = "chat"
        config.backends["solution_gen"].endpoint = "https://live.example"
        with pytest.raises(EngineConfigError, match="non-mock"):
            Engine(config, mock_only=True)

    def test_missing_backend_role_reported_before_work(self, workspace):
        config = golden_config(workspace)
        del config.backends["solution_gen"]
        engine = Engine(config, mock_only=True)
        engine.run_stage("synth")
        engine.run_stage("dedup")
        with pytest.raises(EngineConfigError, match="solution_gen"):
            engine.run_stage("verify")


class TestDeterminism:
    def test_two_fresh_runs_are_byte_identical(self, tmp_path):
        work_a = stage_workspace(tmp_path, "a")
        work_b = stage_workspace(tmp_path, "b")
        run_all_stages(golden_config(work_a))
        run_all_stages(golden_config(work_b))
        assert_identical_trees(work_a / "runs" / "golden", work_b / "runs" / "golden")

    def test_manifest_matches_committed_golden(self, workspace):
        config = golden_config(workspace)
        run_all_stages(config)
        produced = (config.runs_root_path / "golden" / "manifest.json").read_bytes()
        golden = (workspace / "manifest.golden.json").read_bytes()
        assert produced == golden


class TestResumability:
    def _run_with_kills(self, workspace, kill_points: list[int]) -> None:
        """Drive all stages to completion, crashing at each scheduled journal commit."""
        kills = list(kill_points)
        while True:
            config = golden_config(workspace)
            hook = Killer(kills.pop(0)) if kills else None
            engine = Engine(config, mock_only=True, checkpoint_hook=hook)
            try:
                for stage in STAGES:
                    engine.run_stage(stage)
            except AbortRun:
                continue
            break

    def test_killed_and_resumed_run_matches_uninterrupted(self, tmp_path):
        baseline = stage_workspace(tmp_path, "baseline")
        run_all_stages(golden_config(baseline))

        rng = random.Random(99)
        kill_points = sorted(rng.sample(range(5, 150), 3))
        interrupted = stage_workspace(tmp_path, "interrupted")
        self._run_with_kills(interrupted, kill_points)

        assert_identical_trees(
            baseline / "runs" / "golden", interrupted / "runs" / "golden"
        )

    def test_no_resume_redoes_partial_stage_from_scratch(self, workspace):
        config = golden_config(workspace)
        engine = Engine(config, mock_only=True, checkpoint_hook=Killer(7))
        with pytest.raises(AbortRun):
            engine.run_stage("synth")
        store = RunStore(config.runs_root_path, config.run_id)
        assert len(store.read_journal("synth")) == 7
        fresh = Engine(config, mock_only=True)
        summary = fresh.run_stage("synth", resume=False)
        assert summary.status == "completed"
        assert summary.input == 61
        # a fresh redo is byte-identical to a resumed one under the mock
        assert len(store.read_journal("synth")) == 61

    def test_journal_survives_partial_stage(self, workspace):
        config = golden_config(workspace)
        engine = Engine(config, mock_only=True, checkpoint_hook=Killer(10))
        with pytest.raises(AbortRun):
            engine.run_stage("synth")
        store = RunStore(config.runs_root_path, config.run_id)
        journal = store.read_journal("synth")
        assert len(journal) == 10
        manifest = store.read_manifest()
        assert "synth" not in manifest.completed_stages
        # resume completes the stage with the journal tail intact
        resumed = Engine(config, mock_only=True)
        summary = resumed.run_stage("synth")
        assert summary.status == "completed"
        assert summary.input == 61


class TestSubprocessRunnerPlumbing:
    def test_verify_stage_through_subprocess_stub(self, tmp_path):
        # the same protocol path the real runner uses, served by the stub process
        import sys

        import yaml

        ws = tmp_path / "ws"
        ws.mkdir()
        (ws / "mock_fixtures.json").write_text("{}")
        config_data = {
            "run_id": "subproc",
            "runs_root": "runs",
            "rng_seed": 3,
            "fixed_clock": "2024-03-02T00:00:00Z",
            "backends": {
                "question_gen": {"kind": "mock", "model_id": "m", "fixtures": "mock_fixtures.json"},
                "solution_gen": {"kind": "mock", "model_id": "m", "fixtures": "mock_fixtures.json"},
                "embedder": {"kind": "mock", "model_id": "m", "fixtures": "mock_fixtures.json"},
            },
            "subsets": {"prefill": {"enabled": True, "count": 3}},
            "verify": {"n_attempts": 2},
            "runner": {"kind": "subprocess",
                       "command": [sys.executable, "-m", "tripletforge.sandbox"]},
        }
        (ws / "pipeline.yaml").write_text(yaml.safe_dump(config_data))
        from tripletforge.config import load_config

        config = load_config(ws / "pipeline.yaml")
        engine = Engine(config, mock_only=True)
        engine.run_stage("synth")
        engine.run_stage("dedup")
        summary = engine.run_stage("verify")
        assert summary.status == "completed"
        store = RunStore(config.runs_root_path, "subproc")
        assert list(store.load_stage("verify"))


class TestGlobalDedupScope:
    def test_global_scope_catches_cross_subset_duplicates(self, workspace):
        config = golden_config(workspace)
        config.dedup.scope = "global"
        engine = Engine(config, mock_only=True)
        engine.run_stage("synth")
        global_summary = engine.run_stage("dedup")
        # within-subset drops are a lower bound for global-scope drops
        assert global_summary.discarded >= 9


class TestWorkerPool:
    def test_parallel_verify_matches_serial(self, tmp_path):
        serial_ws = stage_workspace(tmp_path, "serial")
        parallel_ws = stage_workspace(tmp_path, "parallel")
        serial = golden_config(serial_ws)
        parallel = golden_config(parallel_ws)
        parallel.workers = 4
        run_all_stages(serial)
        run_all_stages(parallel)
        a = snapshot_tree(serial_ws / "runs" / "golden")
        b = snapshot_tree(parallel_ws / "runs" / "golden")
        # worker count is runtime topology, not content: it may not leak into outputs
        assert {k: v for k, v in a.items() if k != "manifest.json"} == {
            k: v for k, v in b.items() if k != "manifest.json"
        }
        # manifests differ only in the workers knob of the config snapshot
        ma = json.loads(a["manifest.json"])
        mb = json.loads(b["manifest.json"])
        ma["config_snapshot"].pop("workers")
        mb["config_snapshot"].pop("workers")
        assert ma == mb
