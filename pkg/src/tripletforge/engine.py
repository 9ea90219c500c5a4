"""Stage orchestration: resumable, idempotent pipeline runs.

Every stage walks a deterministic task plan, appends output records first
and then commits a journal line per task; on restart, journaled tasks are
skipped and record appends are id-idempotent, so an interrupted mock run
resumes to byte-identical outputs. Stage accounting is tallied from the
journal and written atomically into the run manifest; a completed stage is
a no-op on re-run.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from . import analytics, dedupe, posttrain, synthesis
from .config import RunConfig, STAGE_ROLE_REQUIREMENTS
from .gateway import (
    BackendUnavailable,
    Gateway,
    PermanentRequestError,
    SamplingParams,
)
from .mockgen import stable_int
from .records import (
    STAGE_UPSTREAMS,
    DedupStatus,
    Difficulty,
    GenerationProvenance,
    GenMethod,
    InvariantViolation,
    PipelineManifest,
    QuestionRecord,
    SftRecord,
    StageCount,
    SubsetTag,
    Triplet,
    canonical_dumps,
    question_id,
)
from .sandbox import Runner, StubRunner, SubprocessRunner
from .store import RunLock, RunStore
from .synthesis import ParseError, SeedItem, SnippetSource
from .verify import DeferredQuestion, VerifyConfig, verify_question

log = logging.getLogger(__name__)

STAGES = ("synth", "dedup", "verify", "convert", "distill", "analyze")

QUESTION_SAMPLING = SamplingParams(temperature=0.7, max_tokens=2048, n_samples=1)
LABEL_SAMPLING = SamplingParams(temperature=0.0, max_tokens=512, n_samples=1)

EMBED_BATCH = 64

SUBSET_METHOD = {
    SubsetTag.PREFILL: GenMethod.MAGPIE_PREFILL,
    SubsetTag.LEETCODE: GenMethod.SEED_ASSESSMENT,
    SubsetTag.CODEFORCES: GenMethod.SEED_ASSESSMENT,
    SubsetTag.APPS: GenMethod.SEED_ASSESSMENT,
    SubsetTag.TACO: GenMethod.SEED_ASSESSMENT,
    SubsetTag.CODE_CONTESTS: GenMethod.SEED_ASSESSMENT,
    SubsetTag.ALGORITHM: GenMethod.DSA_CONVERSION,
    SubsetTag.DATA_STRUCTURE: GenMethod.DSA_CONVERSION,
    SubsetTag.DOCS: GenMethod.DOCS_CONVERSION,
    SubsetTag.FILTER: GenMethod.HARVEST_FILTER,
    SubsetTag.PACKAGE: GenMethod.CORPUS_EXPANSION,
    SubsetTag.EVOL: GenMethod.CORPUS_EXPANSION,
}


class StageFailure(RuntimeError):
    exit_code = 1


class EngineConfigError(StageFailure):
    exit_code = 2


class DependencyError(StageFailure):
    exit_code = 3


class BackendExhaustion(StageFailure):
    exit_code = 4


class IntegrityError(StageFailure):
    exit_code = 5


@dataclass
class StageSummary:
    run_id: str
    stage: str
    status: str  # "completed" | "noop"
    input: int = 0
    retained: int = 0
    discarded: int = 0
    discard_reasons: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "stage": self.stage,
            "status": self.status,
            "input": self.input,
            "retained": self.retained,
            "discarded": self.discarded,
            "discard_reasons": dict(sorted(self.discard_reasons.items())),
        }


@dataclass(frozen=True)
class SynthTask:
    nonce: str
    subset: SubsetTag
    method: GenMethod
    prefix_choice: int = 0
    seeds: tuple[SeedItem, ...] = ()
    snippet: SnippetSource | None = None
    candidate: SeedItem | None = None


def _load_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        raise EngineConfigError(f"corpus file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_seed_corpus(path: Path) -> list[SeedItem]:
    items = [SeedItem(id=str(r["id"]), text=r["text"]) for r in _load_jsonl(path)]
    if not items:
        raise EngineConfigError(f"seed corpus is empty: {path}")
    if len({i.id for i in items}) != len(items):
        raise EngineConfigError(f"seed corpus has duplicate ids: {path}")
    return items


def load_snippets(path: Path, kind: str) -> list[tuple[str, SnippetSource]]:
    rows = _load_jsonl(path)
    return [
        (str(r["id"]), SnippetSource(kind=kind, content=r["content"], origin=r.get("origin", "")))
        for r in rows
    ]


class Engine:
    """Executes pipeline stages for one run under one process-level lock."""

    def __init__(
        self,
        config: RunConfig,
        mock_only: bool = False,
        checkpoint_hook: Callable[[], None] | None = None,
    ):
        self.config = config
        self.store = RunStore(config.runs_root_path, config.run_id)
        self._checkpoint = checkpoint_hook or (lambda: None)
        if mock_only:
            non_mock = [
                role
                for role, backend in config.backends.items()
                if backend.kind != "mock"
            ]
            if non_mock:
                raise EngineConfigError(
                    f"--mock run but non-mock backends configured: {', '.join(sorted(non_mock))}"
                )
        descriptors = {
            role: backend.descriptor(Path(config.base_dir) if config.base_dir else Path.cwd())
            for role, backend in config.backends.items()
        }
        transcripts = (
            self.store.transcripts_dir() / "gateway.jsonl" if config.transcripts else None
        )
        self.gateway = Gateway(descriptors, transcripts_path=transcripts)
        self.runner = self._build_runner()

    def _build_runner(self) -> Runner:
        if self.config.runner.kind == "stub":
            return StubRunner()
        command = [
            str(self.config.resolve(part)) if part.endswith((".js", ".py")) else part
            for part in self.config.runner.command
        ]
        return SubprocessRunner(command)

    # -- shared helpers -------------------------------------------------------

    def _now(self) -> str:
        if self.config.fixed_clock:
            return self.config.fixed_clock
        return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

    def _task_rng(self, *parts: str) -> random.Random:
        return random.Random(stable_int(str(self.config.rng_seed), *parts))

    def _journal_done(self, stage: str) -> dict[str, dict[str, Any]]:
        return {e["task"]: e for e in self.store.read_journal(stage)}

    def _tally(self, stage: str) -> tuple[StageCount, dict[str, int]]:
        entries = self.store.read_journal(stage)
        retained = sum(1 for e in entries if e["outcome"] == "retained")
        reasons = Counter(e["reason"] for e in entries if e["outcome"] == "discarded")
        counts = StageCount(
            input=len(entries), retained=retained, discarded=sum(reasons.values())
        )
        return counts, dict(reasons)

    def _questions_by_id(self, stage: str, shard: str = "records") -> dict[str, QuestionRecord]:
        return {q.id: q for q in self._load_or_empty(stage, shard)}

    def _load_or_empty(self, stage: str, shard: str = "records", where=None) -> list:
        """Stage records, or [] when the stage legitimately produced none."""
        if not self.store.has_shard(stage, shard):
            return []
        return list(self.store.load_stage(stage, shard, where=where))

    # -- public entry ----------------------------------------------------------

    def run_stage(self, stage: str, resume: bool = True) -> StageSummary:
        if stage not in STAGES:
            raise EngineConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
        missing_roles = self.config.require_roles(STAGE_ROLE_REQUIREMENTS[stage])
        if missing_roles:
            raise EngineConfigError(
                f"stage {stage} needs backend roles: {', '.join(missing_roles)}"
            )
        with RunLock(self.store.root):
            manifest = self.store.read_manifest()
            if stage in manifest.completed_stages:
                counts = manifest.stage_counts[stage]
                return StageSummary(
                    run_id=self.config.run_id,
                    stage=stage,
                    status="noop",
                    input=counts.input,
                    retained=counts.retained,
                    discarded=counts.discarded,
                    discard_reasons=dict(manifest.discard_reasons.get(stage, {})),
                )
            missing = [
                up
                for up in dict.fromkeys(self._required_upstreams(stage))
                if up not in manifest.completed_stages
            ]
            if missing:
                raise DependencyError(
                    f"stage {stage} requires completed upstream stages: {', '.join(missing)}"
                )
            if not resume:
                self._discard_partial_state(stage)
            try:
                runner = getattr(self, f"_stage_{stage}")
                runner()
            except BackendUnavailable as exc:
                raise BackendExhaustion(str(exc)) from exc
            except InvariantViolation as exc:
                raise IntegrityError(str(exc)) from exc
            return self._finalize(stage)

    @staticmethod
    def _required_upstreams(stage: str) -> tuple[str, ...]:
        return STAGE_UPSTREAMS[stage]

    def _discard_partial_state(self, stage: str) -> None:
        """--no-resume: redo an interrupted stage from scratch."""
        import shutil

        journal = self.store.journal_path(stage)
        if journal.exists():
            log.info("discarding partial %s state for a fresh rerun", stage)
            journal.unlink()
        stage_dir = self.store.stage_dir(stage)
        if stage_dir.exists():
            shutil.rmtree(stage_dir)

    def _finalize(self, stage: str) -> StageSummary:
        counts, reasons = self._tally(stage)
        manifest = self.store.read_manifest()
        if not manifest.config_snapshot:
            manifest.config_snapshot = self.config.snapshot()
        manifest.record(stage, counts, reasons)
        try:
            manifest.validate()
        except InvariantViolation as exc:
            raise IntegrityError(str(exc)) from exc
        self.store.write_manifest(manifest)
        return StageSummary(
            run_id=self.config.run_id,
            stage=stage,
            status="completed",
            input=counts.input,
            retained=counts.retained,
            discarded=counts.discarded,
            discard_reasons=reasons,
        )

    # -- synth ------------------------------------------------------------------

    def _plan_synth(self) -> list[SynthTask]:
        tasks: list[SynthTask] = []
        for subset in self.config.enabled_subsets():
            cfg = self.config.subsets[subset.value]
            method = SUBSET_METHOD[subset]
            if method is GenMethod.MAGPIE_PREFILL:
                for i in range(cfg.count or 0):
                    rng = self._task_rng("plan", subset.value, str(i))
                    tasks.append(
                        SynthTask(
                            nonce=f"{subset.value}:{i:05d}",
                            subset=subset,
                            method=method,
                            prefix_choice=rng.randrange(1, 4),
                        )
                    )
            elif method in (GenMethod.SEED_ASSESSMENT, GenMethod.CORPUS_EXPANSION):
                corpus = load_seed_corpus(self.config.resolve(cfg.corpus))
                count = cfg.count or len(corpus)
                for i in range(count):
                    rng = self._task_rng("plan", subset.value, str(i))
                    seeds = tuple(rng.sample(corpus, 3))
                    tasks.append(
                        SynthTask(
                            nonce=f"{subset.value}:{i:05d}",
                            subset=subset,
                            method=method,
                            seeds=seeds,
                        )
                    )
            elif method is GenMethod.DSA_CONVERSION:
                snippets = load_snippets(self.config.resolve(cfg.corpus), "dsa_snippet")
                if cfg.count:
                    snippets = snippets[: cfg.count]
                for sid, snippet in snippets:
                    tasks.append(
                        SynthTask(
                            nonce=f"{subset.value}:{sid}",
                            subset=subset,
                            method=method,
                            snippet=snippet,
                            candidate=SeedItem(id=sid, text=""),
                        )
                    )
            elif method is GenMethod.DOCS_CONVERSION:
                pages = load_snippets(self.config.resolve(cfg.corpus), "doc_page")
                if cfg.count:
                    pages = pages[: cfg.count]
                for pid, page in pages:
                    tasks.append(
                        SynthTask(
                            nonce=f"{subset.value}:{pid}",
                            subset=subset,
                            method=method,
                            snippet=page,
                            candidate=SeedItem(id=pid, text=""),
                        )
                    )
            elif method is GenMethod.HARVEST_FILTER:
                candidates = load_seed_corpus(self.config.resolve(cfg.corpus))
                if cfg.count:
                    candidates = candidates[: cfg.count]
                for candidate in candidates:
                    tasks.append(
                        SynthTask(
                            nonce=f"{subset.value}:{candidate.id}",
                            subset=subset,
                            method=method,
                            candidate=candidate,
                        )
                    )
        return tasks

    def _question_role(self, task: SynthTask) -> str:
        if task.method is GenMethod.MAGPIE_PREFILL and "prefill_gen" in self.config.backends:
            return "prefill_gen"
        return "question_gen"

    def _synth_task(self, task: SynthTask) -> tuple[QuestionRecord | None, str]:
        """Returns (record, reason); reason set when the task yields no record."""
        role = self._question_role(task)
        model_id = self.gateway.descriptor(role).model_id
        try:
            if task.method is GenMethod.MAGPIE_PREFILL:
                prompt = synthesis.build_prefill_prompt(task.prefix_choice, QUESTION_SAMPLING)
                raw = self.gateway.complete(role, prompt, nonce=task.nonce)[0].text
                text = synthesis.parse_prefill_completion(
                    raw, prefix=synthesis.PREFILL_PREFIXES[task.prefix_choice]
                )
                seed_ids: tuple[str, ...] = ()
            elif task.method in (GenMethod.SEED_ASSESSMENT, GenMethod.CORPUS_EXPANSION):
                prompt = synthesis.build_assessment_prompt(list(task.seeds), QUESTION_SAMPLING)
                raw = self.gateway.complete(role, prompt, nonce=task.nonce)[0].text
                text = synthesis.parse_assessment_question(raw)
                seed_ids = tuple(s.id for s in task.seeds)
            elif task.method is GenMethod.DSA_CONVERSION:
                prompt = synthesis.build_dsa_prompt(task.snippet, QUESTION_SAMPLING)
                raw = self.gateway.complete(role, prompt, nonce=task.nonce)[0].text
                parsed = synthesis.parse_generated_question(raw)
                if parsed is None:
                    return None, "abstained"
                text = parsed
                seed_ids = (task.candidate.id,)
            elif task.method is GenMethod.DOCS_CONVERSION:
                prompt = synthesis.build_docs_prompt(task.snippet, QUESTION_SAMPLING)
                raw = self.gateway.complete(role, prompt, nonce=task.nonce)[0].text
                parsed = synthesis.parse_generated_question(raw)
                if parsed is None:
                    return None, "abstained"
                text = parsed
                seed_ids = (task.candidate.id,)
            elif task.method is GenMethod.HARVEST_FILTER:
                return self._harvest_task(task)
            else:  # pragma: no cover - plan never emits other methods
                raise EngineConfigError(f"unplannable method {task.method}")
            text = synthesis.enforce_question_bounds(text)
        except ParseError as exc:
            return None, exc.reason
        except PermanentRequestError:
            return None, "deferred_backend_error"

        provenance = GenerationProvenance(
            method=task.method,
            seed_ids=seed_ids,
            model_id=model_id,
            prompt_hash=prompt.prompt_hash,
        )
        record = QuestionRecord(
            id=question_id(task.subset, prompt.prompt_hash, task.nonce),
            subset=task.subset,
            text=text,
            provenance=provenance,
            created_at=self._now(),
        )
        return record, ""

    def _harvest_task(self, task: SynthTask) -> tuple[QuestionRecord | None, str]:
        question = task.candidate.text
        quality_prompt = synthesis.build_quality_prompt(question, LABEL_SAMPLING)
        category_prompt = synthesis.build_category_prompt(question, LABEL_SAMPLING)
        try:
            quality_raw = self.gateway.complete(
                "question_gen", quality_prompt, nonce=f"{task.nonce}:quality"
            )[0].text
            category_raw = self.gateway.complete(
                "question_gen", category_prompt, nonce=f"{task.nonce}:category"
            )[0].text
            quality = synthesis.parse_quality_label(quality_raw)
            primary, others = synthesis.parse_category_label(category_raw)
        except ParseError as exc:
            return None, exc.reason
        except InvariantViolation:
            return None, "label_error"
        except PermanentRequestError:
            return None, "deferred_backend_error"
        label = synthesis.HarvestLabel(quality=quality, primary_tag=primary, other_tags=others)
        if not synthesis.harvest_filter(label):
            if label.quality.value.replace("_", " ") not in synthesis.KEEP_QUALITIES:
                return None, "low_quality"
            return None, "category_filtered"
        try:
            text = synthesis.enforce_question_bounds(question)
        except ParseError as exc:
            return None, exc.reason
        provenance = GenerationProvenance(
            method=GenMethod.HARVEST_FILTER,
            seed_ids=(task.candidate.id,),
            model_id=self.gateway.descriptor("question_gen").model_id,
            prompt_hash=quality_prompt.prompt_hash,
        )
        record = QuestionRecord(
            id=question_id(task.subset, quality_prompt.prompt_hash, task.nonce),
            subset=task.subset,
            text=text,
            provenance=provenance,
            created_at=self._now(),
        )
        return record, ""

    def _stage_synth(self) -> None:
        plan = self._plan_synth()
        if not plan:
            raise EngineConfigError("no subsets enabled; nothing to synthesize")
        done = self._journal_done("synth")
        with self.store.writer("synth") as writer, self.store.journal_writer("synth") as journal:
            pending = [t for t in plan if t.nonce not in done]
            for task, (record, reason) in self._map(self._synth_task, pending):
                if record is not None:
                    writer.append(record, if_absent=True)
                    journal.append_raw(
                        {"task": task.nonce, "outcome": "retained", "reason": "",
                         "record_id": record.id}
                    )
                else:
                    journal.append_raw(
                        {"task": task.nonce, "outcome": "discarded", "reason": reason,
                         "record_id": None}
                    )
                self._checkpoint()

    def _map(self, fn: Callable[[Any], Any], items: list[Any]) -> Iterable[tuple[Any, Any]]:
        """Ordered map over tasks, optionally fanned out to a worker pool."""
        if self.config.workers <= 1 or len(items) <= 1:
            for item in items:
                yield item, fn(item)
            return
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            yield from zip(items, pool.map(fn, items))

    # -- dedup -------------------------------------------------------------------

    def _stage_dedup(self) -> None:
        questions = self._load_or_empty("synth")
        by_subset: dict[str, list[QuestionRecord]] = {}
        for q in questions:
            by_subset.setdefault(q.subset.value, []).append(q)

        vectors: dict[str, tuple[str, int, list[float]]] = {}
        for subset, members in by_subset.items():
            ids, matrix = self._subset_vectors(subset, members)
            for row, (qid, vec) in enumerate(zip(ids, matrix)):
                vectors[qid] = (subset, row, list(vec))

        dedup_config = dedupe.DedupConfig(
            threshold=self.config.dedup.threshold, scope=self.config.dedup.scope
        )
        done = self._journal_done("dedup")
        preloaded: dict[str, dedupe.VectorIndex] = {}
        if done and self.store.has_shard("dedup"):
            for record in self.store.load_stage("dedup"):
                if record.dedup_status is not DedupStatus.RETAINED:
                    continue
                key = (
                    record.subset.value
                    if dedup_config.scope == "within_subset"
                    else "__global__"
                )
                _, _, vec = vectors[record.id]
                index = preloaded.setdefault(key, dedupe.VectorIndex(dimension=len(vec)))
                index.add(record.id, vec)

        pending = [q for q in questions if q.id not in done]
        entries = (
            (q.id, vectors[q.id][0], vectors[q.id][2]) for q in pending
        )
        decisions = dedupe.dedup_scan(entries, dedup_config, preloaded=preloaded)
        with self.store.writer("dedup") as writer, self.store.journal_writer("dedup") as journal:
            for q, decision in zip(pending, decisions):
                subset, row, _ = vectors[q.id]
                q.embedding_ref = f"{subset}.vec#{row}"
                if decision.retained:
                    q.dedup_status = DedupStatus.RETAINED
                    q.duplicate_of = None
                    outcome, reason = "retained", ""
                else:
                    q.dedup_status = DedupStatus.DROPPED_DUPLICATE
                    q.duplicate_of = decision.duplicate_of
                    outcome, reason = "discarded", "duplicate"
                writer.append(q, if_absent=True)
                journal.append_raw(
                    {"task": q.id, "outcome": outcome, "reason": reason,
                     "record_id": q.id, "duplicate_of": q.duplicate_of}
                )
                self._checkpoint()

    def _subset_vectors(self, subset: str, members: list[QuestionRecord]) -> tuple[list[str], np.ndarray]:
        """Embed one subset's questions, cached at embeddings/<subset>.vec."""
        cache = self.store.embeddings_dir() / f"{subset}.vec"
        if cache.exists():
            ids, matrix = dedupe.read_vectors(cache)
            if ids == [q.id for q in members]:
                # f32 storage rounds unit norms; restore them exactly
                matrix = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
                return ids, matrix
        texts = [q.text for q in members]
        rows: list[list[float]] = []
        for i in range(0, len(texts), EMBED_BATCH):
            rows.extend(self.gateway.embed("embedder", texts[i: i + EMBED_BATCH]))
        matrix = np.asarray(rows, dtype=np.float64)
        ids = [q.id for q in members]
        dedupe.write_vectors(cache, ids, matrix)
        return ids, matrix

    # -- verify --------------------------------------------------------------------

    def _verify_config(self) -> VerifyConfig:
        v = self.config.verify
        return VerifyConfig(
            n_attempts=v.n_attempts,
            timeout_s=v.timeout_s,
            memory_mb=v.memory_mb,
            require_full_coverage=v.require_full_coverage,
            run_all_attempts=v.run_all_attempts,
        )

    def _stage_verify(self) -> None:
        verify_config = self._verify_config()
        retained = self._load_or_empty(
            "dedup", where=lambda q: q.dedup_status is DedupStatus.RETAINED
        )
        done = self._journal_done("verify")
        pending = [q for q in retained if q.id not in done]

        def process(q: QuestionRecord) -> tuple[Triplet | None, str]:
            try:
                triplet = verify_question(q, self.gateway, self.runner, verify_config)
            except DeferredQuestion:
                return None, "deferred_backend_error"
            if triplet.retained:
                return triplet, ""
            if triplet.difficulty is Difficulty.FAIL:
                return triplet, "verification_failed"
            return triplet, "incomplete_coverage"

        with self.store.writer("verify") as writer, self.store.journal_writer("verify") as journal:
            for q, (triplet, reason) in self._map(process, pending):
                if triplet is not None:
                    writer.append(triplet, if_absent=True)
                outcome = "retained" if triplet is not None and triplet.retained else "discarded"
                journal.append_raw(
                    {"task": q.id, "outcome": outcome, "reason": reason,
                     "record_id": triplet.id if triplet else None}
                )
                self._checkpoint()

    # -- convert --------------------------------------------------------------------

    def _stage_convert(self) -> None:
        questions = self._questions_by_id("dedup")
        triplets = self._load_or_empty("verify", where=lambda t: t.retained)
        done = self._journal_done("convert")
        pending = [t for t in triplets if t.id not in done]
        model_id = self.gateway.descriptor("converter").model_id

        def process(triplet: Triplet) -> tuple[tuple[QuestionRecord, Triplet] | None, str]:
            question = questions[triplet.question_id]
            prompt = posttrain.build_style_prompt(triplet, question.text, QUESTION_SAMPLING)
            try:
                raw = self.gateway.complete(
                    "converter", prompt, nonce=f"{triplet.id}:convert"
                )[0].text
                completion_text = posttrain.parse_completion_task(raw, triplet.solution_source)
            except posttrain.LeakageError:
                return None, "solution_leakage"
            except ParseError as exc:
                return None, exc.reason
            except PermanentRequestError:
                return None, "deferred_backend_error"
            new_question = posttrain.make_converted_question(
                question, completion_text, prompt.prompt_hash, model_id, self._now()
            )
            twin = posttrain.make_converted_triplet(triplet, new_question)
            return (new_question, twin), ""

        with self.store.writer("convert", "questions") as qwriter, \
                self.store.writer("convert") as twriter, \
                self.store.journal_writer("convert") as journal:
            for triplet, (result, reason) in self._map(process, pending):
                if result is not None:
                    new_question, twin = result
                    qwriter.append(new_question, if_absent=True)
                    twriter.append(twin, if_absent=True)
                    journal.append_raw(
                        {"task": triplet.id, "outcome": "retained", "reason": "",
                         "record_id": twin.id}
                    )
                else:
                    journal.append_raw(
                        {"task": triplet.id, "outcome": "discarded", "reason": reason,
                         "record_id": None}
                    )
                self._checkpoint()

    # -- distill --------------------------------------------------------------------

    def _final_triplets(self) -> list[tuple[Triplet, str]]:
        """Retained triplets (originals then converted) with their question texts."""
        questions = self._questions_by_id("dedup")
        out: list[tuple[Triplet, str]] = []
        for t in self._load_or_empty("verify", where=lambda t: t.retained):
            out.append((t, questions[t.question_id].text))
        converted_questions = self._questions_by_id("convert", "questions")
        for t in self._load_or_empty("convert"):
            out.append((t, converted_questions[t.question_id].text))
        return out

    def _stage_distill(self) -> None:
        sft_config = posttrain.SftFilterConfig(
            min_tokens=self.config.sft.min_tokens,
            max_tokens=self.config.sft.max_tokens,
            reject_class_solutions=self.config.sft.reject_class_solutions,
            samples_per_question=self.config.sft.samples_per_question,
        )
        inputs = self._final_triplets()
        done = self._journal_done("distill")
        pending = [(t, text) for t, text in inputs if t.id not in done]

        def process(item: tuple[Triplet, str]) -> tuple[list[SftRecord], dict[str, int] | None]:
            triplet, question_text = item
            try:
                records, stats = posttrain.distill_cot(
                    triplet, question_text, self.gateway, self.runner, sft_config
                )
            except PermanentRequestError:
                return [], None
            return records, stats.__dict__

        with self.store.writer("distill") as writer, self.store.journal_writer("distill") as journal:
            for (triplet, _), (records, stats) in self._map(process, pending):
                for record in records:
                    writer.append(record, if_absent=True)
                if stats is None:
                    outcome, reason, stats = "discarded", "deferred_backend_error", {}
                elif records:
                    outcome, reason = "retained", ""
                elif stats["accepted"] == 0 and (
                    stats["too_short"] or stats["too_long"] or stats["class_based"]
                ):
                    outcome, reason = "discarded", "all_filtered"
                else:
                    outcome, reason = "discarded", "all_rejected"
                journal.append_raw(
                    {"task": triplet.id, "outcome": outcome, "reason": reason,
                     "record_id": None, "samples": stats}
                )
                self._checkpoint()
        self._export_sft()

    def _export_sft(self) -> None:
        path = self.store.exports_dir() / "sft.jsonl"
        tmp = path.with_suffix(".jsonl.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for record in self._load_or_empty("distill"):
                f.write(canonical_dumps(posttrain.sft_conversation(record)) + "\n")
        tmp.replace(path)

    # -- analyze --------------------------------------------------------------------

    def _stage_analyze(self) -> None:
        reports = self.store.reports_dir()
        verify_triplets = self._load_or_empty("verify")
        questions = self._questions_by_id("dedup")
        final = self._final_triplets()

        # analyze filters nothing; journal one retained entry per final triplet
        # so the manifest's conservation law covers this stage too
        done = self._journal_done("analyze")
        with self.store.journal_writer("analyze") as journal:
            for t, _ in final:
                if t.id in done:
                    continue
                journal.append_raw(
                    {"task": t.id, "outcome": "retained", "reason": "", "record_id": t.id}
                )
                self._checkpoint()

        n = self.config.verify.n_attempts
        full_rows = [t for t in verify_triplets if len(t.attempts) == n]
        matrix = analytics.OutcomeMatrix(
            rows=[[a.passed for a in t.attempts] for t in full_rows]
        )
        by_subset_rows: dict[str, list[list[bool]]] = {}
        for t in full_rows:
            subset = questions[t.question_id].subset.value
            by_subset_rows.setdefault(subset, []).append([a.passed for a in t.attempts])
        ks = sorted({1, 5, n} | set(range(1, n + 1)))
        pass_report: dict[str, Any] = {
            "n_attempts": n,
            "questions": len(matrix.rows),
            "overall": {
                "prefix": {str(k): analytics.pass_at_k(matrix, k) for k in ks},
                "estimator": {
                    str(k): analytics.pass_at_k(matrix, k, mode="estimator") for k in ks
                },
            },
            "per_subset": {
                subset: {
                    str(k): analytics.pass_at_k(analytics.OutcomeMatrix(rows), k)
                    for k in ks
                }
                for subset, rows in sorted(by_subset_rows.items())
            },
        }
        self._write_report(reports / "pass_at_k.json", pass_report)

        labeled = [
            (questions[t.question_id].subset.value, t.difficulty.value)
            for t in verify_triplets
        ]
        self._write_report(
            reports / "difficulty.json", analytics.difficulty_histogram(labeled)
        )

        test_counts = [analytics.test_count(t.test_source) for t, _ in final]
        self._write_report(
            reports / "test_stats.json",
            {
                "triplets": len(final),
                "mean_tests": (sum(test_counts) / len(test_counts)) if test_counts else 0.0,
                "histogram": dict(sorted(Counter(test_counts).items())),
            },
        )

        token_report = {
            "questions": analytics.token_length_stats(
                [posttrain.approx_token_len(text) for _, text in final]
            ),
            "solutions": analytics.token_length_stats(
                [posttrain.approx_token_len(t.solution_source) for t, _ in final]
            ),
        }
        self._write_report(reports / "token_stats.json", token_report)

        distill_samples = Counter()
        for entry in self.store.read_journal("distill"):
            for key, value in entry.get("samples", {}).items():
                distill_samples[key] += value
        self._write_report(
            reports / "distill_samples.json", dict(sorted(distill_samples.items()))
        )

        manifest = self.store.read_manifest()
        flow = analytics.dataflow_report(manifest)
        self._write_report(reports / "dataflow.json", flow.to_dict())

        if self.config.contamination.benchmarks:
            self._contamination_report(final)

        self._export_rl(final)
        self._write_summary(reports, manifest, pass_report)

    def _contamination_report(self, final: list[tuple[Triplet, str]]) -> None:
        cached: dict[str, list[float]] = {}
        for vec_path in sorted(self.store.embeddings_dir().glob("*.vec")):
            ids, matrix = dedupe.read_vectors(vec_path)
            for qid, row in zip(ids, matrix):
                cached[qid] = list(row)
        records: list[tuple[str, list[float]]] = []
        to_embed: list[tuple[str, str]] = []
        for t, text in final:
            vec = cached.get(t.question_id)
            if vec is not None:
                unit = np.asarray(vec) / np.linalg.norm(vec)
                records.append((t.question_id, list(unit)))
            else:
                to_embed.append((t.question_id, text))
        for i in range(0, len(to_embed), EMBED_BATCH):
            chunk = to_embed[i: i + EMBED_BATCH]
            vecs = self.gateway.embed("embedder", [text for _, text in chunk])
            records.extend((qid, vec) for (qid, _), vec in zip(chunk, vecs))

        benchmarks: dict[str, list[tuple[str, list[float]]]] = {}
        for name, path in sorted(self.config.contamination.benchmarks.items()):
            rows = _load_jsonl(self.config.resolve(path))
            entries: list[tuple[str, list[float]]] = []
            for i in range(0, len(rows), EMBED_BATCH):
                chunk = rows[i: i + EMBED_BATCH]
                vecs = self.gateway.embed("embedder", [r["text"] for r in chunk])
                entries.extend((str(r["id"]), vec) for r, vec in zip(chunk, vecs))
            benchmarks[name] = entries

        report = dedupe.contamination_report(
            records, benchmarks, threshold=self.config.contamination.threshold
        )
        self._write_report(
            self.store.reports_dir() / "contamination.json", report.to_dict()
        )
        flagged_path = self.store.reports_dir() / "contamination_flagged.jsonl"
        tmp = flagged_path.with_suffix(".jsonl.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for name, section in sorted(report.per_benchmark.items()):
                for pair in section.flagged:
                    f.write(
                        canonical_dumps(
                            {
                                "benchmark": name,
                                "record_id": pair.record_id,
                                "benchmark_id": pair.benchmark_id,
                                "similarity": pair.similarity,
                            }
                        )
                        + "\n"
                    )
        tmp.replace(flagged_path)

    def _export_rl(self, final: list[tuple[Triplet, str]]) -> None:
        records = [posttrain.rl_record(text, t) for t, text in final]
        train, val = posttrain.split_rl_dataset(
            records, self.config.rng_seed, self.config.rl_validation_fraction
        )
        for name, rows in (("rl_train.jsonl", train), ("rl_val.jsonl", val)):
            path = self.store.exports_dir() / name
            tmp = path.with_suffix(".jsonl.tmp")
            with open(tmp, "w", encoding="utf-8") as f:
                for row in rows:
                    f.write(canonical_dumps(row) + "\n")
            tmp.replace(path)

    def _write_report(self, path: Path, payload: Any) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(canonical_dumps(payload) + "\n", encoding="utf-8")
        tmp.replace(path)

    def _write_summary(self, reports: Path, manifest: PipelineManifest,
                       pass_report: dict[str, Any]) -> None:
        lines = [f"run {self.config.run_id}", ""]
        lines.append("stage counts (input -> retained / discarded):")
        for stage in STAGES:
            counts = manifest.stage_counts.get(stage)
            if counts is None:
                continue
            reasons = manifest.discard_reasons.get(stage, {})
            reason_text = (
                " [" + ", ".join(f"{k}={v}" for k, v in sorted(reasons.items())) + "]"
                if reasons
                else ""
            )
            lines.append(
                f"  {stage:8s} {counts.input:5d} -> {counts.retained:5d} / {counts.discarded:5d}{reason_text}"
            )
        lines.append("")
        overall = pass_report["overall"]["prefix"]
        shown = ", ".join(f"pass@{k}={overall[str(k)]:.3f}" for k in (1, 5, pass_report["n_attempts"]))
        lines.append(f"self-verification over {pass_report['questions']} questions: {shown}")
        (reports / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
