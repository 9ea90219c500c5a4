"""Append-only record stores and the on-disk run layout.

Layout::

    runs/<run_id>/
        <stage>/<shard>.jsonl     one canonical-form record per line
        journal/<stage>.jsonl     per-task progress entries (resume state)
        embeddings/<subset>.vec   cached vectors (+ .ids sidecar)
        reports/                  analytics output
        exports/                  SFT / RL dataset exports
        manifest.json             per-stage accounting, written atomically

Single writer per stage store, any number of readers. A torn trailing
line (partial write from a killed process) is truncated when a store is
reopened for append, and skipped with a warning counter on read, so runs
are resumable.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator

from .records import (
    InvariantViolation,
    PipelineManifest,
    canonical_dumps,
    record_from_dict,
)

log = logging.getLogger(__name__)

DEFAULT_SHARD = "records"


class StoreError(RuntimeError):
    pass


class StageNotFound(StoreError):
    pass


@dataclass
class ReadStats:
    records: int = 0
    skipped_torn: int = 0


def _truncate_torn_tail(path: Path) -> None:
    """Drop a trailing partial line left behind by a killed writer."""
    if not path.exists() or path.stat().st_size == 0:
        return
    with open(path, "rb+") as f:
        f.seek(-1, os.SEEK_END)
        if f.read(1) == b"\n":
            return
        # Walk back to the last newline and cut everything after it.
        data = path.read_bytes()
        cut = data.rfind(b"\n") + 1
        f.truncate(cut)
    log.warning("truncated torn trailing line in %s", path)


class ShardWriter:
    """Single-writer append handle for one shard file.

    Records are validated before the write; each line is flushed and
    fsync'd so a crash can lose at most the line being written.
    """

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        _truncate_torn_tail(path)
        self._ids: set[str] = set()
        for rec in iter_shard(path):
            rid = rec.get("id")
            if rid:
                self._ids.add(rid)
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, record: Any, if_absent: bool = False) -> bool:
        """Append one domain record.

        Returns False when ``if_absent`` is set and the id already exists;
        raises InvariantViolation on duplicate ids otherwise.
        """
        record.validate()
        d = record.to_dict()
        rid = d.get("id")
        if rid in self._ids:
            if if_absent:
                return False
            raise InvariantViolation("id unique", f"duplicate id {rid}")
        self._fh.write(canonical_dumps(d) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        if rid:
            self._ids.add(rid)
        return True

    def append_raw(self, payload: dict[str, Any]) -> None:
        """Append a non-domain payload (journal entries) without id tracking."""
        self._fh.write(canonical_dumps(payload) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(self._ids)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "ShardWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def iter_shard(path: Path, stats: ReadStats | None = None) -> Iterator[dict[str, Any]]:
    """Yield parsed lines of one shard in append order, skipping a torn tail."""
    if not path.exists():
        return
    with open(path, "rb") as f:
        pending: bytes | None = None
        for raw in f:
            if not raw.endswith(b"\n"):
                pending = raw
                continue
            yield json.loads(raw.decode("utf-8"))
            if stats:
                stats.records += 1
        if pending is not None:
            if stats:
                stats.skipped_torn += 1
            log.warning("skipping torn trailing record in %s", path)


class RunStore:
    """All stores and metadata files for one run directory."""

    def __init__(self, runs_root: Path | str, run_id: str):
        self.run_id = run_id
        self.root = Path(runs_root) / run_id
        self.root.mkdir(parents=True, exist_ok=True)

    # -- stage record shards ------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def shard_path(self, stage: str, shard: str = DEFAULT_SHARD) -> Path:
        return self.stage_dir(stage) / f"{shard}.jsonl"

    def writer(self, stage: str, shard: str = DEFAULT_SHARD) -> ShardWriter:
        return ShardWriter(self.shard_path(stage, shard))

    def load_stage(
        self,
        stage: str,
        shard: str = DEFAULT_SHARD,
        where: Callable[[Any], bool] | None = None,
        stats: ReadStats | None = None,
    ) -> Iterator[Any]:
        """Yield domain records of one stage shard in append order.

        Raises StageNotFound when neither the stage directory nor the shard
        exists. ``where`` filters rehydrated records.
        """
        path = self.shard_path(stage, shard)
        if not path.exists():
            raise StageNotFound(f"stage {stage!r} (shard {shard!r}) not found under {self.root}")
        for d in iter_shard(path, stats=stats):
            record = record_from_dict(d)
            if where is None or where(record):
                yield record

    def has_shard(self, stage: str, shard: str = DEFAULT_SHARD) -> bool:
        return self.shard_path(stage, shard).exists()

    # -- journals -----------------------------------------------------------

    def journal_path(self, stage: str) -> Path:
        return self.root / "journal" / f"{stage}.jsonl"

    def journal_writer(self, stage: str) -> ShardWriter:
        return ShardWriter(self.journal_path(stage))

    def read_journal(self, stage: str) -> list[dict[str, Any]]:
        return list(iter_shard(self.journal_path(stage)))

    # -- manifest -----------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def read_manifest(self) -> PipelineManifest:
        if not self.manifest_path.exists():
            return PipelineManifest(run_id=self.run_id)
        data = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return PipelineManifest.from_dict(data)

    def write_manifest(self, manifest: PipelineManifest) -> None:
        """Atomically replace manifest.json (temp file + rename)."""
        manifest.validate()
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(canonical_dumps(manifest.to_dict()) + "\n", encoding="utf-8")
        os.replace(tmp, self.manifest_path)

    # -- misc directories ---------------------------------------------------

    def embeddings_dir(self) -> Path:
        d = self.root / "embeddings"
        d.mkdir(exist_ok=True)
        return d

    def reports_dir(self) -> Path:
        d = self.root / "reports"
        d.mkdir(exist_ok=True)
        return d

    def exports_dir(self) -> Path:
        d = self.root / "exports"
        d.mkdir(exist_ok=True)
        return d

    def transcripts_dir(self) -> Path:
        d = self.root / "transcripts"
        d.mkdir(exist_ok=True)
        return d


class RunLock:
    """One orchestrator process per run_id, enforced by a pid lock file.

    A lock whose owner pid is no longer alive is considered stale and
    taken over.
    """

    def __init__(self, run_root: Path):
        self.path = run_root / ".lock"
        self._held = False

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                pid = self._owner_pid()
                if pid is not None and _pid_alive(pid):
                    raise StoreError(
                        f"run is locked by live process {pid} ({self.path})"
                    )
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as f:
                f.write(str(os.getpid()))
            self._held = True
            return

    def _owner_pid(self) -> int | None:
        try:
            return int(self.path.read_text().strip())
        except (OSError, ValueError):
            return None

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> "RunLock":
        self.acquire()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.release()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
