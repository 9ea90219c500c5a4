"""Semantic deduplication and benchmark contamination analysis.

Exact cosine search over unit vectors is the default engine; any
approximate replacement must pass the oracle-equivalence suite at recall
1.0. dedup_scan is a greedy first-wins pass: a record is dropped iff its
similarity to some previously retained record in scope strictly exceeds
the threshold, so results are deterministic given input order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .records import InvariantViolation

UNIT_NORM_TOL = 1e-6
HISTOGRAM_BINS = 100  # fixed-width 0.01 bins over [0, 1]


class DedupError(ValueError):
    pass


@dataclass
class DedupConfig:
    threshold: float = 0.90
    scope: str = "within_subset"  # "within_subset" | "global"

    def validate(self) -> None:
        if not (0.5 < self.threshold <= 1.0):
            raise InvariantViolation(
                "dedup threshold in (0.5, 1.0]", str(self.threshold)
            )
        if self.scope not in ("within_subset", "global"):
            raise InvariantViolation("scope within_subset|global", self.scope)


def _as_unit_matrix(vectors: Sequence[Sequence[float]], dimension: int) -> np.ndarray:
    m = np.asarray(vectors, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != dimension:
        raise DedupError(f"expected vectors of dimension {dimension}")
    norms = np.linalg.norm(m, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise DedupError("vectors must be unit-norm within 1e-6")
    return m


class VectorIndex:
    """Exact cosine index over unit vectors, sealed after construction."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise InvariantViolation("dimension positive")
        self.dimension = dimension
        self.metric = "cosine"
        self._ids: list[str] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def add(self, record_id: str, vector: Sequence[float]) -> None:
        row = _as_unit_matrix([vector], self.dimension)[0]
        self._ids.append(record_id)
        self._rows.append(row)
        self._matrix = None

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def matrix(self) -> np.ndarray:
        if self._matrix is None or len(self._matrix) != len(self._rows):
            self._matrix = (
                np.vstack(self._rows) if self._rows else np.empty((0, self.dimension))
            )
        return self._matrix

    def nearest(self, query: Sequence[float], k: int) -> list[tuple[str, float]]:
        """Exact top-k by cosine similarity, ties broken by ascending record id."""
        if len(self) == 0:
            raise DedupError("index is empty")
        if not (1 <= k <= len(self)):
            raise InvariantViolation("k within index size", f"k={k}, size={len(self)}")
        q = _as_unit_matrix([query], self.dimension)[0]
        sims = self.matrix() @ q
        order = sorted(range(len(sims)), key=lambda i: (-sims[i], self._ids[i]))
        return [(self._ids[i], float(sims[i])) for i in order[:k]]


@dataclass
class DedupDecision:
    record_id: str
    retained: bool
    duplicate_of: str | None = None
    similarity: float | None = None


def dedup_scan(
    entries: Iterable[tuple[str, str, Sequence[float]]],
    config: DedupConfig,
    preloaded: dict[str, VectorIndex] | None = None,
) -> Iterable[DedupDecision]:
    """Greedy first-wins scan over (record_id, scope_key, unit vector) entries.

    ``scope_key`` is the subset name; under global scope all entries share
    one index. ``preloaded`` carries indexes of already-retained records so
    an interrupted scan can resume mid-stream.
    """
    config.validate()
    indexes: dict[str, VectorIndex] = dict(preloaded or {})
    for record_id, scope_key, vector in entries:
        key = scope_key if config.scope == "within_subset" else "__global__"
        index = indexes.get(key)
        if index is None:
            index = indexes[key] = VectorIndex(dimension=len(vector))
        if len(index):
            best_id, best_sim = index.nearest(vector, 1)[0]
            if best_sim > config.threshold:
                yield DedupDecision(record_id, False, best_id, best_sim)
                continue
        index.add(record_id, vector)
        yield DedupDecision(record_id, True)


@dataclass
class FlaggedPair:
    record_id: str
    benchmark_id: str
    similarity: float


@dataclass
class BenchmarkSection:
    flagged: list[FlaggedPair] = field(default_factory=list)
    max_sim_histogram: list[int] = field(default_factory=lambda: [0] * HISTOGRAM_BINS)


@dataclass
class ContaminationReport:
    threshold: float
    per_benchmark: dict[str, BenchmarkSection] = field(default_factory=dict)
    scanned: int = 0

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "scanned": self.scanned,
            "per_benchmark": {
                name: {
                    "flagged": [
                        {
                            "record_id": p.record_id,
                            "benchmark_id": p.benchmark_id,
                            "similarity": p.similarity,
                        }
                        for p in section.flagged
                    ],
                    "max_sim_histogram": list(section.max_sim_histogram),
                }
                for name, section in sorted(self.per_benchmark.items())
            },
        }


def _histogram_bin(similarity: float) -> int:
    clamped = min(max(similarity, 0.0), 1.0)
    return min(int(clamped * HISTOGRAM_BINS), HISTOGRAM_BINS - 1)


def contamination_report(
    records: Sequence[tuple[str, Sequence[float]]],
    benchmarks: dict[str, Sequence[tuple[str, Sequence[float]]]],
    threshold: float = 0.95,
) -> ContaminationReport:
    """Flag records whose max similarity to a benchmark strictly exceeds the threshold.

    Per benchmark, every scanned record contributes its max similarity to a
    fixed 0.01-wide histogram, so bin counts always sum to the number of
    scanned records.
    """
    report = ContaminationReport(threshold=threshold, scanned=len(records))
    for name, bench_entries in benchmarks.items():
        section = BenchmarkSection()
        report.per_benchmark[name] = section
        if not bench_entries or not records:
            continue
        dim = len(bench_entries[0][1])
        index = VectorIndex(dimension=dim)
        for bench_id, vector in bench_entries:
            index.add(bench_id, vector)
        for record_id, vector in records:
            if len(vector) != dim:
                raise DedupError(
                    f"record {record_id} has dimension {len(vector)}, benchmark has {dim}"
                )
            bench_id, sim = index.nearest(vector, 1)[0]
            section.max_sim_histogram[_histogram_bin(sim)] += 1
            if sim > threshold:
                section.flagged.append(FlaggedPair(record_id, bench_id, sim))
    return report


# -- vector cache files -------------------------------------------------------

VEC_MAGIC = b"TFV1"


def write_vectors(path: Path, ids: Sequence[str], matrix: np.ndarray) -> None:
    """Cache vectors: magic + (dimension, count) header + little-endian f32 body.

    Record ids go to a ``<name>.ids`` sidecar, one per line, same order.
    """
    if matrix.ndim != 2 or len(ids) != matrix.shape[0]:
        raise DedupError("ids and matrix rows must align")
    count, dim = matrix.shape
    body = matrix.astype("<f4").tobytes(order="C")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(VEC_MAGIC + struct.pack("<II", dim, count) + body)
    tmp.replace(path)
    sidecar = path.with_suffix(path.suffix + ".ids")
    sidecar.write_text("".join(f"{rid}\n" for rid in ids), encoding="utf-8")


def read_vectors(path: Path) -> tuple[list[str], np.ndarray]:
    blob = path.read_bytes()
    if blob[:4] != VEC_MAGIC:
        raise DedupError(f"{path} is not a vector cache file")
    dim, count = struct.unpack("<II", blob[4:12])
    matrix = np.frombuffer(blob[12:], dtype="<f4").reshape(count, dim).astype(np.float64)
    ids = path.with_suffix(path.suffix + ".ids").read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise DedupError("vector cache sidecar does not match header count")
    return ids, matrix
