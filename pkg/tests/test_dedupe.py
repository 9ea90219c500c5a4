from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripletforge.dedupe import (
    ContaminationReport,
    DedupConfig,
    DedupError,
    VectorIndex,
    contamination_report,
    dedup_scan,
    read_vectors,
    write_vectors,
)

# --- independent oracles (pure python, no shared code with the engine) -------


def oracle_cosine(a: list[float], b: list[float]) -> float:
    return sum(x * y for x, y in zip(a, b))


def oracle_dedup(entries, threshold):
    """Exhaustive greedy scan: compare each record to every previously retained one."""
    retained: list[tuple[str, list[float]]] = []
    decisions = []
    for rid, vec in entries:
        best_sim, best_id = None, None
        for kept_id, kept_vec in retained:
            sim = oracle_cosine(vec, kept_vec)
            if best_sim is None or sim > best_sim:
                best_sim, best_id = sim, kept_id
        if best_sim is not None and best_sim > threshold:
            decisions.append((rid, False, best_id))
        else:
            retained.append((rid, vec))
            decisions.append((rid, True, None))
    return decisions


def oracle_nearest(entries, query, k):
    sims = [(rid, oracle_cosine(vec, query)) for rid, vec in entries]
    sims.sort(key=lambda pair: (-pair[1], pair[0]))
    return sims[:k]


def unit(vec: list[float]) -> list[float]:
    norm = math.sqrt(sum(x * x for x in vec))
    return [x / norm for x in vec]


def random_units(n: int, dim: int, seed: int) -> list[list[float]]:
    rng = random.Random(seed)
    return [unit([rng.gauss(0, 1) for _ in range(dim)]) for _ in range(n)]


# --- dedup_scan ---------------------------------------------------------------


class TestDedupScan:
    def test_byte_identical_texts_drop_second(self):
        v = unit([0.3, 0.4, 0.5])
        decisions = list(
            dedup_scan([("q1", "s", v), ("q2", "s", v)], DedupConfig(threshold=0.9))
        )
        assert decisions[0].retained
        assert not decisions[1].retained
        assert decisions[1].duplicate_of == "q1"
        assert decisions[1].similarity == pytest.approx(1.0)

    def test_orthogonal_vectors_both_retained(self):
        decisions = list(
            dedup_scan(
                [("q1", "s", [1.0, 0.0]), ("q2", "s", [0.0, 1.0])],
                DedupConfig(threshold=0.9),
            )
        )
        assert all(d.retained for d in decisions)

    def test_scope_isolates_subsets(self):
        v = unit([1.0, 1.0])
        entries = [("q1", "a", v), ("q2", "b", v)]
        within = list(dedup_scan(entries, DedupConfig(threshold=0.9, scope="within_subset")))
        assert all(d.retained for d in within)
        global_scope = list(dedup_scan(entries, DedupConfig(threshold=0.9, scope="global")))
        assert [d.retained for d in global_scope] == [True, False]

    def test_threshold_is_strict_inequality(self):
        # plant a pair at exactly the threshold: cos = 0.9
        a = [1.0, 0.0]
        b = [0.9, math.sqrt(1 - 0.81)]
        decisions = list(
            dedup_scan([("q1", "s", a), ("q2", "s", b)], DedupConfig(threshold=0.9))
        )
        assert [d.retained for d in decisions] == [True, True]

    def test_matches_bruteforce_oracle_on_random_corpus(self):
        vectors = random_units(400, 12, seed=7)
        entries = [(f"q{i:04d}", "s", v) for i, v in enumerate(vectors)]
        got = [
            (d.record_id, d.retained, d.duplicate_of)
            for d in dedup_scan(
                ((rid, sub, v) for rid, sub, v in entries), DedupConfig(threshold=0.9)
            )
        ]
        expected = oracle_dedup([(rid, v) for rid, _, v in entries], 0.9)
        assert got == expected

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DedupError):
            list(
                dedup_scan(
                    [("q1", "s", [1.0, 0.0]), ("q2", "s", [1.0, 0.0, 0.0])],
                    DedupConfig(threshold=0.9),
                )
            )

    def test_non_unit_vector_rejected(self):
        with pytest.raises(DedupError, match="unit-norm"):
            list(dedup_scan([("q1", "s", [3.0, 4.0])], DedupConfig(threshold=0.9)))

    @settings(max_examples=40, deadline=None)
    @given(
        n_clusters=st.integers(min_value=1, max_value=5),
        sizes=st.lists(st.integers(min_value=2, max_value=5), min_size=5, max_size=5),
        order_seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_exactly_one_retained_per_duplicate_cluster(self, n_clusters, sizes, order_seed):
        # clusters sit on orthogonal axes: intra-cluster sim 1.0, inter-cluster 0.0
        entries = []
        for c in range(n_clusters):
            axis = [0.0] * n_clusters
            axis[c] = 1.0
            for m in range(sizes[c]):
                entries.append((f"c{c}m{m}", "s", list(axis)))
        random.Random(order_seed).shuffle(entries)
        decisions = list(dedup_scan(entries, DedupConfig(threshold=0.9)))
        retained_by_cluster: dict[str, int] = {}
        for d in decisions:
            cluster = d.record_id.split("m")[0]
            retained_by_cluster.setdefault(cluster, 0)
            if d.retained:
                retained_by_cluster[cluster] += 1
        # permuting order may change WHICH member is retained, never how many
        assert all(count == 1 for count in retained_by_cluster.values())


class TestNearest:
    def _index(self, vectors):
        index = VectorIndex(dimension=len(vectors[0][1]))
        for rid, v in vectors:
            index.add(rid, v)
        return index

    def test_exact_match_first_with_similarity_one(self):
        vs = [("a", [1.0, 0.0]), ("b", [0.0, 1.0])]
        index = self._index(vs)
        top = index.nearest([1.0, 0.0], k=1)
        assert top[0][0] == "a"
        assert top[0][1] == pytest.approx(1.0)

    def test_all_orthogonal_ties_broken_by_ascending_id(self):
        vs = [("c", [1.0, 0, 0, 0]), ("a", [0, 1.0, 0, 0]), ("b", [0, 0, 1.0, 0])]
        index = self._index(vs)
        top = index.nearest([0, 0, 0, 1.0], k=3)
        assert [rid for rid, _ in top] == ["a", "b", "c"]
        assert all(abs(sim) < 1e-12 for _, sim in top)

    def test_matches_bruteforce_on_random_vectors(self):
        vectors = [(f"v{i:03d}", v) for i, v in enumerate(random_units(50, 8, seed=3))]
        index = self._index(vectors)
        query = random_units(1, 8, seed=99)[0]
        got = index.nearest(query, k=5)
        expected = oracle_nearest(vectors, query, 5)
        assert [rid for rid, _ in got] == [rid for rid, _ in expected]
        for (_, s1), (_, s2) in zip(got, expected):
            assert s1 == pytest.approx(s2, abs=1e-12)

    def test_empty_index_is_error(self):
        with pytest.raises(DedupError, match="empty"):
            VectorIndex(dimension=2).nearest([1.0, 0.0], k=1)


class TestContamination:
    def _overlap_pair_embedder(self):
        """Stub vectors engineered so that cos(record, benchmark) = 0.959 exactly."""
        record_vec = [1.0, 0.0]
        bench_vec = [0.959, math.sqrt(1.0 - 0.959**2)]
        return record_vec, bench_vec

    def test_uppercase_count_pair_flagged_at_095(self):
        record_vec, bench_vec = self._overlap_pair_embedder()
        records = [("kod_upper", record_vec)]
        benchmarks = {"mbpp": [("MBPP/450", bench_vec)]}
        report = contamination_report(records, benchmarks, threshold=0.95)
        flagged = report.per_benchmark["mbpp"].flagged
        assert len(flagged) == 1
        assert flagged[0].benchmark_id == "MBPP/450"
        assert flagged[0].similarity == pytest.approx(0.959, abs=1e-9)

    def test_same_pair_not_flagged_at_096(self):
        record_vec, bench_vec = self._overlap_pair_embedder()
        report = contamination_report(
            [("kod_upper", record_vec)], {"mbpp": [("MBPP/450", bench_vec)]}, threshold=0.96
        )
        assert report.per_benchmark["mbpp"].flagged == []

    def test_exactly_at_threshold_not_flagged(self):
        # similarity strictly greater than the threshold is required
        vec = [1.0, 0.0]
        bench = [0.95, math.sqrt(1.0 - 0.95**2)]
        report = contamination_report([("r", vec)], {"b": [("b1", bench)]}, threshold=0.95)
        assert report.per_benchmark["b"].flagged == []

    def test_empty_benchmark_produces_empty_section(self):
        report = contamination_report([("r", [1.0, 0.0])], {"b": []}, threshold=0.95)
        assert report.per_benchmark["b"].flagged == []
        assert sum(report.per_benchmark["b"].max_sim_histogram) == 0

    def test_histogram_counts_sum_to_scanned_records(self):
        records = [(f"r{i}", v) for i, v in enumerate(random_units(30, 6, seed=1))]
        benchmarks = {
            "b1": [(f"x{i}", v) for i, v in enumerate(random_units(4, 6, seed=2))],
            "b2": [(f"y{i}", v) for i, v in enumerate(random_units(3, 6, seed=4))],
        }
        report = contamination_report(records, benchmarks, threshold=0.95)
        for section in report.per_benchmark.values():
            assert sum(section.max_sim_histogram) == len(records)

    def test_flag_soundness_rescored_independently(self):
        records = [(f"r{i}", v) for i, v in enumerate(random_units(40, 4, seed=11))]
        benchmarks = {"b": [(f"x{i}", v) for i, v in enumerate(random_units(6, 4, seed=12))]}
        threshold = 0.6
        report = contamination_report(records, benchmarks, threshold=threshold)
        by_id = dict(records)
        bench_by_id = dict(benchmarks["b"])
        for pair in report.per_benchmark["b"].flagged:
            rescored = oracle_cosine(by_id[pair.record_id], bench_by_id[pair.benchmark_id])
            assert rescored > threshold

    def test_report_dict_shape(self):
        report = ContaminationReport(threshold=0.95)
        assert report.to_dict()["threshold"] == 0.95


class TestVectorCache:
    def test_write_read_round_trip(self, tmp_path):
        ids = [f"q{i}" for i in range(5)]
        matrix = np.asarray(random_units(5, 7, seed=42))
        path = tmp_path / "subset.vec"
        write_vectors(path, ids, matrix)
        got_ids, got = read_vectors(path)
        assert got_ids == ids
        assert np.allclose(got, matrix, atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.vec"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DedupError, match="vector cache"):
            read_vectors(path)


class TestConfig:
    def test_threshold_must_exceed_half(self):
        from tripletforge.records import InvariantViolation

        with pytest.raises(InvariantViolation, match="threshold"):
            DedupConfig(threshold=0.4).validate()
