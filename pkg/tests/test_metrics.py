import csv
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mish.hamming import SubstringLayout, pack_signs
from mish.metrics import (
    RankedGroups,
    ResultMismatch,
    compare_engines,
    prec_at_k_average,
    prec_at_k_worst,
    ranked_groups,
    timing_run,
    verify_engines,
    write_per_query_csv,
    write_summary_csv,
)
from mish.mih import NeighborList, build
from mish.synthetic import clustered_codes
from oracles import adversarial_precision, monte_carlo_precision


def groups_of(distances, relevant):
    return RankedGroups.from_ranking(np.arange(len(distances)), distances, relevant)


def random_structure(rng, max_groups=6, max_size=12):
    sizes = rng.integers(1, max_size + 1, size=rng.integers(1, max_groups + 1))
    distances = np.repeat(np.arange(len(sizes)) * 2, sizes)
    relevant = rng.random(len(distances)) < rng.uniform(0.1, 0.9)
    return distances, relevant


class TestPrecision:
    def test_stated_example(self):
        g = groups_of([0, 1, 1], [1, 1, 0])
        assert prec_at_k_average(g, 2) == 0.75
        assert prec_at_k_worst(g, 2) == 0.5

    def test_no_boundary_tie_is_plain_precision(self):
        g = groups_of([0, 1, 2, 3], [1, 0, 1, 1])
        assert prec_at_k_average(g, 3) == prec_at_k_worst(g, 3) == pytest.approx(2 / 3)

    def test_all_relevant(self):
        g = groups_of([0, 0, 1, 1, 1], [1] * 5)
        assert prec_at_k_average(g, 4) == prec_at_k_worst(g, 4) == 1.0

    def test_relevant_boundary_worst_equals_average(self):
        g = groups_of([0, 1, 1, 1], [0, 1, 1, 1])
        assert prec_at_k_worst(g, 3) == prec_at_k_average(g, 3)

    def test_irrelevant_boundary(self):
        g = groups_of([0, 0, 1, 1, 1], [1, 0, 0, 0, 0])
        assert prec_at_k_worst(g, 4) == 1 / 4
        assert prec_at_k_average(g, 4) == 1 / 4

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            d, rel = random_structure(rng)
            k = int(rng.integers(1, len(d) + 1))
            mc = monte_carlo_precision(d, rel, k, 100_000, rng)
            assert abs(prec_at_k_average(groups_of(d, rel), k) - mc) < 1e-3

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_worst_matches_adversarial_ordering(self, seed):
        rng = np.random.default_rng(seed)
        d, rel = random_structure(rng)
        k = int(rng.integers(1, len(d) + 1))
        assert prec_at_k_worst(groups_of(d, rel), k) == pytest.approx(adversarial_precision(d, rel, k))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bounds_and_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        d, rel = random_structure(rng)
        k = int(rng.integers(1, len(d) + 1))
        g = groups_of(d, rel)
        avg, worst = prec_at_k_average(g, k), prec_at_k_worst(g, k)
        assert 0 <= worst <= avg <= 1
        perm = rng.permutation(len(d))
        shuffled = groups_of(d[perm], rel[perm])
        assert prec_at_k_average(shuffled, k) == pytest.approx(avg)
        assert prec_at_k_worst(shuffled, k) == pytest.approx(worst)

    def test_partial_list_warns(self, caplog):
        g = groups_of([0, 1, 1], [1, 0, 1])
        with caplog.at_level(logging.WARNING):
            assert prec_at_k_average(g, 10) == pytest.approx(2 / 3)
        assert "partial" in caplog.text

    def test_groups_must_increase(self):
        with pytest.raises(ValueError):
            RankedGroups((1, 1), (np.array([0]), np.array([1])), (np.array([True]), np.array([False])))

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            prec_at_k_average(groups_of([0], [1]), 0)


class TestRankedGroups:
    def test_boundary_group_is_complete(self):
        rng = np.random.default_rng(0)
        signs = rng.choice([-1, 1], (500, 16))
        index = build(pack_signs(signs), SubstringLayout.contiguous(16, 2))
        q = pack_signs(signs[:1])[0]
        labels = rng.integers(0, 3, 500)
        g = ranked_groups(index, q, 20, lambda ids: labels[ids] == labels[0])
        dist = (signs != signs[0]).sum(axis=1)
        radius = np.sort(dist)[19]
        assert g.total == int((dist <= radius).sum())
        assert g.distances[-1] == radius
        for d, ids in zip(g.distances, g.ids):
            assert set(ids.tolist()) == set(np.flatnonzero(dist == d).tolist())


class TestTiming:
    def setup_method(self):
        self.index = build(clustered_codes(3000, 32, clusters=50, seed=1), SubstringLayout.contiguous(32, 2))
        self.queries = clustered_codes(10, 32, clusters=50, seed=1)

    def test_engines_agree(self):
        verify_engines(self.index, self.queries, 10)

    def test_self_comparison_near_one(self):
        a = timing_run("mih", self.index, self.queries, 5, repetitions=15)
        b = timing_run("mih", self.index, self.queries, 5, repetitions=15)
        assert 0.25 < a.median_per_query / b.median_per_query < 4
        assert a.radii.tolist() == b.radii.tolist()

    def test_mismatch_aborts(self, monkeypatch):
        import mish.metrics as metrics

        def broken(codes, q, k):
            return NeighborList(np.arange(k), np.zeros(k, dtype=np.int64))

        monkeypatch.setattr(metrics, "linear_scan_knn", broken)
        with pytest.raises(ResultMismatch):
            compare_engines(self.index, self.queries, 5, repetitions=2, pin=False)

    def test_compare_reports_speedup(self):
        cmp = compare_engines(self.index, self.queries, 5, repetitions=3, pin=False)
        assert cmp.speedup > 0
        assert cmp.linear.candidates.tolist() == [3000] * 10

    def test_unknown_engine(self):
        with pytest.raises(ValueError):
            timing_run("faiss", self.index, self.queries, 5, repetitions=1)


class TestCsv:
    def test_per_query(self, tmp_path):
        index = build(clustered_codes(500, 32, clusters=10, seed=0), SubstringLayout.contiguous(32, 2))
        t = timing_run("mih", index, clustered_codes(4, 32, clusters=10, seed=0), 3, repetitions=2)
        path = tmp_path / "q.csv"
        write_per_query_csv(path, t, query_ids=[10, 11, 12, 13])
        rows = list(csv.DictReader(open(path)))
        assert list(rows[0]) == ["query_id", "r_final", "candidate_count", "time_ns"]
        assert [int(r["query_id"]) for r in rows] == [10, 11, 12, 13]

    def test_summary(self, tmp_path):
        path = tmp_path / "s.csv"
        write_summary_csv(path, [{"method": "mish", "bits": 32, "m": 2, "k": 100, "prec_avg": 0.5}])
        rows = list(csv.DictReader(open(path)))
        assert rows[0]["method"] == "mish" and rows[0]["speedup"] == ""
