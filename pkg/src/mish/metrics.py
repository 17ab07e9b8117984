"""Tie-aware precision@k and the query timing protocol."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from mish.mih import MihIndex, knn_search, linear_scan_knn, radius_search

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedGroups:
    """Retrieved documents grouped by distance, ascending; ``relevant`` aligns with ``ids``."""

    distances: tuple[int, ...]
    ids: tuple[np.ndarray, ...]
    relevant: tuple[np.ndarray, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.distances, self.distances[1:])):
            raise ValueError("group distances must be strictly increasing")

    @property
    def total(self) -> int:
        return sum(len(g) for g in self.ids)

    @classmethod
    def from_ranking(cls, ids, distances, relevant) -> RankedGroups:
        ids = np.asarray(ids)
        distances = np.asarray(distances)
        relevant = np.asarray(relevant, dtype=bool)
        levels = np.unique(distances)
        return cls(
            tuple(int(d) for d in levels),
            tuple(ids[distances == d] for d in levels),
            tuple(relevant[distances == d] for d in levels),
        )


def _boundary(groups: RankedGroups, k: int):
    """Counts before the group holding rank k, plus that group's size and relevant count."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = groups.total
    if total < k:
        log.warning("only %d documents retrieved for precision@%d; scoring a partial list", total, k)
        k = total
    before = rel_before = 0
    for rel in groups.relevant:
        if before + len(rel) >= k:
            return k, before, rel_before, len(rel), int(rel.sum())
        before += len(rel)
        rel_before += int(rel.sum())
    return k, before, rel_before, 0, 0


def prec_at_k_average(groups: RankedGroups, k: int) -> float:
    """Expected precision@k over uniformly random orderings within each tie group."""
    k, c, rel_c, g, g_rel = _boundary(groups, k)
    if k == 0:
        return 0.0
    s = k - c
    return (rel_c + (s * g_rel / g if g else 0.0)) / k


def prec_at_k_worst(groups: RankedGroups, k: int) -> float:
    """Precision@k when irrelevant documents are ranked first inside every tie group."""
    k, c, rel_c, g, g_rel = _boundary(groups, k)
    if k == 0:
        return 0.0
    s = k - c
    return (rel_c + max(0, s - (g - g_rel))) / k


def ranked_groups(index: MihIndex, q, k: int, relevance_fn) -> RankedGroups:
    """All documents up to the k-th neighbour's distance, so the tie group at rank k is complete."""
    radius = knn_search(index, q, k).radius
    found = radius_search(index, q, radius)
    return RankedGroups.from_ranking(found.ids, found.distances, relevance_fn(found.ids))


# -- timing -------------------------------------------------------------------------


class ResultMismatch(RuntimeError):
    pass


@dataclass
class TimingResult:
    engine: str
    median_per_query: float
    per_query_ns: np.ndarray
    radii: np.ndarray
    candidates: np.ndarray
    repetitions: int


def pin_to_one_cpu() -> None:
    if hasattr(os, "sched_setaffinity"):
        try:
            cpus = sorted(os.sched_getaffinity(0))
            os.sched_setaffinity(0, {cpus[0]})
        except OSError:
            pass


def _run_engine(engine: str, index: MihIndex, q, k: int):
    if engine == "mih":
        return knn_search(index, q, k).neighbors
    if engine == "linear":
        return linear_scan_knn(index.codes, q, k)
    raise ValueError(f"unknown engine {engine!r}")


def verify_engines(index: MihIndex, queries, k: int, engines=("linear", "mih")) -> None:
    """Raise :class:`ResultMismatch` unless every engine returns the same neighbours."""
    for qi, q in enumerate(queries):
        results = [_run_engine(e, index, q, k) for e in engines]
        for e, res in zip(engines[1:], results[1:]):
            if res != results[0]:
                raise ResultMismatch(
                    f"query {qi}: {engines[0]} and {e} disagree "
                    f"({results[0].entries[:5]}... vs {res.entries[:5]}...)"
                )


def timing_run(engine: str, index: MihIndex, queries, k: int, repetitions: int = 100) -> TimingResult:
    """Median over repetitions of the batch wall time divided by the number of queries."""
    queries = np.atleast_2d(queries)
    per_rep = np.empty(repetitions)
    per_query = np.empty((repetitions, len(queries)), dtype=np.int64)
    for rep in range(repetitions):
        for qi, q in enumerate(queries):
            t0 = time.perf_counter_ns()
            _run_engine(engine, index, q, k)
            per_query[rep, qi] = time.perf_counter_ns() - t0
        per_rep[rep] = per_query[rep].sum() / len(queries)
    if engine == "mih":
        stats = [knn_search(index, q, k) for q in queries]
        radii = np.array([s.radius for s in stats])
        cands = np.array([len(s.candidates) for s in stats])
    else:
        radii = np.array([int(linear_scan_knn(index.codes, q, k).distances[-1]) for q in queries])
        cands = np.full(len(queries), len(index))
    return TimingResult(
        engine,
        float(np.median(per_rep)) * 1e-9,
        np.median(per_query, axis=0).astype(np.int64),
        radii,
        cands,
        repetitions,
    )


@dataclass
class Comparison:
    linear: TimingResult
    mih: TimingResult

    @property
    def speedup(self) -> float:
        return self.linear.median_per_query / self.mih.median_per_query


def compare_engines(index: MihIndex, queries, k: int, repetitions: int = 100, pin: bool = True) -> Comparison:
    """Check that both engines agree, then time each with the same protocol."""
    queries = np.atleast_2d(queries)
    verify_engines(index, queries, k)
    if pin:
        pin_to_one_cpu()
    # warm caches and lazily built shell masks
    for q in queries[: min(5, len(queries))]:
        _run_engine("mih", index, q, k)
        _run_engine("linear", index, q, k)
    return Comparison(
        timing_run("linear", index, queries, k, repetitions),
        timing_run("mih", index, queries, k, repetitions),
    )


PER_QUERY_FIELDS = ("query_id", "r_final", "candidate_count", "time_ns")
SUMMARY_FIELDS = ("method", "bits", "m", "k", "prec_avg", "prec_worst", "median_time", "speedup")


def write_per_query_csv(path, timing: TimingResult, query_ids=None) -> None:
    query_ids = range(len(timing.per_query_ns)) if query_ids is None else query_ids
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PER_QUERY_FIELDS)
        for row in zip(query_ids, timing.radii, timing.candidates, timing.per_query_ns):
            writer.writerow([int(v) for v in row])


def write_summary_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({f: row.get(f, "") for f in SUMMARY_FIELDS})
