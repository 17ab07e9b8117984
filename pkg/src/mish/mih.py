"""Exact Hamming search with multi-index hashing.

Codes are split into ``m`` disjoint substrings, each with its own table
mapping substring value to the ids holding it. A document within distance
``r`` of the query must match the query within radius ``r // m`` (or one less)
in at least one substring, so looking up small Hamming balls in every table
yields a candidate set containing every true neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from math import comb

import numpy as np

from mish.hamming import (
    HashCode,
    SubstringLayout,
    distances_to,
    mask_padding,
    n_words,
    read_codes,
    write_codes,
)


@dataclass(frozen=True)
class NeighborList:
    """Query result ordered by (distance, id)."""

    ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return zip(self.ids.tolist(), self.distances.tolist())

    def __eq__(self, other):
        if not isinstance(other, NeighborList):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(
            self.distances, other.distances
        )

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(self)

    @classmethod
    def ordered(cls, ids, distances) -> NeighborList:
        ids = np.asarray(ids, dtype=np.int64)
        distances = np.asarray(distances, dtype=np.int64)
        order = np.lexsort((ids, distances))
        return cls(ids[order], distances[order])


@dataclass
class CandidateSet:
    ids: np.ndarray
    per_lookup_counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)


@dataclass
class KnnResult:
    neighbors: NeighborList
    candidates: CandidateSet
    radius: int
    distance_computations: int


class _Table:
    """Posting lists for one substring, stored as keys plus CSR offsets.

    Short substrings use a direct-address offset array over every possible
    key; longer ones keep sorted distinct keys and binary-search them. Ids
    within a posting list are ascending.
    """

    DIRECT_MAX_BITS = 16

    def __init__(self, keys: np.ndarray, chunk_len: int):
        order = np.argsort(keys, kind="stable")
        self.ids = order.astype(np.int64)
        self.chunk_len = chunk_len
        self.direct = chunk_len <= self.DIRECT_MAX_BITS
        if self.direct:
            counts = np.bincount(keys, minlength=1 << chunk_len)
            self.offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
            self.keys = np.flatnonzero(counts)
        else:
            self.keys, starts = np.unique(keys[order], return_index=True)
            self.offsets = np.append(starts, len(keys)).astype(np.int64)

    def __len__(self):
        return len(self.keys)

    def _slots(self, keys: np.ndarray) -> np.ndarray:
        if self.direct:
            return keys
        if len(self.keys) == 0:
            return keys[:0]
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        return pos[self.keys[pos] == keys]

    def posting(self, key: int) -> np.ndarray:
        slot = self._slots(np.array([key], dtype=np.int64))
        if len(slot) == 0:
            return self.ids[:0]
        return self.ids[self.offsets[slot[0]] : self.offsets[slot[0] + 1]]

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Concatenated posting lists of every key in ``keys``; absent keys are free."""
        return self._gather(self._slots(keys))

    def shell(self, key: int, radius: int) -> np.ndarray:
        """Ids whose substring differs from ``key`` in exactly ``radius`` bits.

        Enumerates the shell when it is smaller than the set of occupied keys,
        otherwise filters the occupied keys directly; both give the same ids.
        """
        if radius < 0 or radius > self.chunk_len:
            return self.ids[:0]
        if comb(self.chunk_len, radius) <= len(self.keys):
            return self.lookup(key ^ _shell_masks(self.chunk_len, radius))
        present = self.keys[np.bitwise_count(self.keys ^ key) == radius]
        return self._gather(present if self.direct else self._slots(present))

    def _gather(self, slots: np.ndarray) -> np.ndarray:
        starts = self.offsets[slots]
        lengths = self.offsets[slots + 1] - starts
        nonempty = lengths > 0
        starts, lengths = starts[nonempty], lengths[nonempty]
        if len(starts) == 0:
            return self.ids[:0]
        if len(starts) == 1:
            return self.ids[starts[0] : starts[0] + lengths[0]]
        total = int(lengths.sum())
        run_starts = np.cumsum(lengths) - lengths
        idx = np.repeat(starts - run_starts, lengths) + np.arange(total)
        return self.ids[idx]


def substring_radii(r: int, m: int) -> list[int]:
    """Per-substring radii for search radius ``r``; -1 means skip the substring."""
    if r < 0 or m < 1:
        raise ValueError(f"need r >= 0 and m >= 1, got r={r}, m={m}")
    r_star, a = divmod(r, m)
    return [r_star] * (a + 1) + [r_star - 1] * (m - a - 1)


@lru_cache(maxsize=None)
def _shell_masks(chunk_len: int, radius: int) -> np.ndarray:
    """XOR masks with exactly ``radius`` bits set among ``chunk_len`` positions."""
    if radius < 0 or radius > chunk_len:
        return np.zeros(0, dtype=np.int64)
    masks = np.zeros(comb(chunk_len, radius), dtype=np.int64)
    for t, positions in enumerate(combinations(range(chunk_len), radius)):
        for p in positions:
            masks[t] |= 1 << p
    masks.setflags(write=False)
    return masks


def enumerate_ball(key: int, chunk_len: int, radius: int) -> np.ndarray:
    """Every key within Hamming distance ``radius`` of ``key``, nearest shells first."""
    radius = min(radius, chunk_len)
    if radius < 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([key ^ _shell_masks(chunk_len, rho) for rho in range(radius + 1)])


class MihIndex:
    def __init__(self, words: np.ndarray, layout: SubstringLayout, tables: list[_Table]):
        self.codes = words
        self.layout = layout
        self.tables = tables

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def m(self) -> int:
        return self.layout.m

    def __len__(self):
        return len(self.codes)

    def posting(self, i: int, key: int) -> np.ndarray:
        return self.tables[i].posting(key)

    def query_words(self, q) -> np.ndarray:
        if isinstance(q, HashCode):
            if q.n != self.n:
                raise ValueError(f"query has {q.n} bits, index has {self.n}")
            return q.words
        q = np.asarray(q, dtype=np.uint64).reshape(-1)
        if len(q) != n_words(self.n):
            raise ValueError(f"query has {len(q)} words, index codes have {n_words(self.n)}")
        return q

    def save(self, code_path, layout_path) -> None:
        write_codes(code_path, self.codes, self.n)
        self.layout.save(layout_path)

    @classmethod
    def load(cls, code_path, layout_path=None, m: int | None = None) -> MihIndex:
        words, n = read_codes(code_path)
        if layout_path is not None:
            layout = SubstringLayout.load(layout_path)
        else:
            layout = SubstringLayout.contiguous(n, m or max(1, n // 16))
        return build(words, layout)


def build(codes, layout: SubstringLayout) -> MihIndex:
    """Build one table per substring. ``codes`` is a packed array or a list of HashCode."""
    if isinstance(codes, np.ndarray):
        words = np.atleast_2d(codes).astype(np.uint64)
        if words.shape[1] != n_words(layout.n):
            raise ValueError(
                f"codes have {words.shape[1]} words, layout needs n={layout.n} bits"
            )
        words = mask_padding(words, layout.n)
    else:
        codes = list(codes)
        if any(c.n != layout.n for c in codes):
            raise ValueError(f"all codes must have n={layout.n} bits")
        words = (
            np.stack([c.words for c in codes])
            if codes
            else np.zeros((0, n_words(layout.n)), dtype=np.uint64)
        )
    words = np.ascontiguousarray(words)
    keys = layout.keys(words) if len(words) else np.zeros((0, layout.m), dtype=np.int64)
    tables = [_Table(keys[:, i], layout.chunk_len) for i in range(layout.m)]
    return MihIndex(words, layout, tables)


def candidate_set(index: MihIndex, q, r: int) -> CandidateSet:
    """Union of the substring-table lookups for search radius ``r``."""
    qw = index.query_words(q)
    qkeys = index.layout.keys(qw[None, :])[0]
    seen = np.zeros(len(index), dtype=bool)
    counts = {}
    found = []
    for i, rho in enumerate(substring_radii(r, index.m)):
        if rho < 0:
            continue
        table = index.tables[i]
        ids = np.concatenate(
            [table.shell(int(qkeys[i]), s) for s in range(min(rho, table.chunk_len) + 1)]
        )
        new = ids[~seen[ids]]
        seen[new] = True
        counts[(i, rho)] = len(new)
        found.append(new)
    ids = np.sort(np.concatenate(found)) if found else np.zeros(0, dtype=np.int64)
    return CandidateSet(ids, counts)


def radius_search(index: MihIndex, q, r: int) -> NeighborList:
    qw = index.query_words(q)
    cands = candidate_set(index, qw, r).ids
    d = distances_to(index.codes[cands], qw)
    keep = d <= r
    return NeighborList.ordered(cands[keep], d[keep])


def knn_search(index: MihIndex, q, k: int) -> KnnResult:
    """Exact k nearest neighbours, growing the radius one substring at a time.

    Raising the radius from ``r - 1`` to ``r`` widens only substring ``r % m``,
    to radius ``r // m``, so each step looks up a single shell of one table.
    """
    size = len(index)
    if k < 1 or k > size:
        raise ValueError(f"k must be in 1..{size}, got {k}")
    qw = index.query_words(q)
    layout = index.layout
    m, c, n = layout.m, layout.chunk_len, layout.n
    qkeys = layout.keys(qw[None, :])[0]
    seen = np.zeros(size, dtype=bool)
    hist = np.zeros(n + 1, dtype=np.int64)
    found_ids, found_d = [], []
    counts = {}
    within = 0
    r = 0
    for r in range(n + 1):
        i, rho = r % m, r // m
        if rho <= c:
            ids = index.tables[i].shell(int(qkeys[i]), rho)
            if len(ids):
                new = ids[~seen[ids]]
                seen[new] = True
                d = distances_to(index.codes[new], qw)
                hist += np.bincount(d, minlength=n + 1)
                found_ids.append(new)
                found_d.append(d)
                counts[(i, rho)] = len(new)
        within += hist[r]
        if within >= k:
            break
    ids = np.concatenate(found_ids)
    d = np.concatenate(found_d)
    keep = d <= r
    ranked = NeighborList.ordered(ids[keep], d[keep])
    top = NeighborList(ranked.ids[:k], ranked.distances[:k])
    return KnnResult(top, CandidateSet(ids, counts), r, len(ids))


def linear_scan_knn(codes, q, k: int) -> NeighborList:
    """Brute-force top-k by (distance, id); the correctness oracle and timing baseline."""
    if isinstance(q, HashCode):
        q = q.words
    codes = np.atleast_2d(codes)
    d = distances_to(codes, np.asarray(q, dtype=np.uint64))
    size = len(d)
    k = min(k, size)
    order_key = d * size + np.arange(size, dtype=np.int64)
    if k < size:
        top = np.argpartition(order_key, k - 1)[:k]
        top = top[np.argsort(order_key[top])]
    else:
        top = np.argsort(order_key)
    return NeighborList(top.astype(np.int64), d[top])


@dataclass
class CandidateStats:
    counts: np.ndarray
    radii: np.ndarray

    @property
    def min(self) -> int:
        return int(self.counts.min())

    @property
    def median(self) -> float:
        return float(np.median(self.counts))

    @property
    def max(self) -> int:
        return int(self.counts.max())

    @property
    def mean(self) -> float:
        return float(self.counts.mean())

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.counts, bins=bins)


def candidate_stats(index: MihIndex, queries, k: int) -> CandidateStats:
    """Candidate-set size at termination of :func:`knn_search` for each query."""
    queries = list(queries) if not isinstance(queries, np.ndarray) else np.atleast_2d(queries)
    if len(queries) == 0:
        raise ValueError("no queries")
    counts, radii = [], []
    for q in queries:
        res = knn_search(index, q, k)
        counts.append(len(res.candidates))
        radii.append(res.radius)
    return CandidateStats(np.array(counts, dtype=np.int64), np.array(radii, dtype=np.int64))
