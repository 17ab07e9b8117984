"""FIFO memory of recent (document, code) pairs and the training-time pair samplers."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from mish.hamming import HashCode, SubstringLayout, unpack_codes
from mish.model import deterministic_code, encode_probs


class CodeMemory:
    """Fixed-capacity FIFO of codes keyed by document id.

    Re-inserting an id drops its previous entry and appends the new one, so
    the ring always holds at most one live code per document, ordered by
    insertion time.
    """

    def __init__(self, capacity: int, n: int):
        if capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        self.capacity = capacity
        self.n = n
        self._ring: OrderedDict[int, np.ndarray] = OrderedDict()
        self._snapshot = None

    def __len__(self):
        return len(self._ring)

    def __contains__(self, doc_id):
        return doc_id in self._ring

    def ids(self) -> list[int]:
        return list(self._ring)

    def code(self, doc_id: int) -> HashCode:
        return HashCode.from_signs(self._ring[doc_id])

    def update(self, entries) -> None:
        """Append ``(doc_id, code)`` pairs; codes are HashCode or +-1 vectors."""
        for doc_id, code in entries:
            if isinstance(code, HashCode):
                if code.n != self.n:
                    raise ValueError(f"code has {code.n} bits, memory holds {self.n}")
                signs = code.to_signs()
            else:
                signs = np.asarray(code)
                if signs.shape != (self.n,):
                    raise ValueError(f"code has shape {signs.shape}, memory holds {self.n} bits")
            self._ring.pop(int(doc_id), None)
            self._ring[int(doc_id)] = np.where(signs > 0, 1, -1).astype(np.int8)
            while len(self._ring) > self.capacity:
                self._ring.popitem(last=False)
        self._snapshot = None

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Current ``(ids, signs)`` arrays in ring order."""
        if self._snapshot is None:
            ids = np.fromiter(self._ring.keys(), dtype=np.int64, count=len(self._ring))
            signs = (
                np.stack(list(self._ring.values())).astype(np.int64)
                if self._ring
                else np.zeros((0, self.n), dtype=np.int64)
            )
            self._snapshot = ids, signs
        return self._snapshot


def _query_signs(z_q, n: int) -> np.ndarray:
    if isinstance(z_q, HashCode):
        return z_q.to_signs().astype(np.int64)
    z = np.asarray(z_q)
    if z.dtype == np.uint64:
        return unpack_codes(z[None, :], n)[0].astype(np.int64)
    return np.where(z > 0, 1, -1).astype(np.int64)


def _scan(memory: CodeMemory, z_q, exclude_id):
    ids, signs = memory.snapshot()
    q = _query_signs(z_q, memory.n)
    dist = (memory.n - signs @ q) // 2
    if exclude_id is not None:
        keep = ids != exclude_id
        return ids[keep], signs[keep], dist[keep], q
    return ids, signs, dist, q


def estimate_radius(memory: CodeMemory, z_q, k: int, exclude_id: int | None = None) -> int | None:
    """Distance from ``z_q`` to its k-th nearest memory code, or None if memory is too small."""
    ids, _, dist, _ = _scan(memory, z_q, exclude_id)
    if len(dist) < k:
        return None
    return int(np.partition(dist, k - 1)[k - 1])


def substring_distances(signs: np.ndarray, q: np.ndarray, layout: SubstringLayout, i: int) -> np.ndarray:
    pos = list(layout.positions(i))
    return (len(pos) - signs[:, pos] @ q[pos]) // 2


def sample_false_positive(
    memory: CodeMemory,
    z_q,
    i: int,
    r: int,
    r_i_star: int,
    layout: SubstringLayout,
    exclude_id: int | None = None,
) -> tuple[int, HashCode] | None:
    """Farthest memory code outside radius ``r`` that still matches substring ``i`` within ``r_i_star``."""
    ids, signs, dist, q = _scan(memory, z_q, exclude_id)
    ok = (substring_distances(signs, q, layout, i) <= r_i_star) & (dist > r)
    if not ok.any():
        return None
    cand = np.flatnonzero(ok)
    best = cand[np.lexsort((ids[cand], -dist[cand]))[0]]
    return int(ids[best]), HashCode.from_signs(signs[best])


def sample_radius_doc(
    memory: CodeMemory, z_q, r: int, rng, exclude_id: int | None = None
) -> tuple[int, HashCode] | None:
    """A uniformly chosen memory code at exactly distance ``r`` from ``z_q``."""
    ids, signs, dist, _ = _scan(memory, z_q, exclude_id)
    cand = np.flatnonzero(dist == r)
    if len(cand) == 0:
        return None
    pick = cand[rng.integers(len(cand))]
    return int(ids[pick]), HashCode.from_signs(signs[pick])


def false_positive_predicate(z_q, i: int, r: int, r_i_star: int, layout: SubstringLayout):
    q = _query_signs(z_q, layout.n)

    def holds(code) -> bool:
        s = _query_signs(code, layout.n)
        full = (layout.n - int(s @ q)) // 2
        sub = int(substring_distances(s[None, :], q, layout, i)[0])
        return sub <= r_i_star and full > r

    return holds


def radius_predicate(z_q, r: int, n: int):
    q = _query_signs(z_q, n)

    def holds(code) -> bool:
        return (n - int(_query_signs(code, n) @ q)) // 2 == r

    return holds


def validate_pair(doc_id: int, predicate, params, docs) -> HashCode | None:
    """Re-encode ``doc_id`` with the current parameters; keep it only if ``predicate`` still holds."""
    if not 0 <= doc_id < len(docs):
        raise KeyError(f"unknown document id {doc_id}")
    fresh = deterministic_code(encode_probs(docs[doc_id], params))
    return fresh if predicate(fresh) else None
