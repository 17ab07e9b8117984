"""Seeded desk-scale data: clustered hash codes and topic-clustered TF-IDF corpora."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mish.corpus import CorpusBundle, bundle_from_rows
from mish.hamming import pack_signs


def clustered_codes(
    count: int, n: int, clusters: int = 1000, flip_prob: float = 0.05, seed: int = 0
) -> np.ndarray:
    """Packed codes drawn around random centres, each bit flipped with ``flip_prob``."""
    rng = np.random.default_rng(seed)
    centres = rng.random((clusters, n)) < 0.5
    members = rng.integers(0, clusters, size=count)
    bits = centres[members] ^ (rng.random((count, n)) < flip_prob)
    return pack_signs(np.where(bits, 1, -1))


@dataclass(frozen=True)
class SyntheticSpec:
    clusters: int = 4
    docs_per_cluster: int = 500
    vocab_size: int = 500
    concentration: float = 0.05
    doc_length: int = 80
    topic_weight: float = 0.2
    n_bits: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("clusters", "docs_per_cluster", "vocab_size", "doc_length", "n_bits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")
        if not 0 <= self.topic_weight <= 1:
            raise ValueError("topic_weight must lie in [0, 1]")


def synth(spec: SyntheticSpec) -> CorpusBundle:
    """Cluster-conditioned multinomial documents with TF-IDF weights; label = cluster id.

    Each cluster mixes a sparse Dirichlet topic with a shared background
    distribution. Vocabulary pruning matches :func:`mish.corpus.ingest`.
    """
    rng = np.random.default_rng(spec.seed)
    v = spec.vocab_size
    topics = rng.dirichlet(np.full(v, spec.concentration), size=spec.clusters)
    background = rng.dirichlet(np.ones(v))
    total = spec.clusters * spec.docs_per_cluster
    counts = np.empty((total, v), dtype=np.int64)
    labels = np.repeat(np.arange(spec.clusters), spec.docs_per_cluster)
    for row, c in enumerate(labels):
        dist = spec.topic_weight * topics[c] + (1 - spec.topic_weight) * background
        counts[row] = rng.multinomial(spec.doc_length, dist)
    df = (counts > 0).sum(axis=0)
    idf = np.log(total / np.maximum(df, 1))
    rows = []
    for row in range(total):
        nz = np.flatnonzero(counts[row])
        weights = counts[row, nz] * idf[nz]
        terms = {f"w{t:05d}": float(w) for t, w in zip(nz, weights)}
        rows.append((f"d{row}", {int(labels[row])}, terms))
    return bundle_from_rows(rows, spec.seed)
