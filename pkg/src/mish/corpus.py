"""Sparse TF-IDF documents, TSV ingestion and the cosine neighbourhood used for pair sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SparseDoc:
    id: int
    term_ids: np.ndarray
    weights: np.ndarray
    labels: frozenset = frozenset()

    def __post_init__(self):
        term_ids = np.asarray(self.term_ids, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if term_ids.shape != weights.shape or term_ids.ndim != 1:
            raise ValueError("term ids and weights must be matching 1-d arrays")
        if len(term_ids) == 0:
            raise ValueError(f"document {self.id} has no terms")
        if len(np.unique(term_ids)) != len(term_ids):
            raise ValueError(f"document {self.id} repeats a term id")
        if (weights < 0).any():
            raise ValueError(f"document {self.id} has a negative weight")
        object.__setattr__(self, "term_ids", term_ids)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "labels", frozenset(self.labels))

    @property
    def terms(self) -> list[tuple[int, float]]:
        return list(zip(self.term_ids.tolist(), self.weights.tolist()))


@dataclass
class CorpusBundle:
    docs: list[SparseDoc]
    vocab: list[str]
    splits: dict[str, list[int]] = field(default_factory=dict)
    names: list[str] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def split_docs(self, name: str) -> list[SparseDoc]:
        return [self.docs[i] for i in self.splits[name]]


def dense_matrix(docs, vocab_size: int) -> np.ndarray:
    x = np.zeros((len(docs), vocab_size))
    for row, doc in enumerate(docs):
        if doc.term_ids.max() >= vocab_size:
            raise ValueError(f"document {doc.id} has a term id outside the vocabulary")
        x[row, doc.term_ids] = doc.weights
    return x


def make_splits(count: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    order = np.random.default_rng(seed).permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    return {
        "train": sorted(order[:n_train].tolist()),
        "validation": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }


def prune_vocabulary(rows, max_df: float = 0.9):
    """Drop terms found in only one document or in more than ``max_df`` of them.

    ``rows`` is a list of ``(name, labels, {term: weight})``. Returns the kept
    vocabulary (sorted) and the rows with surviving, non-empty term maps.
    """
    df: dict[str, int] = {}
    for _, _, terms in rows:
        for t in terms:
            df[t] = df.get(t, 0) + 1
    limit = max_df * len(rows)
    vocab = sorted(t for t, c in df.items() if c > 1 and c <= limit)
    keep = set(vocab)
    kept_rows = []
    for name, labels, terms in rows:
        pruned = {t: w for t, w in terms.items() if t in keep}
        if not pruned:
            log.warning("document %s is empty after vocabulary pruning; dropped", name)
            continue
        kept_rows.append((name, labels, pruned))
    return vocab, kept_rows


def bundle_from_rows(rows, seed: int, max_df: float = 0.9) -> CorpusBundle:
    vocab, rows = prune_vocabulary(rows, max_df)
    index = {t: i for i, t in enumerate(vocab)}
    docs = []
    for i, (_, labels, terms) in enumerate(rows):
        ids = np.array([index[t] for t in terms], dtype=np.int64)
        weights = np.array(list(terms.values()), dtype=np.float64)
        order = np.argsort(ids)
        docs.append(SparseDoc(i, ids[order], weights[order], frozenset(labels)))
    return CorpusBundle(docs, vocab, make_splits(len(docs), seed), [r[0] for r in rows])


def _parse_line(line: str, lineno: int, path):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
    name, label_field, term_field = parts
    if not name:
        raise CorpusError(f"{path}:{lineno}: empty document id")
    labels = [lab for lab in label_field.split(",") if lab]
    terms: dict[str, float] = {}
    for pair in term_field.split():
        term, sep, weight = pair.rpartition(":")
        if not sep or not term:
            raise CorpusError(f"{path}:{lineno}: malformed term pair {pair!r}")
        try:
            value = float(weight)
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: bad weight in {pair!r}") from None
        if value < 0:
            raise CorpusError(f"{path}:{lineno}: negative weight in {pair!r}")
        if term in terms:
            raise CorpusError(f"{path}:{lineno}: term {term!r} repeated")
        terms[term] = value
    return name, labels, terms


def ingest(path, seed: int = 0, max_df: float = 0.9) -> CorpusBundle:
    """Read a TSV corpus: ``doc_id<TAB>label,label<TAB>term:weight term:weight``."""
    rows = []
    label_ids: dict[str, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            name, labels, terms = _parse_line(line, lineno, path)
            ids = {label_ids.setdefault(lab, len(label_ids)) for lab in labels}
            rows.append((name, ids, terms))
    if not rows:
        raise CorpusError(f"{path}: no documents")
    return bundle_from_rows(rows, seed, max_df)


def write_tsv(bundle: CorpusBundle, path) -> None:
    with open(path, "w") as fh:
        for doc in bundle.docs:
            name = bundle.names[doc.id] if bundle.names else str(doc.id)
            labels = ",".join(str(lab) for lab in sorted(doc.labels))
            terms = " ".join(f"{bundle.vocab[t]}:{w:.6g}" for t, w in doc.terms)
            fh.write(f"{name}\t{labels}\t{terms}\n")


def tfidf_neighbors(docs, vocab_size: int, p: int, block: int = 2048) -> np.ndarray:
    """Top-``p`` documents by TF-IDF cosine similarity for each doc (self excluded).

    Returns positions into ``docs``, shape ``(len(docs), p)``; ties go to the lower position.
    """
    if p < 1 or p >= len(docs):
        raise ValueError(f"p must be in 1..{len(docs) - 1}, got {p}")
    x = dense_matrix(docs, vocab_size)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms > 0, norms, 1.0)
    out = np.empty((len(docs), p), dtype=np.int64)
    for start in range(0, len(docs), block):
        sims = x[start : start + block] @ x.T
        rows = np.arange(sims.shape[0])
        sims[rows, start + rows] = -np.inf
        order = np.argsort(-sims, axis=1, kind="stable")
        out[start : start + block] = order[:, :p]
    return out


def relevance(query: SparseDoc, docs) -> np.ndarray:
    """Binary relevance: a document is relevant if it shares a label with the query."""
    return np.array([bool(query.labels & d.labels) for d in docs], dtype=bool)


def load_bundle(path: Path | str, seed: int) -> CorpusBundle:
    return ingest(path, seed=seed)
