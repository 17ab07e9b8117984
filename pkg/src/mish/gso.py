"""Greedy substring optimization: regroup bits so each substring holds weakly correlated bits."""

from __future__ import annotations

import numpy as np

from mish.hamming import SubstringLayout, unpack_codes


def bit_correlations(signs) -> np.ndarray:
    """Absolute Pearson correlation between bit columns; constant bits correlate with nothing."""
    x = np.asarray(signs, dtype=np.float64)
    centered = x - x.mean(axis=0)
    std = centered.std(axis=0)
    live = std > 0
    z = np.zeros_like(centered)
    z[:, live] = centered[:, live] / std[live]
    corr = np.abs(z.T @ z) / len(x)
    np.fill_diagonal(corr, 0.0)
    return corr


def gso(codes, m: int, n: int | None = None) -> SubstringLayout:
    """Assign bits to ``m`` substrings, greedily minimising intra-substring correlation.

    ``codes`` is either a ``(count, n)`` sign matrix or packed words (then ``n`` is
    required). Bits are visited in order of decreasing total absolute correlation
    and each goes to the non-full substring where it adds the least correlation.
    """
    codes = np.asarray(codes)
    if codes.dtype == np.uint64:
        if n is None:
            raise ValueError("packed codes need an explicit bit count n")
        signs = unpack_codes(codes, n)
    else:
        signs = codes
    if signs.ndim != 2 or len(signs) < 2:
        raise ValueError("GSO needs at least 2 codes")
    n = signs.shape[1]
    if n % m:
        raise ValueError(f"n={n} is not divisible by m={m}")
    chunk = n // m

    corr = bit_correlations(signs)
    total = corr.sum(axis=1)
    order = sorted(range(n), key=lambda b: (-total[b], b))

    groups: list[list[int]] = [[] for _ in range(m)]
    for b in order:
        best, best_cost = -1, np.inf
        for i, members in enumerate(groups):
            if len(members) == chunk:
                continue
            cost = corr[b, members].sum() if members else 0.0
            if cost < best_cost:
                best, best_cost = i, cost
        groups[best].append(b)
    assignment = tuple(b for members in groups for b in sorted(members))
    return SubstringLayout(n, m, assignment)


def mean_abs_correlation(signs, layout: SubstringLayout) -> tuple[float, float]:
    """Mean |corr| over bit pairs inside the same substring and across substrings."""
    corr = bit_correlations(signs)
    group = np.empty(layout.n, dtype=np.int64)
    for i in range(layout.m):
        group[list(layout.positions(i))] = i
    same = group[:, None] == group[None, :]
    off_diag = ~np.eye(layout.n, dtype=bool)
    intra = corr[same & off_diag]
    inter = corr[~same]
    return float(intra.mean()) if intra.size else 0.0, float(inter.mean()) if inter.size else 0.0
