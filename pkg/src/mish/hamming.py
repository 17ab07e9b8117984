"""Packed binary hash codes, Hamming distance and substring extraction.

A code of ``n`` bits holds logical values in {-1, +1}; +1 is stored as a set
bit. Bit ``i`` of a code lives in bit ``i % 64`` of word ``i // 64``.
Collections of codes are ``(count, words)`` arrays of ``uint64``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WORD_BITS = 64
CODE_MAGIC = b"MIHC"
CODE_VERSION = 1
_HEADER = struct.Struct("<4sBHQ")


def n_words(n: int) -> int:
    return (n + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True)
class HashCode:
    """A single ``n``-bit code; ``bits`` is the packed value as a Python int."""

    n: int
    bits: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"code length must be positive, got {self.n}")
        if not 0 <= self.bits < (1 << self.n):
            raise ValueError(f"bits do not fit in {self.n} positions")

    @classmethod
    def from_signs(cls, signs) -> HashCode:
        signs = np.asarray(signs)
        bits = 0
        for i in np.flatnonzero(signs > 0):
            bits |= 1 << int(i)
        return cls(len(signs), bits)

    @classmethod
    def from_words(cls, words, n: int) -> HashCode:
        bits = 0
        for w, word in enumerate(np.asarray(words, dtype=np.uint64)):
            bits |= int(word) << (WORD_BITS * w)
        return cls(n, bits & ((1 << n) - 1))

    @property
    def words(self) -> np.ndarray:
        mask = (1 << WORD_BITS) - 1
        return np.array(
            [(self.bits >> (WORD_BITS * w)) & mask for w in range(n_words(self.n))],
            dtype=np.uint64,
        )

    def to_signs(self) -> np.ndarray:
        return np.array([1 if (self.bits >> i) & 1 else -1 for i in range(self.n)], dtype=np.int8)

    def bit(self, i: int) -> int:
        return 1 if (self.bits >> i) & 1 else -1


def hamming_distance(a: HashCode, b: HashCode) -> int:
    if a.n != b.n:
        raise ValueError(f"code length mismatch: {a.n} != {b.n}")
    return (a.bits ^ b.bits).bit_count()


def surrogate_distance(a, b) -> float:
    """Differentiable Hamming distance ``(n - <a, b>) / 2``; exact for +-1 inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} != {b.shape}")
    return float((a.size - a @ b) / 2.0)


# -- collections -------------------------------------------------------------


def pack_signs(signs) -> np.ndarray:
    """Pack a ``(count, n)`` array of signs (or 0/1 bits) into ``uint64`` words."""
    signs = np.atleast_2d(np.asarray(signs))
    count, n = signs.shape
    bits = np.zeros((count, n_words(n) * WORD_BITS), dtype=np.uint8)
    bits[:, :n] = signs > 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_codes(words, n: int) -> np.ndarray:
    """Inverse of :func:`pack_signs`, returning ``(count, n)`` signs as int8."""
    words = np.atleast_2d(np.asarray(words, dtype="<u8"))
    bits = np.unpackbits(np.ascontiguousarray(words).view(np.uint8), axis=1, bitorder="little")
    return (bits[:, :n].astype(np.int8) * 2 - 1).astype(np.int8)


def codes_from_array(words, n: int) -> list[HashCode]:
    return [HashCode.from_words(row, n) for row in np.atleast_2d(words)]


def codes_to_array(codes) -> tuple[np.ndarray, int]:
    codes = list(codes)
    if not codes:
        raise ValueError("empty code collection")
    n = codes[0].n
    if any(c.n != n for c in codes):
        raise ValueError("mixed code lengths in collection")
    return np.stack([c.words for c in codes]), n


def distances_to(codes: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamming distance from packed query ``q`` to every row of ``codes``."""
    x = np.bitwise_xor(codes, q)
    if x.ndim == 1:
        return np.bitwise_count(x).astype(np.int64)
    return np.bitwise_count(x).sum(axis=1, dtype=np.int64)


# -- substrings ----------------------------------------------------------------


@dataclass(frozen=True)
class SubstringLayout:
    """Assignment of ``n`` bit positions to ``m`` equal substrings.

    Slot ``j`` of substring ``i`` holds original bit ``assignment[i * chunk_len + j]``.
    """

    n: int
    m: int
    assignment: tuple[int, ...]

    def __post_init__(self):
        if self.m < 1 or self.n % self.m:
            raise ValueError(f"n={self.n} is not divisible into m={self.m} substrings")
        if self.n // self.m > 32:
            raise ValueError("substrings longer than 32 bits do not fit a hash key")
        if sorted(self.assignment) != list(range(self.n)):
            raise ValueError("assignment must be a permutation of 0..n-1")

    @classmethod
    def contiguous(cls, n: int, m: int) -> SubstringLayout:
        return cls(n, m, tuple(range(n)))

    @property
    def chunk_len(self) -> int:
        return self.n // self.m

    @property
    def is_identity(self) -> bool:
        return self.assignment == tuple(range(self.n))

    def positions(self, i: int) -> tuple[int, ...]:
        if not 0 <= i < self.m:
            raise IndexError(f"substring index {i} out of range for m={self.m}")
        c = self.chunk_len
        return self.assignment[i * c : (i + 1) * c]

    def keys(self, words, n: int | None = None) -> np.ndarray:
        """Substring keys for every code in a packed collection, shape ``(count, m)``."""
        if n is not None and n != self.n:
            raise ValueError(f"layout is for n={self.n}, codes have n={n}")
        words = np.atleast_2d(np.asarray(words, dtype=np.uint64))
        c = self.chunk_len
        if self.is_identity and WORD_BITS % c == 0:
            # substrings never straddle a word boundary
            mask = np.uint64((1 << c) - 1)
            cols = [
                (words[:, (i * c) // WORD_BITS] >> np.uint64((i * c) % WORD_BITS)) & mask
                for i in range(self.m)
            ]
            return np.stack(cols, axis=1).astype(np.int64)
        bits = unpack_codes(words, self.n) > 0
        bits = bits[:, list(self.assignment)].reshape(-1, self.m, c)
        keys = np.zeros(bits.shape[:2], dtype=np.int64)
        for j in range(c):
            keys |= bits[:, :, j].astype(np.int64) << j
        return keys

    def save(self, path) -> None:
        Path(path).write_text(f"{self.n} {self.m}\n{' '.join(map(str, self.assignment))}\n")

    @classmethod
    def load(cls, path) -> SubstringLayout:
        tokens = Path(path).read_text().split()
        if len(tokens) < 2:
            raise ValueError(f"{path}: layout file needs 'n m' followed by a permutation")
        n, m = int(tokens[0]), int(tokens[1])
        perm = tuple(int(t) for t in tokens[2:])
        if len(perm) != n:
            raise ValueError(f"{path}: expected {n} positions, found {len(perm)}")
        return cls(n, m, perm)


def extract_substring(code: HashCode, layout: SubstringLayout, i: int) -> int:
    if code.n != layout.n:
        raise ValueError(f"code length {code.n} does not match layout n={layout.n}")
    key = 0
    for j, pos in enumerate(layout.positions(i)):
        key |= ((code.bits >> pos) & 1) << j
    return key


# -- binary code file ----------------------------------------------------------


def write_codes(path, words, n: int) -> None:
    words = np.atleast_2d(np.asarray(words, dtype=np.uint64))
    if words.shape[1] != n_words(n):
        raise ValueError(f"{words.shape[1]} words per code does not match n={n}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CODE_MAGIC, CODE_VERSION, n, len(words)))
        fh.write(words.astype("<u8").tobytes())


def read_codes(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated code file header")
    magic, version, n, count = _HEADER.unpack_from(data)
    if magic != CODE_MAGIC:
        raise ValueError(f"{path}: not a code file (magic {magic!r})")
    if version != CODE_VERSION:
        raise ValueError(f"{path}: unsupported code file version {version}")
    w = n_words(n)
    expected = _HEADER.size + count * w * 8
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    words = np.frombuffer(data, dtype="<u8", offset=_HEADER.size).reshape(count, w)
    return mask_padding(words.astype(np.uint64), n), n


def mask_padding(words: np.ndarray, n: int) -> np.ndarray:
    """Clear the bits past position ``n`` in the last word so they never count."""
    tail = n % WORD_BITS
    if tail:
        words = words.copy()
        words[:, -1] &= np.uint64((1 << tail) - 1)
    return words
