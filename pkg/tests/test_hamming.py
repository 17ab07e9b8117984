import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mish.hamming import (
    HashCode,
    SubstringLayout,
    codes_from_array,
    codes_to_array,
    distances_to,
    extract_substring,
    hamming_distance,
    pack_signs,
    read_codes,
    surrogate_distance,
    unpack_codes,
    write_codes,
)


def naive_distance(a: HashCode, b: HashCode) -> int:
    return sum(((a.bits >> i) & 1) != ((b.bits >> i) & 1) for i in range(a.n))


def gather_substring(code: HashCode, layout: SubstringLayout, i: int) -> int:
    c = layout.chunk_len
    value = 0
    for j in range(c):
        pos = layout.assignment[i * c + j]
        if code.bit(pos) == 1:
            value += 2**j
    return value


codes_64 = st.integers(min_value=0, max_value=2**64 - 1).map(lambda b: HashCode(64, b))


class TestHammingDistance:
    def test_identity(self):
        a = HashCode(64, 0xDEADBEEF)
        assert hamming_distance(a, a) == 0

    def test_four_bit_example(self):
        # written most-significant first: 1010 vs 0110
        assert hamming_distance(HashCode(4, 0b1010), HashCode(4, 0b0110)) == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            hamming_distance(HashCode(4, 1), HashCode(8, 1))

    @given(codes_64, codes_64)
    def test_matches_bit_loop(self, a, b):
        assert hamming_distance(a, b) == naive_distance(a, b)

    @given(codes_64, codes_64, codes_64)
    def test_metric_axioms(self, a, b, c):
        assert hamming_distance(a, b) == hamming_distance(b, a)
        assert (hamming_distance(a, b) == 0) == (a == b)
        assert hamming_distance(a, c) <= hamming_distance(a, b) + hamming_distance(b, c)

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(3)
        signs = rng.choice([-1, 1], size=(200, 100))
        words = pack_signs(signs)
        codes = codes_from_array(words, 100)
        d = distances_to(words, words[7])
        assert d.tolist() == [hamming_distance(c, codes[7]) for c in codes]


class TestPacking:
    @pytest.mark.parametrize("n", [1, 16, 32, 63, 64, 65, 128, 130])
    def test_roundtrip(self, n):
        rng = np.random.default_rng(n)
        signs = rng.choice([-1, 1], size=(20, n)).astype(np.int8)
        words = pack_signs(signs)
        assert words.shape == (20, (n + 63) // 64)
        np.testing.assert_array_equal(unpack_codes(words, n), signs)
        for row, code in zip(signs, codes_from_array(words, n)):
            np.testing.assert_array_equal(code.to_signs(), row)
            assert HashCode.from_signs(row) == code

    def test_bit_order(self):
        code = HashCode.from_signs([1] + [-1] * 63 + [1])
        assert code.words.tolist() == [1, 1]

    def test_mixed_lengths_rejected(self):
        with pytest.raises(ValueError):
            codes_to_array([HashCode(8, 1), HashCode(16, 1)])

    def test_code_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        words = pack_signs(rng.choice([-1, 1], size=(50, 96)))
        write_codes(tmp_path / "c.mihc", words, 96)
        back, n = read_codes(tmp_path / "c.mihc")
        assert n == 96
        np.testing.assert_array_equal(back, words)

    def test_code_file_header(self, tmp_path):
        write_codes(tmp_path / "c.mihc", np.array([[0xFF]], dtype=np.uint64), 32)
        raw = (tmp_path / "c.mihc").read_bytes()
        assert raw[:4] == b"MIHC"
        assert raw[4] == 1
        assert int.from_bytes(raw[5:7], "little") == 32
        assert int.from_bytes(raw[7:15], "little") == 1
        assert int.from_bytes(raw[15:23], "little") == 0xFF
        assert len(raw) == 23

    def test_padding_bits_masked_on_read(self, tmp_path):
        write_codes(tmp_path / "c.mihc", np.array([[2**40 + 1]], dtype=np.uint64), 32)
        back, _ = read_codes(tmp_path / "c.mihc")
        assert back.tolist() == [[1]]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(19))
        with pytest.raises(ValueError, match="not a code file"):
            read_codes(tmp_path / "x")

    def test_truncated(self, tmp_path):
        write_codes(tmp_path / "c.mihc", np.zeros((3, 1), dtype=np.uint64), 64)
        data = (tmp_path / "c.mihc").read_bytes()
        (tmp_path / "c.mihc").write_bytes(data[:-4])
        with pytest.raises(ValueError, match="expected"):
            read_codes(tmp_path / "c.mihc")


class TestSubstrings:
    def test_contiguous_split(self):
        layout = SubstringLayout.contiguous(32, 2)
        code = HashCode(32, 0xFFFF0000)
        assert [extract_substring(code, layout, i) for i in range(2)] == [0x0000, 0xFFFF]

    def test_swapped_halves(self):
        layout = SubstringLayout(32, 2, tuple(range(16, 32)) + tuple(range(16)))
        code = HashCode(32, 0xFFFF0000)
        assert [extract_substring(code, layout, i) for i in range(2)] == [0xFFFF, 0x0000]

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            extract_substring(HashCode(32, 0), SubstringLayout.contiguous(32, 2), 2)

    def test_invalid_layouts(self):
        with pytest.raises(ValueError):
            SubstringLayout(8, 3, tuple(range(8)))
        with pytest.raises(ValueError):
            SubstringLayout(4, 2, (0, 0, 1, 2))
        with pytest.raises(ValueError):
            SubstringLayout.contiguous(64, 1)

    @settings(max_examples=50)
    @given(st.data())
    def test_matches_gather_and_reconstructs(self, data):
        n, m = data.draw(st.sampled_from([(8, 2), (16, 4), (32, 2), (64, 4), (96, 4), (128, 8)]))
        perm = tuple(data.draw(st.permutations(range(n))))
        layout = SubstringLayout(n, m, perm)
        code = HashCode(n, data.draw(st.integers(0, 2**n - 1)))
        keys = [extract_substring(code, layout, i) for i in range(m)]
        assert keys == [gather_substring(code, layout, i) for i in range(m)]
        # concatenate the substrings and undo the permutation
        bits = 0
        for i, key in enumerate(keys):
            for j in range(layout.chunk_len):
                if (key >> j) & 1:
                    bits |= 1 << perm[i * layout.chunk_len + j]
        assert bits == code.bits
        np.testing.assert_array_equal(layout.keys(code.words[None, :])[0], keys)

    @settings(max_examples=50)
    @given(st.data())
    def test_substring_distances_sum_to_total(self, data):
        n, m = data.draw(st.sampled_from([(16, 2), (32, 4), (64, 4)]))
        layout = SubstringLayout(n, m, tuple(data.draw(st.permutations(range(n)))))
        a = HashCode(n, data.draw(st.integers(0, 2**n - 1)))
        b = HashCode(n, data.draw(st.integers(0, 2**n - 1)))
        parts = [
            (extract_substring(a, layout, i) ^ extract_substring(b, layout, i)).bit_count()
            for i in range(m)
        ]
        assert sum(parts) == hamming_distance(a, b)

    def test_vectorised_keys_general_layout(self):
        rng = np.random.default_rng(1)
        layout = SubstringLayout(48, 4, tuple(rng.permutation(48).tolist()))
        words = pack_signs(rng.choice([-1, 1], size=(30, 48)))
        keys = layout.keys(words)
        for row, code in zip(keys, codes_from_array(words, 48)):
            assert row.tolist() == [extract_substring(code, layout, i) for i in range(4)]

    def test_layout_file_roundtrip(self, tmp_path):
        layout = SubstringLayout(8, 2, (3, 1, 0, 2, 7, 5, 6, 4))
        layout.save(tmp_path / "l.txt")
        assert (tmp_path / "l.txt").read_text().splitlines() == ["8 2", "3 1 0 2 7 5 6 4"]
        assert SubstringLayout.load(tmp_path / "l.txt") == layout


class TestSurrogate:
    def test_identical(self):
        a = np.array([1, -1, 1, 1])
        assert surrogate_distance(a, a) == 0

    def test_opposite(self):
        a = np.array([1, -1, 1, 1, -1, -1, 1])
        assert surrogate_distance(a, -a) == 7

    @pytest.mark.parametrize("n", range(1, 13))
    def test_exhaustive_against_hamming(self, n):
        # every pair sharing a fixed first code; the other side sweeps all 2^n
        rng = np.random.default_rng(n)
        for a_bits in rng.integers(0, 2**n, size=4):
            a = HashCode(n, int(a_bits))
            for b_bits in range(2**n):
                b = HashCode(n, b_bits)
                assert surrogate_distance(a.to_signs(), b.to_signs()) == hamming_distance(a, b)

    def test_small_n_all_pairs(self):
        n = 5
        codes = [HashCode(n, b) for b in range(2**n)]
        for a, b in itertools.product(codes, codes):
            assert surrogate_distance(a.to_signs(), b.to_signs()) == hamming_distance(a, b)
