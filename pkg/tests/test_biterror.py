import math
from pathlib import Path

import numpy as np
import pytest

from bitrobust.biterror import (
    ChipField,
    ErrorStream,
    ProfiledMap,
    apply_mask,
    binomial_tolerance,
    expected_flips,
    inject_linf,
    inject_profiled,
    inject_random,
    popcount,
    profiled_mask,
    sample_chips,
)
from bitrobust.fixedpoint import NORMAL, RQUANT, QuantizedTensor, QuantParams, dequantize, quantize_weights

GOLDEN = Path(__file__).parent / "data" / "chipfield_golden.txt"
M64 = (1 << 64) - 1


def splitmix_u(seed, i, j):
    """Independent scalar reimplementation of the documented field."""

    def fin(z):
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        return z ^ (z >> 31)

    state = (fin(seed) + (i * 8 + j + 1) * 0x9E3779B97F4A7C15) & M64
    return (fin(state) >> 11) / 2.0 ** 53


def codes(W=1000, m=8, seed=0):
    w = np.random.default_rng(seed).normal(size=W)
    return quantize_weights(w, [(0, W)], RQUANT.replace(m=m))


def test_field_matches_scalar_oracle():
    chip = ChipField(123456789, 50, 8)
    u = chip.uniform()
    for i in (0, 1, 17, 49):
        for j in range(8):
            assert u[i, j] == splitmix_u(123456789, i, j)


def test_field_independent_of_m_and_chunking():
    a = ChipField(7, 100, 8).uniform()
    b = ChipField(7, 100, 4).uniform()
    np.testing.assert_array_equal(a[:, :4], b)
    np.testing.assert_array_equal(ChipField(7, 100, 8).uniform(30, 60), a[30:60])
    assert a.min() >= 0.0 and a.max() < 1.0


def test_golden_field():
    rows = [ln.split() for ln in GOLDEN.read_text().splitlines() if ln and not ln.startswith("#")]
    assert rows
    for seed, i, j, bits in rows:
        u = ChipField(int(seed), int(i) + 1, 8).uniform(int(i), int(i) + 1)[0, int(j)]
        assert np.float64(u).view(np.uint64) == int(bits, 16), (seed, i, j)


def test_p_zero_is_identity():
    q = codes()
    out, rep = inject_random(q, ChipField(1, q.size, 8), 0.0)
    np.testing.assert_array_equal(out.codes, q.codes)
    assert rep.flipped_bits == 0 and rep.affected_weights == 0


def test_p_one_flips_every_stored_bit():
    q = codes(m=8)
    out, rep = inject_random(q, ChipField(1, q.size, 8), 1.0)
    np.testing.assert_array_equal(out.codes, q.codes ^ 0xFF)
    assert rep.flipped_bits == 8 * q.size
    q4 = codes(m=4)
    out4, _ = inject_random(q4, ChipField(1, q4.size, 4), 1.0)
    np.testing.assert_array_equal(out4.codes, q4.codes ^ 0x0F)


def test_msb_flip_semantics():
    params = QuantParams.for_range(-1, 1, RQUANT)
    q = QuantizedTensor(np.array([127], dtype=np.uint8), [params], RQUANT, [(0, 1)])
    flipped, rep = apply_mask(q, np.array([0x80], dtype=np.uint8))
    assert flipped.codes[0] == 255 and rep.flipped_bits == 1
    signed = QuantizedTensor(np.array([127], dtype=np.uint8), [QuantParams.for_range(-1, 1, NORMAL)], NORMAL, [(0, 1)])
    flipped, _ = apply_mask(signed, np.array([0x80], dtype=np.uint8))
    assert dequantize(flipped)[0] == pytest.approx(-1 / 127)


def test_input_not_modified_and_dimension_mismatch():
    q = codes()
    before = q.codes.copy()
    inject_random(q, ChipField(3, q.size, 8), 0.3)
    np.testing.assert_array_equal(q.codes, before)
    with pytest.raises(ValueError):
        inject_random(q, ChipField(3, q.size + 1, 8), 0.1)
    with pytest.raises(ValueError):
        inject_random(q, ChipField(3, q.size, 4), 0.1)
    with pytest.raises(ValueError):
        inject_random(q, ChipField(3, q.size, 8), 1.5)


def test_expected_flips_large_network():
    assert expected_flips(0.01, 8, 5_498_378) == pytest.approx(439_870.24)


def test_persistence_subset():
    chip = ChipField(99, 5000, 8)
    masks = chip.flip_masks([0.001, 0.01, 0.05, 0.2])
    for lo, hi in zip(masks, masks[1:]):
        assert not np.any(lo & ~hi)


def test_involution():
    q = codes()
    chip = ChipField(5, q.size, 8)
    once, _ = inject_random(q, chip, 0.2)
    twice, _ = inject_random(once, chip, 0.2)
    np.testing.assert_array_equal(twice.codes, q.codes)


def test_binomial_count():
    W, m, p = 100_000, 8, 0.01
    q = codes(W=W)
    _, rep = inject_random(q, ChipField(11, W, m), p)
    assert abs(rep.flipped_bits - p * m * W) <= binomial_tolerance(p, m, W)
    assert rep.flipped_bits <= m * W


def test_popcount():
    assert popcount(np.array([0, 1, 3, 255], dtype=np.uint8)) == 11


def test_sample_chips_deterministic_and_independent():
    a = sample_chips(42, 50, 10_000, 8)
    b = sample_chips(42, 50, 10_000, 8)
    assert a == b and len(a) == 50
    assert len({c.chip_seed for c in a}) == 50
    p = 0.1
    e0 = a[0].uniform() <= p
    e1 = a[1].uniform() <= p
    both = np.mean(e0 & e1)
    n = e0.size
    assert abs(both - p * p) < 4 * math.sqrt(p * p * (1 - p * p) / n)
    with pytest.raises(ValueError):
        sample_chips(42, 0, 10, 8)


def test_error_stream_fresh_patterns():
    stream = ErrorStream(5)
    c1, c2 = stream.next_chip(1000, 8), stream.next_chip(1000, 8)
    assert not np.array_equal(c1.flip_mask(0.01), c2.flip_mask(0.01))
    again = ErrorStream(5)
    assert again.next_chip(1000, 8) == c1


# profiled maps


def make_map(rows, cols, p01=0.0, p10=0.0):
    n = rows * cols
    return ProfiledMap(rows, cols, np.full(n, p01), np.full(n, p10))


def test_zero_map_is_identity():
    q = codes(W=300)
    out = inject_profiled(q, make_map(16, 32), 5, 0)
    np.testing.assert_array_equal(out.codes, q.codes)


def test_single_deterministic_cell():
    q = codes(W=20)
    q.codes[0] &= 0xFE
    pmap = make_map(8, 32)  # 256 cells >= 160 bits, no wrap-around
    pmap.p01[0] = 1.0
    out = inject_profiled(q, pmap, 0, 123)
    assert out.codes[0] == q.codes[0] | 1
    np.testing.assert_array_equal(out.codes[1:], q.codes[1:])
    # a stored 1 in that cell is governed by p10 = 0, so nothing flips
    q.codes[0] |= 1
    np.testing.assert_array_equal(inject_profiled(q, pmap, 0, 123).codes, q.codes)


def test_cell_mapping_with_offset_and_wraparound():
    m = 8
    q = QuantizedTensor(np.zeros(10, dtype=np.uint8), [QuantParams.for_range(-1, 1, RQUANT)], RQUANT, [(0, 10)])
    pmap = make_map(2, 16)  # 32 cells < 80 bits, wraps around
    pmap.p01[5] = 1.0
    offset = 3
    mask = profiled_mask(q, pmap, offset, 0)
    expected = np.zeros(10, dtype=np.uint8)
    for i in range(10):
        for j in range(m):
            if (offset + i * m + j) % 32 == 5:
                expected[i] |= 1 << j
    np.testing.assert_array_equal(mask, expected)


def test_profiled_deterministic():
    q = codes(W=2000)
    gen = np.random.default_rng(0)
    pmap = ProfiledMap(64, 128, gen.uniform(0, 0.05, 8192), gen.uniform(0, 0.05, 8192))
    a = inject_profiled(q, pmap, 100, 9)
    b = inject_profiled(q, pmap, 100, 9)
    np.testing.assert_array_equal(a.codes, b.codes)
    assert not np.array_equal(a.codes, q.codes)


def test_profiled_map_validation(tmp_path):
    with pytest.raises(ValueError, match="NaN"):
        ProfiledMap(1, 2, [0.0, np.nan], [0.0, 0.0])
    with pytest.raises(ValueError):
        ProfiledMap(1, 2, [0.0, 1.5], [0.0, 0.0])
    with pytest.raises(ValueError, match="cells"):
        ProfiledMap(2, 2, [0.0], [0.0])
    q = codes(W=4)
    with pytest.raises(ValueError, match="offset"):
        profiled_mask(q, make_map(2, 2), 4, 0)


def test_profiled_map_file_roundtrip(tmp_path):
    pmap = ProfiledMap(2, 3, [0, 0.5, 1, 0, 0.25, 0], [0.125, 0, 0, 1, 0, 0], label="chip1 0.86V")
    path = tmp_path / "map.txt"
    pmap.save(path)
    back = ProfiledMap.load(path)
    assert (back.rows, back.cols) == (2, 3)
    np.testing.assert_array_equal(back.p01, pmap.p01)
    np.testing.assert_array_equal(back.p10, pmap.p10)
    path.write_text("# comment\n1 2\n0.1 0.2\n# another\nnan 0\n")
    with pytest.raises(ValueError, match="NaN"):
        ProfiledMap.load(path)
    path.write_text("1 2\n0.1 0.2\n")
    with pytest.raises(ValueError):
        ProfiledMap.load(path)


# L-inf noise


def test_linf_zero_is_identity():
    w = np.random.default_rng(0).normal(size=100)
    np.testing.assert_array_equal(inject_linf(w, [(0, 100)], 0.0, 1), w)


def test_linf_support_and_determinism():
    w = np.random.default_rng(0).normal(size=1000)
    groups = [(0, 600), (600, 1000)]
    out = inject_linf(w, groups, 0.05, 7)
    for s, e in groups:
        r = w[s:e].max() - w[s:e].min()
        assert np.max(np.abs(out[s:e] - w[s:e])) <= 0.05 * r
    assert np.all(out != w)
    np.testing.assert_array_equal(out, inject_linf(w, groups, 0.05, 7))
    with pytest.raises(ValueError):
        inject_linf(w, groups, -0.1, 7)


@pytest.mark.parametrize("m", [2, 5, 8])
def test_compiled_masks_match_field(m):
    chip = ChipField(2024, 3000, m)
    u = chip.uniform()
    ps = [0.0, 0.003, 0.05, 0.5, 1.0]
    for p, mask in zip(ps, chip.flip_masks(ps)):
        expected = ((u <= p).astype(np.uint8) << np.arange(m, dtype=np.uint8)).sum(axis=1)
        np.testing.assert_array_equal(mask, expected)
