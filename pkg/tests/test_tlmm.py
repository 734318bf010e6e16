import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tellme.packing import ShapeError, decode_group, encode_group, pack_matrix
from tellme.tlmm import (
    NumericError,
    QuantTensor,
    dequantize_output,
    half_table_address,
    half_table_setup,
    iter_tl_matmul,
    naive_ternary_matmul,
    partial_table_matmul,
    table_setup,
    tl_matmul,
)

from conftest import random_trits


def brute_force(a, w):
    """Triple loop over python ints."""
    m, n = a.shape
    k = w.shape[1]
    out = np.zeros((m, k), dtype=np.int64)
    for i in range(m):
        for j in range(k):
            out[i, j] = sum(int(a[i, x]) * int(w[x, j]) for x in range(n))
    return out


def test_table_setup_g2_by_hand():
    table = table_setup([3, 5], group_size=2, tables=1)
    assert table.shape == (1, 9)
    assert table[0, 0] == -8
    assert table[0, 4] == 0
    assert table[0, 8] == 8
    assert table[0, encode_group([1, -1])] == -2
    for idx in range(9):
        t0, t1 = decode_group(idx, 2)
        assert table[0, idx] == 3 * t0 + 5 * t1


def test_table_setup_single_trit():
    table = table_setup([1, 0, 0], group_size=3, tables=1)
    assert table[0, 14] == 1
    assert table[0, 13] == 0


def test_table_entries_match_enumeration(rng):
    for g, t in [(2, 4), (3, 32), (4, 8)]:
        block = rng.integers(-127, 128, size=t * g)
        table = table_setup(block, g, t)
        mid = (3**g - 1) // 2
        assert not table[:, mid].any()
        for ti in range(t):
            for idx in range(3**g):
                trits = decode_group(idx, g)
                assert table[ti, idx] == sum(tr * int(a) for tr, a in zip(trits, block[ti * g:(ti + 1) * g]))


def test_table_setup_length_check():
    with pytest.raises(ShapeError):
        table_setup([1, 2], group_size=3, tables=1)


def test_hand_sum():
    a = QuantTensor(np.array([[1, 2, 3]]), 1.0)
    w = np.array([[1], [1], [1]])
    assert tl_matmul(a, pack_matrix(w, 3, 32)).tolist() == [[6]]
    assert naive_ternary_matmul(a, w).tolist() == [[6]]


def test_zero_weights_give_zero(rng):
    a = QuantTensor(rng.integers(-127, 128, size=(3, 10)), 1.0)
    assert not tl_matmul(a, pack_matrix(np.zeros((10, 4)), 3, 2)).any()


def test_naive_selects_and_negates(rng):
    a = QuantTensor(rng.integers(-127, 128, size=(2, 5)), 1.0)
    w = np.zeros((5, 3), dtype=np.int8)
    w[2, 1] = 1
    w[4, 2] = -1
    out = naive_ternary_matmul(a, w)
    np.testing.assert_array_equal(out[:, 1], a.data[:, 2])
    np.testing.assert_array_equal(out[:, 2], -a.data[:, 4].astype(int))


def test_kernels_match_brute_force(rng):
    for _ in range(30):
        m, n, k = rng.integers(1, 5), rng.integers(1, 40), rng.integers(1, 12)
        g, t = [(2, 4), (3, 2), (4, 1)][int(rng.integers(3))]
        a = rng.integers(-127, 128, size=(m, n))
        w = random_trits(rng, (n, k))
        expect = brute_force(a, w)
        qa = QuantTensor(a, 1.0)
        p = pack_matrix(w, g, t)
        np.testing.assert_array_equal(naive_ternary_matmul(qa, w), expect)
        np.testing.assert_array_equal(tl_matmul(qa, p, q_lanes=int(rng.integers(1, 6))), expect)
        np.testing.assert_array_equal(partial_table_matmul(qa, p, q_lanes=3), expect)


def test_two_hundred_random_instances(rng):
    for _ in range(200):
        m, n, k = rng.integers(1, 9), rng.integers(1, 97), rng.integers(1, 65)
        a = QuantTensor(rng.integers(-127, 128, size=(m, n)), 1.0)
        w = random_trits(rng, (n, k))
        np.testing.assert_array_equal(tl_matmul(a, pack_matrix(w, 3, 32), 16), naive_ternary_matmul(a, w))


def test_row_streaming_matches_batch(rng):
    a = QuantTensor(rng.integers(-127, 128, size=(5, 50)), 1.0)
    p = pack_matrix(random_trits(rng, (50, 7)), 3, 4)
    rows = list(iter_tl_matmul(a, p, q_lanes=2, row_tile=1))
    assert len(rows) == 5 and all(r.shape == (7,) for r in rows)
    np.testing.assert_array_equal(np.stack(rows), tl_matmul(a, p))


def test_shape_mismatch():
    a = QuantTensor(np.ones((1, 4)), 1.0)
    p = pack_matrix(np.zeros((5, 2)), 3, 1)
    with pytest.raises(ShapeError):
        tl_matmul(a, p)
    with pytest.raises(ShapeError):
        naive_ternary_matmul(a, np.zeros((5, 2)))
    with pytest.raises(ShapeError):
        partial_table_matmul(a, p)


def test_half_table_mirror_and_zero():
    g = 3
    slot, sign = half_table_address(np.arange(27), g)
    assert slot[13] == 0 and sign[13] == 1
    block = np.array([7, -3, 11])
    full = table_setup(block, g, 1)[0]
    half = half_table_setup(block, g, 1)[0]
    assert half.shape == (14,) and half[0] == 0
    for i in range(27):
        assert full[i] == -full[26 - i]
        assert sign[i] * half[slot[i]] == full[i]


def test_linearity_without_saturation(rng):
    a1 = rng.integers(-60, 61, size=(3, 30))
    a2 = rng.integers(-60, 61, size=(3, 30))
    p = pack_matrix(random_trits(rng, (30, 9)), 3, 4)
    lhs = tl_matmul(QuantTensor(a1 + a2, 1.0), p)
    rhs = tl_matmul(QuantTensor(a1, 1.0), p) + tl_matmul(QuantTensor(a2, 1.0), p)
    np.testing.assert_array_equal(lhs, rhs)


def test_accumulator_extremes():
    n = 2**16
    a = QuantTensor(np.full((1, n), 127), 1.0)
    for sign in (1, -1):
        w = np.full((n, 2), sign, dtype=np.int8)
        out = tl_matmul(a, pack_matrix(w, 3, 32))
        assert out.dtype == np.int32
        assert out.tolist() == [[sign * 127 * n] * 2]
    assert 127 * n < 2**31 - 1


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 4), n=st.integers(1, 70), k=st.integers(1, 20),
       cfg=st.sampled_from([(2, 4), (3, 32), (4, 8), (1, 3)]), seed=st.integers(0, 2**31))
def test_three_kernels_agree(m, n, k, cfg, seed):
    rng = np.random.default_rng(seed)
    a = QuantTensor(rng.integers(-127, 128, size=(m, n)), 1.0)
    w = random_trits(rng, (n, k))
    p = pack_matrix(w, *cfg)
    ref = naive_ternary_matmul(a, w)
    np.testing.assert_array_equal(tl_matmul(a, p, 5), ref)
    np.testing.assert_array_equal(partial_table_matmul(a, p, 5), ref)


def test_dequantize_examples():
    np.testing.assert_allclose(dequantize_output(np.array([6]), 0.5, 2.0), [6.0])
    assert not dequantize_output(np.zeros(4, dtype=np.int32), 0.3, 7.0).any()
    with pytest.raises(NumericError):
        dequantize_output(np.array([1]), np.inf, 1.0)
    with pytest.raises(NumericError):
        dequantize_output(np.array([1]), 1.0, float("nan"))


def test_dequantize_per_row_and_post_hook():
    acc = np.array([[1, 2], [3, 4]], dtype=np.int32)
    seen = []
    out = dequantize_output(acc, np.array([1.0, 0.5]), 2.0, post=lambda buf: seen.append(buf))
    np.testing.assert_allclose(out, [[2, 4], [3, 4]])
    assert seen[0] is out


def test_quantized_matmul_tracks_fp32_product(rng):
    from tellme.special import absmax_quantize

    x = rng.standard_normal((4, 64))
    w = random_trits(rng, (64, 16))
    xq = absmax_quantize(x)
    out = dequantize_output(tl_matmul(xq, pack_matrix(w, 3, 32)), xq.row_scale(), 1.0)
    exact = x @ w
    # per element error <= half a quantisation step per nonzero weight
    bound = (np.abs(x).max(axis=1, keepdims=True) / 254) * np.abs(w).sum(axis=0)[None, :]
    assert np.all(np.abs(out - exact) <= bound + 1e-12)


def test_quant_tensor_validation():
    with pytest.raises(ValueError):
        QuantTensor(np.array([[-128]]), 1.0)
    with pytest.raises(ValueError):
        QuantTensor(np.array([[1]]), 0.0)
