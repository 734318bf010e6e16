import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tellme.config import ConfigError
from tellme.special import (
    AccessCounter,
    NormParams,
    RopeParams,
    absmax_quantize,
    quantize_with_scale,
    rmsnorm,
    rmsnorm_quant_fused,
    rope_apply,
    silu,
    silu_fused,
)
from tellme.tlmm import NumericError, dequantize_output

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_absmax_by_hand():
    q = absmax_quantize([-2.0, 1.0])
    assert q.data.tolist() == [-127, 64]  # 63.5 rounds half-even to 64
    assert q.scale == pytest.approx(2 / 127)


def test_absmax_zero_vector():
    q = absmax_quantize(np.zeros(5))
    assert not q.data.any() and q.scale == 1.0


def test_absmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        absmax_quantize([1.0, np.nan])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 100), elements=finite))
def test_quantization_round_trip_bound(x):
    q = absmax_quantize(x)
    err = np.abs(q.data * q.scale - x)
    assert np.all(err <= q.scale / 2 + 1e-12 * np.abs(x).max())
    assert q.data.min() >= -127


def test_per_row_scales(rng):
    x = rng.standard_normal((3, 10)) * np.array([[1.0], [10.0], [0.1]])
    q = absmax_quantize(x)
    np.testing.assert_allclose(q.scale, np.abs(x).max(axis=1) / 127)
    assert np.all(np.abs(q.data).max(axis=1) == 127)


def test_quantize_with_scale_counts_saturation():
    q, sat = quantize_with_scale([0.5, 3.0, -3.0], 1 / 127)
    assert q.tolist() == [64, 127, -127]
    assert sat == 2


def test_rmsnorm_quant_uniform_vector():
    x = np.full(4, 3.0)
    q = rmsnorm_quant_fused(x, NormParams(np.ones(4), eps=1e-12))
    assert q.data.tolist() == [127] * 4
    assert q.scale == pytest.approx(1 / 127)


def test_rmsnorm_quant_zero_vector():
    q = rmsnorm_quant_fused(np.zeros(7), NormParams(np.ones(7)))
    assert not q.data.any() and q.scale == 1.0


def _unfused_fp64(x, gamma, eps):
    y = x * gamma / np.sqrt(np.mean(x**2) + eps)
    amax = np.abs(y).max()
    return y, amax


def test_fused_matches_fp64_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(1, 300))
        x = rng.standard_normal(n) * rng.uniform(0.01, 100)
        gamma = rng.uniform(0.5, 1.5, n)
        q = rmsnorm_quant_fused(x, NormParams(gamma))
        y, amax = _unfused_fp64(x, gamma, 1e-5)
        assert np.all(np.abs(q.data * q.scale - y) <= amax / 127 * 0.5 + 1e-12)


def test_fused_equals_unfused_bitwise(rng):
    for _ in range(200):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 200)))
        x = rng.standard_normal(shape) * rng.uniform(0.01, 50)
        params = NormParams(rng.uniform(0.5, 1.5, shape[1]))
        fused = rmsnorm_quant_fused(x, params)
        unfused = absmax_quantize(rmsnorm(x, params))
        np.testing.assert_array_equal(fused.data, unfused.data)
        np.testing.assert_array_equal(fused.scale, unfused.scale)


@pytest.mark.parametrize("n", [1, 31, 32, 33, 100, 1536])
def test_fused_reads_each_element_twice(n):
    counter = AccessCounter()
    rmsnorm_quant_fused(np.linspace(-1, 1, n), NormParams(np.ones(n)), counter)
    assert counter.reads == 2 * n


def test_silu_values():
    assert silu(0.0) == 0.0
    assert silu(50.0) == pytest.approx(50.0, abs=1e-6)
    assert abs(silu(-50.0)) < 1e-18
    assert np.isfinite(silu(-1e4))


def test_silu_matches_reference(rng):
    x = rng.uniform(-20, 20, 10_000)
    ref = x / (1 + np.exp(-x))
    np.testing.assert_allclose(silu(x), ref, rtol=1e-6, atol=1e-300)


def test_silu_odd_part_identity(rng):
    x = rng.uniform(-30, 30, 1000)
    np.testing.assert_allclose(silu(x) - silu(-x), x, atol=1e-6)


def test_silu_monotone_on_positive(rng):
    x = np.sort(rng.uniform(0, 30, 500))
    assert np.all(np.diff(silu(x)) >= 0)


def test_silu_fused_runs_in_place_without_big_temporaries():
    x = np.linspace(-5, 5, 1 << 16)
    expect = x / (1 + np.exp(-x))
    tracemalloc.start()
    try:
        out = silu_fused(x)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert out is x
    assert peak < x.nbytes // 8
    np.testing.assert_allclose(x, expect, rtol=1e-12)


def test_silu_as_dequant_post_hook():
    acc = np.array([[-4, 0, 9]], dtype=np.int32)
    tracemalloc.start()
    out = dequantize_output(acc, 0.5, 1.0, post=silu_fused)
    tracemalloc.stop()
    ref = acc * 0.5
    np.testing.assert_allclose(out, ref / (1 + np.exp(-ref)))


def test_rope_identity_at_position_zero(rng):
    x = rng.standard_normal((3, 1, 8))
    out = rope_apply(x, [0], RopeParams(8, 16))
    np.testing.assert_allclose(out, x, atol=0)


def test_rope_preserves_pair_norms(rng):
    params = RopeParams(16, 64)
    x = rng.standard_normal((2, 10, 16))
    out = rope_apply(x, np.arange(10) * 5, params)
    n_in = np.hypot(x[..., 0::2], x[..., 1::2])
    n_out = np.hypot(out[..., 0::2], out[..., 1::2])
    np.testing.assert_allclose(n_out, n_in, atol=1e-6)


def test_rope_relative_positions(rng):
    params = RopeParams(8, 128)
    q, k = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))

    def score(m, n):
        return float(rope_apply(q, [m], params)[0] @ rope_apply(k, [n], params)[0])

    assert score(10, 3) == pytest.approx(score(57, 50), abs=1e-5)
    assert score(0, 0) == pytest.approx(score(99, 99), abs=1e-5)


def test_rope_pair_rotation_by_hand():
    params = RopeParams(2, 4, theta=10000.0)
    out = rope_apply(np.array([[1.0, 0.0]]), [1], params)
    np.testing.assert_allclose(out, [[np.cos(1.0), np.sin(1.0)]])


def test_rope_rejects_odd_dim_and_bad_position():
    with pytest.raises(ConfigError):
        RopeParams(7)
    with pytest.raises(IndexError):
        rope_apply(np.zeros((1, 4)), [8], RopeParams(4, 8))


def test_subnormal_row_quantises_to_zero():
    q = absmax_quantize(np.array([[5e-324, -1e-310], [1.0, 0.5]]))
    assert q.data[0].tolist() == [0, 0] and q.scale[0] == 1.0
    assert q.data[1].tolist() == [127, 64]
    fused = rmsnorm_quant_fused(np.array([0.0, 5e-324]), NormParams(np.ones(2)))
    assert not fused.data.any() and fused.scale == 1.0
