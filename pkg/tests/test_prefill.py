import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tellme.prefill import (
    EmptyStreamError,
    PrefillBatch,
    dense_schedule_attention,
    finalize,
    naive_causal_attention,
    online_step,
    reverse_prefill_attention,
)
from tellme.tlmm import NumericError


def fold(scores, values, order=None):
    order = range(len(scores)) if order is None else order
    state = None
    for j in order:
        state = online_step(state, scores[j], values[j])
    return finalize(state)


def softmax_oracle(scores, values):
    s = np.asarray(scores, dtype=np.float64)
    w = np.exp(s - s.max())
    return (w / w.sum()) @ np.asarray(values, dtype=np.float64)


def random_batch(rng, n, h=2, d=8, p=4, per_token=False):
    q, k, v = (rng.integers(-127, 128, size=(h, n, d)).astype(np.int8) for _ in range(3))
    if per_token:
        scales = [rng.uniform(0.002, 0.02, n) for _ in range(3)]
    else:
        scales = [0.01, 0.012, 0.008]
    return PrefillBatch(q, k, v, *scales, p=p)


def test_first_step_initialisation():
    st_ = online_step(None, 2.5, np.array([1.0, -1.0]))
    assert st_.m == 2.5 and st_.l == 1.0
    np.testing.assert_array_equal(st_.o, [1.0, -1.0])


def test_single_step_returns_value_exactly():
    v = np.array([0.3, -7.0, 1e-3])
    np.testing.assert_array_equal(fold([4.2], [v]), v)


def test_equal_scores_average():
    v1, v2 = np.array([1.0, 2.0]), np.array([3.0, -6.0])
    np.testing.assert_allclose(fold([0.7, 0.7], [v1, v2]), (v1 + v2) / 2)


def test_saturation_to_large_score():
    v1, v2 = np.array([1.0, 2.0]), np.array([3.0, -6.0])
    np.testing.assert_allclose(fold([0.0, 50.0], [v1, v2]), v2, atol=1e-6)


def test_random_stream_vs_softmax(rng):
    s = rng.normal(size=8) * 3
    v = rng.normal(size=(8, 5))
    np.testing.assert_allclose(fold(s, v), softmax_oracle(s, v), rtol=1e-6)


def test_running_max_non_decreasing_and_denominator_positive(rng):
    state = None
    prev = -np.inf
    for s in rng.normal(size=50) * 5:
        state = online_step(state, s, np.zeros(2))
        assert state.m >= prev and state.l > 0
        prev = state.m


def test_finalize_without_steps():
    with pytest.raises(EmptyStreamError):
        finalize(None)


def test_nonfinite_score_rejected():
    with pytest.raises(NumericError):
        online_step(None, np.nan, np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 64), seed=st.integers(0, 2**31))
def test_order_independence(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n) * 4
    v = rng.normal(size=(n, 3))
    np.testing.assert_allclose(fold(s, v, rng.permutation(n)), fold(s, v), rtol=1e-6, atol=1e-12)


def test_naive_single_token_is_v(rng):
    b = random_batch(rng, 1)
    np.testing.assert_allclose(naive_causal_attention(b), (b.v[:, 0, :] * 0.008).reshape(1, -1))


def test_naive_zero_scores_is_prefix_mean(rng):
    b = random_batch(rng, 6)
    b.q[:] = 0
    v = b.v.astype(np.float64) * 0.008
    expect = np.stack([v[:, : i + 1].mean(axis=1).reshape(-1) for i in range(6)])
    np.testing.assert_allclose(naive_causal_attention(b), expect, atol=1e-12)


@pytest.mark.parametrize("p", [1, 3, 4, 9])
def test_reverse_single_token(rng, p):
    b = random_batch(rng, 1, p=p)
    out, trace = reverse_prefill_attention(b)
    np.testing.assert_array_equal(out, (b.v[:, 0, :].astype(np.float32) * np.float32(0.008)).reshape(1, -1))
    assert trace.kv_loads == 1


def test_reverse_n8_p4(rng):
    b = random_batch(rng, 8, p=4)
    out, trace = reverse_prefill_attention(b)
    np.testing.assert_allclose(out, naive_causal_attention(b), atol=1e-5)
    assert trace.kv_loads == 8 * 8 / (2 * 4) + 8 / 2 == 12
    assert trace.iterations == 12


def test_reverse_schedule_contract(rng):
    b = random_batch(rng, 10, p=4)
    _, trace = reverse_prefill_attention(b)
    q_by_batch, kv_by_batch, evicted = {}, {}, []
    for kind, batch, tok in trace.events:
        if kind == "q":
            q_by_batch.setdefault(batch, []).append(tok)
        elif kind == "kv":
            kv_by_batch.setdefault(batch, []).append(tok)
        else:
            evicted.append((batch, tok))
    assert q_by_batch == {0: [10, 9, 8, 7], 1: [6, 5, 4, 3], 2: [2, 1]}
    for batch, qs in q_by_batch.items():
        assert kv_by_batch[batch] == list(range(1, max(qs) + 1))
    assert sorted(evicted) == [(1, 7), (1, 8), (1, 9), (1, 10), (2, 3), (2, 4), (2, 5), (2, 6)]
    evicted_tokens = {t for _, t in evicted}
    for batch, kvs in kv_by_batch.items():
        later_evicted = {t for b_, t in evicted if b_ <= batch}
        assert not later_evicted & set(kvs)
    assert evicted_tokens == set(range(3, 11))
    assert trace.masked_cells == 0


def test_resident_state_bound(rng):
    b = random_batch(rng, 13, p=4)
    _, trace = reverse_prefill_attention(b)
    assert trace.peak_q_slots <= 4
    assert trace.peak_kv_tokens == 1


@pytest.mark.parametrize("p", [1, 2, 3, 4, 8])
def test_reverse_matches_naive_per_token_scales(rng, p):
    for n in (1, 5, 8, 17):
        b = random_batch(rng, n, p=p, per_token=True)
        out, _ = reverse_prefill_attention(b)
        np.testing.assert_allclose(out, naive_causal_attention(b), atol=1e-5)


def test_causality_bitwise(rng):
    n = 12
    b = random_batch(rng, n, p=4)
    base, _ = reverse_prefill_attention(b)
    for i in range(n - 1):
        b2 = PrefillBatch(b.q.copy(), b.k.copy(), b.v.copy(), b.q_scale, b.k_scale, b.v_scale, p=4)
        b2.k[:, i + 1:] = rng.integers(-127, 128, size=b2.k[:, i + 1:].shape)
        b2.v[:, i + 1:] = rng.integers(-127, 128, size=b2.v[:, i + 1:].shape)
        out, _ = reverse_prefill_attention(b2)
        np.testing.assert_array_equal(out[: i + 1], base[: i + 1])


def test_dense_matches_naive_and_counts(rng):
    b = random_batch(rng, 8, p=4)
    out, trace = dense_schedule_attention(b)
    np.testing.assert_allclose(out, naive_causal_attention(b), atol=1e-5)
    assert trace.iterations == 8 * 8 // 4 + 4 - 1 == 19
    assert trace.masked_cells == 8 * 7 // 2
    assert trace.computed_cells == 64


def test_dense_ragged(rng):
    b = random_batch(rng, 7, p=3)
    out, trace = dense_schedule_attention(b)
    np.testing.assert_allclose(out, naive_causal_attention(b), atol=1e-5)
    assert trace.masked_cells == 21


def test_batch_validation(rng):
    with pytest.raises(ValueError):
        PrefillBatch(np.zeros((1, 0, 4)), np.zeros((1, 0, 4)), np.zeros((1, 0, 4)))
    with pytest.raises(ValueError):
        PrefillBatch(np.zeros((1, 2, 4)), np.zeros((1, 3, 4)), np.zeros((1, 2, 4)))
