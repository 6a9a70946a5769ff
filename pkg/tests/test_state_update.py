import warnings

import numpy as np
import pytest

from statepim import mx
from statepim.rounding import RoundingMode
from statepim.state_update import (
    KVCache, MXKVCache, MXState, StateUpdateInputs, attention_attend_mx, attention_attend_ref, attention_score_mx,
    attention_score_ref, linear_attention_equivalence, padded_dim, softmax, state_update_step_mx,
    state_update_step_ref,
)


def inputs(rng, dh, ds, decay=(0.9, 1.0)):
    return StateUpdateInputs(rng.uniform(*decay, dh), rng.standard_normal(dh), rng.standard_normal(dh), rng.standard_normal(ds))


def test_reference_step_by_hand():
    S = np.arange(6, dtype=float).reshape(3, 2)
    inp = StateUpdateInputs([0.5, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 2.0, 3.0], [10.0, -1.0])
    S_new, y = state_update_step_ref(S, inp)
    expected = np.array([[0 * 0.5 + 10, 1 * 0.5 - 1], [2 + 20, 3 - 2], [30, -3]])
    assert np.array_equal(S_new, expected)
    assert np.array_equal(y, expected[0] + expected[2])


def test_scalar_decay_mamba_mapping():
    rng = np.random.default_rng(0)
    a, C, B, X = 0.8, rng.standard_normal(8), rng.standard_normal(8), rng.standard_normal(4)
    inp = StateUpdateInputs.scalar_decay(a, C, B, X)
    S = rng.standard_normal((8, 4))
    S_new, y = state_update_step_ref(S, inp)
    assert np.allclose(S_new, a * S + np.outer(B, X))
    assert np.allclose(y, (a * S + np.outer(B, X)).T @ C)
    # a 0-d decay is broadcast the same way
    assert np.array_equal(StateUpdateInputs(a, C, B, X).d, inp.d)


def test_input_validation():
    with pytest.raises(ValueError, match="dimension mismatch"):
        StateUpdateInputs(np.ones(4), np.ones(4), np.ones(5), np.ones(3))
    with pytest.raises(ValueError, match="non-finite"):
        StateUpdateInputs(np.ones(4), np.ones(4), np.r_[np.ones(3), np.nan], np.ones(3))
    with pytest.raises(ValueError, match="dimension mismatch"):
        state_update_step_ref(np.zeros((3, 3)), StateUpdateInputs(np.ones(4), np.ones(4), np.ones(4), np.ones(3)))
    with pytest.warns(RuntimeWarning):
        StateUpdateInputs(np.full(4, 1.5), np.ones(4), np.ones(4), np.ones(3))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        StateUpdateInputs(np.ones(4), np.ones(4), np.ones(4), np.ones(3))


def test_linear_attention_equivalence():
    rng = np.random.default_rng(1)
    Q, K, V = rng.standard_normal((3, 12, 8))
    assert linear_attention_equivalence(Q, K, V)
    assert not linear_attention_equivalence(Q, K, V, decay=0.9)


def test_padding_and_state_round_trip():
    assert padded_dim(40) == 48 and padded_dim(64) == 64 and padded_dim(1) == 16
    rng = np.random.default_rng(2)
    S = rng.standard_normal((40, 5))
    st = MXState.from_dense(S)
    assert st.groups.shape == (5, 3) and st.dim_state == 5
    back = st.to_dense()
    assert back.shape == (40, 5)
    assert np.all(np.abs(back - S) <= np.abs(S).max() * 2.0 ** -6)
    assert MXState.from_dense(back).equals(st)
    assert np.array_equal(MXState.zeros(40, 5).to_dense(), np.zeros((40, 5)))


def test_mx_step_from_zero_is_outer_product():
    rng = np.random.default_rng(3)
    inp = inputs(rng, 32, 16)
    S_new, y = state_update_step_mx(MXState.zeros(32, 16), inp)
    dense = S_new.to_dense()
    ref, y_ref = state_update_step_ref(np.zeros((32, 16)), inp)
    assert np.linalg.norm(dense - ref) / np.linalg.norm(ref) < 2.0 ** -5
    # y is the exact dot of the stored state with the quantized q
    q = mx.dequantize_vector(mx.quantize_vector(inp.q), 32)
    assert np.allclose(y, dense.T @ q, rtol=1e-12, atol=1e-12)


def test_ten_step_drift_bound():
    # operands in [0.25, 1]: the bound is close to the format's rounding floor, so it is checked on the median
    errs = []
    for seed in range(16):
        rng = np.random.default_rng(seed)
        S_ref = np.zeros((16, 4))
        S_mx = MXState.zeros(16, 4)
        for _ in range(10):
            inp = StateUpdateInputs(
                rng.uniform(0.9, 1.0, 16), rng.uniform(0.25, 1, 16), rng.uniform(0.25, 1, 16), rng.uniform(0.25, 1, 4)
            )
            S_ref, _ = state_update_step_ref(S_ref, inp)
            S_mx, _ = state_update_step_mx(S_mx, inp)
        errs.append(np.linalg.norm(S_mx.to_dense() - S_ref) / np.linalg.norm(S_ref))
    assert np.median(errs) <= 2.0 ** -5


def signed_bounded(rng, shape):
    return rng.uniform(2.0 ** -6, 1, shape) * rng.choice([-1, 1], shape)


def test_single_step_bounded_range_property():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        dh, ds = rng.integers(1, 80), rng.integers(1, 40)
        S0 = MXState.from_dense(signed_bounded(rng, (dh, ds)))
        inp = StateUpdateInputs(rng.uniform(0.5, 1, dh), signed_bounded(rng, dh), signed_bounded(rng, dh), signed_bounded(rng, ds))
        ref, _ = state_update_step_ref(S0.to_dense(), inp)
        out, _ = state_update_step_mx(S0, inp)
        assert np.linalg.norm(out.to_dense() - ref) / np.linalg.norm(ref) <= 2.0 ** -5


def test_stochastic_step_replays_exactly():
    rng = np.random.default_rng(4)
    inp = inputs(rng, 48, 20)
    S0 = MXState.from_dense(rng.standard_normal((48, 20)))
    a, ya = state_update_step_mx(S0, inp, RoundingMode.stochastic(77))
    b, yb = state_update_step_mx(S0, inp, RoundingMode.stochastic(77))
    c, _ = state_update_step_mx(S0, inp, RoundingMode.stochastic(78))
    assert a.equals(b) and np.array_equal(ya, yb)
    assert not a.equals(c)


def test_mx_step_dimension_mismatch():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError, match="dimension mismatch"):
        state_update_step_mx(MXState.zeros(16, 8), inputs(rng, 16, 9))


def test_attention_score_and_attend():
    rng = np.random.default_rng(6)
    cache = KVCache()
    for _ in range(50):
        cache.append(rng.standard_normal(40), rng.standard_normal(40))
    assert cache.seq_len == 50 and cache.dim_head == 40
    q = rng.standard_normal(40)
    mxc = MXKVCache.from_cache(cache)
    s = attention_score_mx(q, mxc)
    s_ref = attention_score_ref(q, cache)
    assert np.max(np.abs(s - s_ref)) < 0.1 * np.abs(s_ref).max()
    p = softmax(s)
    assert np.isclose(p.sum(), 1.0)
    o = attention_attend_mx(p, mxc)
    o_ref = attention_attend_ref(p, cache)
    assert np.linalg.norm(o - o_ref) / np.linalg.norm(o_ref) < 0.05


def test_empty_cache_rejected():
    with pytest.raises(ValueError, match="empty cache"):
        attention_score_ref(np.ones(4), KVCache())
    with pytest.raises(ValueError, match="empty cache"):
        MXKVCache.from_cache(KVCache())
