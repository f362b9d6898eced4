import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockres.resolvent import (
    ResolventConfig,
    default_t_max,
    neumann_oracle,
    resolvent_apply,
    t_post,
    t_pre,
    t_raw,
)
from blockres.tensor_core import CausalAttention, MaskMode, causal_softmax


def chain(n=3):
    mat = np.zeros((n, n))
    mat[np.arange(1, n), np.arange(n - 1)] = 1.0
    return CausalAttention(mat, MaskMode.STRICT)


def e0(n=3):
    v = np.zeros((n, 1))
    v[0] = 1.0
    return v


def test_gamma_zero_is_one_hop(rng):
    a = causal_softmax(rng.normal(size=(9, 9)))
    v = rng.standard_normal((9, 3))
    np.testing.assert_array_equal(resolvent_apply(a, v, 0.0), a.mat @ v)


def test_chain_hop_weights():
    y = resolvent_apply(chain(), e0(), ResolventConfig(0.5))
    np.testing.assert_allclose(y[:, 0], [0.0, 0.5, 0.25], rtol=0, atol=1e-15)


def test_matches_exact_series_strict(rng):
    a = causal_softmax(rng.normal(size=(16, 16)), MaskMode.STRICT)
    v = rng.standard_normal((16, 4))
    diff = resolvent_apply(a, v, 0.9) - neumann_oracle(a, v, 0.9, 16)
    assert np.abs(diff).max() <= 1e-10


def test_oracle_examples(rng):
    a = causal_softmax(rng.normal(size=(8, 8)))
    v = rng.standard_normal((8, 2))
    np.testing.assert_allclose(neumann_oracle(a, v, 0.3, 1), 0.7 * a.mat @ v, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(neumann_oracle(chain(), e0(), 0.5, 2),
                                  neumann_oracle(chain(), e0(), 0.5, 50))
    diff = neumann_oracle(a, v, 0.9, 400) - resolvent_apply(a, v, 0.9)
    assert np.abs(diff).max() <= 1e-8


def test_default_t_max():
    assert default_t_max(0.0) == 1
    t = default_t_max(0.9)
    assert 0.9 ** t <= 1e-12 * 0.1 < 0.9 ** (t - 1)


def test_t_raw_examples():
    eye_routing = CausalAttention(np.eye(4), MaskMode.INCLUSIVE)
    v = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(t_raw(eye_routing, v), v)
    v = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(t_raw(chain(), v)[:, 0], [0, 1, 2])
    assert t_raw(chain(), np.zeros((3, 0))).shape == (3, 0)


def test_t_post_t_pre_examples(rng):
    v = np.eye(3)
    expected = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0.0]])
    np.testing.assert_array_equal(t_post(chain(), v), expected)
    np.testing.assert_array_equal(t_pre(chain(), v), expected)
    zero = CausalAttention(np.zeros((5, 5)), MaskMode.STRICT)
    assert not t_post(zero, np.ones((5, 2))).any() and not t_pre(zero, np.ones((5, 2))).any()
    a = causal_softmax(rng.normal(size=(12, 12)), MaskMode.STRICT)
    v = rng.standard_normal((12, 3))
    series = sum(np.linalg.matrix_power(a.mat, t) @ v for t in range(1, 12))
    np.testing.assert_allclose(t_post(a, v), series, rtol=0, atol=1e-10)
    np.testing.assert_allclose(t_pre(a, v), t_post(a, v), rtol=0, atol=1e-10)


def test_undamped_operators_need_strict_mask(rng):
    a = causal_softmax(rng.normal(size=(4, 4)), MaskMode.INCLUSIVE)
    with pytest.raises(ValueError, match="strict"):
        t_post(a, np.ones((4, 1)))
    with pytest.raises(ValueError, match="strict"):
        t_pre(a, np.ones((4, 1)))


@pytest.mark.parametrize("gamma", [-0.1, 1.0, 1.5, float("nan")])
def test_bad_gamma(gamma):
    with pytest.raises(ValueError):
        ResolventConfig(gamma)


def test_input_errors(rng):
    a = causal_softmax(rng.normal(size=(4, 4)))
    with pytest.raises(TypeError):
        resolvent_apply(np.eye(4), np.ones((4, 1)))
    with pytest.raises(ValueError, match="rows"):
        resolvent_apply(a, np.ones((3, 1)))
    with pytest.raises(ValueError):
        resolvent_apply(a, np.full((4, 1), np.inf))
    assert resolvent_apply(a, np.zeros((4, 0))).shape == (4, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 24), st.sampled_from(list(MaskMode)), st.floats(0.0, 0.95),
       st.integers(0, 2**32 - 1))
def test_causality_property(n, mask, gamma, seed):
    rng = np.random.default_rng(seed)
    a = causal_softmax(rng.normal(size=(n, n)), mask)
    v = rng.standard_normal((n, 2))
    j = int(rng.integers(n))
    v2 = v.copy()
    v2[j] += 1.0
    changed = np.flatnonzero(np.any(resolvent_apply(a, v, gamma) != resolvent_apply(a, v2, gamma), 1))
    first = j + 1 if mask is MaskMode.STRICT else j
    assert changed.size == 0 or changed.min() >= first
