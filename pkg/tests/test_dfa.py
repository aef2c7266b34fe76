import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdgt.dfa import DFA, dfa
from gdgt.errors import DimensionError
from gdgt.gradcheck import randomize
from gdgt.tensor import Tensor


def make(seed, use_diff=True, c=8):
    rng = np.random.default_rng(seed)
    return randomize(DFA(c, 4, use_diff, rng), rng, 0.8)


def feats(seed, shape=(2, 8, 5, 6)):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_weights_sum_to_one(seed, use_diff):
    m = make(seed, use_diff)
    ms, ns = m.weights(feats(seed), feats(seed + 1))
    assert ms.shape == (2, 8, 1, 1)
    assert np.all(ms.data > 0) and np.all(ns.data > 0)
    np.testing.assert_allclose(ms.data + ns.data, 1.0, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_fixed_point_exact(seed, use_diff):
    f = feats(seed)
    np.testing.assert_array_equal(dfa(f, f, make(seed, use_diff)).data, f.data)


def test_tied_branches_give_exact_mean():
    m = make(0)
    for conv in (m.expand_m, m.expand_n):
        conv.weight.data = np.zeros(conv.weight.shape)
        conv.bias.data = np.zeros(conv.bias.shape)
    f1, f2 = feats(1), feats(2)
    ms, ns = m.weights(f1, f2)
    np.testing.assert_array_equal(ms.data, 0.5)
    np.testing.assert_array_equal(m(f1, f2).data, (f1.data + f2.data) * 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_convex_combination(seed):
    m = make(seed)
    f1, f2 = feats(seed), feats(seed + 7)
    out = m(f1, f2).data
    ms, ns = m.weights(f1, f2)
    np.testing.assert_allclose(out, ms.data * f1.data + ns.data * f2.data, atol=1e-12)
    lo, hi = np.minimum(f1.data, f2.data), np.maximum(f1.data, f2.data)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_no_diff_ignores_difference_sign():
    # without the difference term the weights depend only on f1 + f2
    m = make(3, use_diff=False)
    f1, f2 = feats(4), feats(5)
    a = m.weights(f1, f2)[0].data
    b = m.weights(f2, f1)[0].data
    np.testing.assert_array_equal(a, b)
    md = make(3, use_diff=True)
    assert not np.allclose(md.weights(f1, f2)[0].data, md.weights(f2, f1)[0].data)


def test_no_diff_same_parameters():
    a = {n for n, _ in DFA(8, 4, True).named_parameters()}
    b = {n for n, _ in DFA(8, 4, False).named_parameters()}
    assert a == b


def test_errors():
    with pytest.raises(DimensionError):
        DFA(6, 4)
    with pytest.raises(DimensionError):
        make(0)(feats(0), feats(1, (2, 8, 5, 5)))
