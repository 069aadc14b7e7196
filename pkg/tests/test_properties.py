import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sacn import tensor as T
from sacn.attention import attention_map, attention_scores
from sacn.capsules import route, squash
from sacn.losses import margin_loss
from sacn.tensor import Tensor

N = settings(max_examples=1000, deadline=None)
finite = st.floats(-50, 50, allow_nan=False, width=64)


def shapes(min_side=1, max_side=6, dims=3):
    return st.tuples(*[st.integers(min_side, max_side)] * dims)


@N
@given(st.data())
def test_attention_columns_sum_to_one(data):
    b, c, n = data.draw(shapes(1, 5))
    f = data.draw(arrays(np.float64, (b, c, n), elements=st.floats(-5, 5)))
    g = data.draw(arrays(np.float64, (b, c, n), elements=st.floats(-5, 5)))
    beta = attention_map(attention_scores(Tensor(f), Tensor(g))).data
    np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(beta >= 0)


@N
@given(st.data())
def test_couplings_sum_to_one(data):
    b, i, j = data.draw(shapes(1, 4))
    d = data.draw(st.integers(1, 4))
    iters = data.draw(st.integers(1, 4))
    u_hat = data.draw(arrays(np.float64, (b, i, j, d), elements=st.floats(-3, 3)))
    _, state = route(Tensor(u_hat), iters)
    np.testing.assert_allclose(state.c.sum(axis=2), 1.0, atol=1e-6)


@N
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=finite))
def test_squash_shrinks_and_keeps_direction(s):
    v = squash(Tensor(s)).data
    norms = np.linalg.norm(v, axis=-1)
    assert np.all(norms < 1)
    for row_s, row_v in zip(s, v):
        ns = np.linalg.norm(row_s)
        if ns > 1e-6 and np.linalg.norm(row_v) > 0:
            cos = row_s @ row_v / (ns * np.linalg.norm(row_v))
            assert cos > 1 - 1e-9


@N
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6)), elements=finite),
       st.floats(-100, 100))
def test_softmax_shift_invariance(x, shift):
    a = T.softmax(Tensor(x), axis=-1).data
    b = T.softmax(Tensor(x + shift), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-9)


@N
@given(st.data())
def test_margin_monotone_in_true_class_length(data):
    j = data.draw(st.integers(2, 5))
    lengths = data.draw(arrays(np.float64, (1, j), elements=st.floats(0, 1)))
    label = data.draw(st.integers(0, j - 1))
    bump = data.draw(st.floats(0, 1))
    up = lengths.copy()
    up[0, label] = min(1.0, up[0, label] + bump)
    down = lengths.copy()
    other = (label + 1) % j
    down[0, other] = min(1.0, down[0, other] + bump)
    base = margin_loss(Tensor(lengths), [label]).data[0]
    assert margin_loss(Tensor(up), [label]).data[0] <= base + 1e-12
    assert margin_loss(Tensor(down), [label]).data[0] >= base - 1e-12
    assert base >= 0
