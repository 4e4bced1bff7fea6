import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusionvote import tensor as T
from fusionvote.data import GammaParams, gamma_transform, resize_nearest
from fusionvote.metrics import ConfusionMatrix, classification_metrics, roc_auc_micro
from fusionvote.model import soft_vote

finite = st.floats(-50, 50, allow_nan=False, width=64)
unit = st.floats(0, 1, allow_nan=False, width=64)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_softmax_is_distribution(x):
    p = T.softmax(T.Tensor(x, dtype=np.float64)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 5)), elements=finite), finite)
def test_softmax_shift_invariant(x, c):
    a = T.softmax(T.Tensor(x, dtype=np.float64)).data
    b = T.softmax(T.Tensor(x + c, dtype=np.float64)).data
    np.testing.assert_allclose(a, b, atol=1e-9)


@given(unit, unit, st.floats(1.0, 5.0))
def test_gamma_monotone_and_darkening(r1, r2, g):
    lo, hi = sorted((r1, r2))
    out = gamma_transform(np.array([lo, hi]), GammaParams(1.0, g))
    assert out[0] <= out[1]
    assert out[0] <= lo + 1e-15 and out[1] <= hi + 1e-15


@given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 255)),
       st.integers(1, 20), st.integers(1, 20))
def test_resize_adds_no_values(img, h, w):
    out = resize_nearest(img, h, w)
    assert out.shape == (h, w)
    assert set(np.unique(out)) <= set(np.unique(img))


def distributions(k):
    return arrays(np.float64, k, elements=st.floats(0.01, 1.0)).map(lambda v: v / v.sum())


@given(st.integers(2, 6).flatmap(lambda k: st.lists(distributions(k), min_size=4, max_size=4)),
       st.permutations(range(4)))
def test_soft_vote_member_order_and_total(probs, order):
    label, combined = soft_vote(probs)
    assert label == int(np.argmax(np.sum(probs, axis=0)))
    np.testing.assert_allclose(combined.sum(), 4.0, rtol=1e-12)
    _, reordered = soft_vote([probs[i] for i in order])
    np.testing.assert_allclose(reordered, combined, rtol=1e-12)


@settings(max_examples=50)
@given(arrays(np.int64, (3, 3), elements=st.integers(0, 20)), st.permutations(range(3)))
def test_metrics_class_permutation(counts, perm):
    if counts.sum() == 0:
        counts[0, 0] = 1
    p = list(perm)
    a = classification_metrics(ConfusionMatrix(counts)).as_dict()
    b = classification_metrics(ConfusionMatrix(counts[np.ix_(p, p)])).as_dict()
    for k in a:
        assert abs(a[k] - b[k]) <= 1e-12


@settings(max_examples=50)
@given(arrays(np.int64, (2, 2), elements=st.integers(0, 30)))
def test_mcc_bounded(counts):
    if counts.sum() == 0:
        counts[1, 1] = 1
    r = classification_metrics(ConfusionMatrix(counts))
    assert -1 - 1e-12 <= r.mcc <= 1 + 1e-12
    assert 0 <= r.accuracy <= 1


@settings(max_examples=50)
@given(st.integers(2, 8), st.integers(2, 4), st.data())
def test_auc_in_unit_interval(n, k, data):
    scores = data.draw(arrays(np.float64, (n, k), elements=unit))
    labels = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    assert 0.0 <= roc_auc_micro(scores, labels).auc <= 1.0
