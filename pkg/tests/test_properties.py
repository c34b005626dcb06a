"""Randomised properties of the tensor ops and the evaluation metrics."""
import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dcffnet import tensor as T
from dcffnet.evaluation import iou, ope_evaluate
from dcffnet.heads import BBox

finite = st.floats(-10, 10, allow_nan=False, width=64)


@st.composite
def search_template(draw, channels=st.integers(1, 3)):
    c = draw(channels)
    hs, ws = draw(st.integers(2, 9)), draw(st.integers(2, 9))
    ht, wt = draw(st.integers(1, hs)), draw(st.integers(1, ws))
    s = draw(arrays(np.float64, (c, hs, ws), elements=finite))
    t = draw(arrays(np.float64, (c, ht, wt), elements=finite))
    return s, t


@settings(max_examples=60, deadline=None)
@given(search_template(), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_xcorr_is_linear_in_search(st_pair, alpha, beta, seed):
    s1, t = st_pair
    s2 = np.random.default_rng(seed).standard_normal(s1.shape)
    lhs = T.depthwise_xcorr(alpha * s1 + beta * s2, t)
    rhs = alpha * T.depthwise_xcorr(s1, t) + beta * T.depthwise_xcorr(s2, t)
    # relative to the magnitude of the summed terms, which bounds the rounding error
    scale = np.abs(T.depthwise_xcorr(np.abs(alpha * s1) + np.abs(beta * s2), np.abs(t))).max()
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(scale, 1e-300) + 1e-300


@settings(max_examples=60, deadline=None)
@given(search_template(), st.integers(0, 3), st.integers(0, 3))
def test_xcorr_translation_equivariance(st_pair, dy, dx):
    s, t = st_pair
    c, hs, ws = s.shape
    big = np.zeros((c, hs + dy, ws + dx))
    big[:, dy:, dx:] = s
    out, shifted = T.depthwise_xcorr(s, t), T.depthwise_xcorr(big, t)
    assert np.array_equal(shifted[:, dy:, dx:], out)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)), elements=finite),
       st.tuples(st.integers(1, 5), st.integers(1, 9), st.integers(1, 9)))
def test_resize_stays_in_input_range(x, shape):
    out = T.resize_trilinear(x, shape)
    assert out.shape == shape
    assert out.min() >= x.min() - 1e-12 * max(1.0, abs(x.min()))
    assert out.max() <= x.max() + 1e-12 * max(1.0, abs(x.max()))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_resize_same_shape_is_identity(x):
    assert np.array_equal(T.resize_trilinear(x, x.shape), x)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(3, 20), st.integers(3, 20))
def test_conv_shape_law_grid(k_half, stride, pad, h, w):
    k = 2 * k_half - 1
    spec = T.ConvSpec(k, k, stride, pad)
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    if min(ho, wo) < 1:
        return
    out = T.conv2d(np.ones((1, h, w)), np.ones((1, 1, k, k)), np.zeros(1), spec)
    assert out.shape == (1, ho, wo)


# ---------------------------------------------------------------- metrics

coord = st.floats(0, 200, allow_nan=False)


@st.composite
def corner_box(draw):
    x0, y0 = draw(coord), draw(coord)
    return BBox(x0, y0, x0 + draw(st.floats(0.5, 80)), y0 + draw(st.floats(0.5, 80)))


@settings(max_examples=100, deadline=None)
@given(corner_box(), corner_box())
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = iou([a], [b])[0], iou([b], [a])[0]
    assert ab == ba
    assert 0.0 <= ab <= 1.0
    assert iou([a], [a])[0] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(corner_box(), corner_box()), min_size=2, max_size=30))
def test_ope_curves_monotone(pairs):
    pred, gt = zip(*pairs)
    r = ope_evaluate(list(pred), list(gt))
    assert np.all(np.diff(r.success) <= 0)
    assert np.all(np.diff(r.precision) >= 0)
    for curve in (r.success, r.precision):
        assert curve.min() >= 0 and curve.max() <= 1
    assert 0 <= r.auc <= 1
