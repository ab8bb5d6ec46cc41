import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stin.geometry import ZERO_QUAD, Box, Quad, decode, encode, iou


def boxes(max_coord=200.0):
    coord = st.floats(0, max_coord, allow_nan=False)

    def build(v):
        x1, x2 = sorted(v[:2])
        y1, y2 = sorted(v[2:])
        return Box(x1, y1, x2, y2)

    return st.lists(coord, min_size=4, max_size=4).map(build)


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(a, Box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_of_two_degenerate_boxes_is_zero():
    assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


@settings(max_examples=200, deadline=None)
@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@settings(max_examples=100, deadline=None)
@given(boxes())
def test_iou_self_is_one(a):
    if a.area > 0:
        assert iou(a, a) == 1.0


def test_encode_examples():
    assert encode(Box(0, 0, 100, 100), 100, 100) == Quad(0.5, 0.5, 1.0, 1.0)
    assert encode(Box(25, 25, 75, 75), 100, 100) == Quad(0.5, 0.5, 0.5, 0.5)
    assert encode(None, 100, 100) == ZERO_QUAD == (0.0, 0.0, 0.0, 0.0)


def test_encode_clamps_out_of_frame_boxes():
    q = encode(Box(-50, -10, 150, 50), 100, 100)
    assert q == encode(Box(0, 0, 100, 50), 100, 100)
    assert all(0.0 <= v <= 1.0 for v in q)


def test_encode_rejects_bad_frame():
    with pytest.raises(ValueError):
        encode(Box(0, 0, 1, 1), 0, 10)


@settings(max_examples=200, deadline=None)
@given(boxes(100.0), st.floats(100, 1000), st.floats(100, 1000))
def test_decode_inverts_encode_in_frame(b, fw, fh):
    back = decode(encode(b, fw, fh), fw, fh)
    assert np.allclose(back.corners, b.corners, atol=1e-12 * max(fw, fh))


@settings(max_examples=200, deadline=None)
@given(boxes(100.0), st.floats(0.1, 20))
def test_encode_is_scale_invariant(b, k):
    q1 = encode(b, 100.0, 100.0)
    q2 = encode(Box(b.x1 * k, b.y1 * k, b.x2 * k, b.y2 * k), 100.0 * k, 100.0 * k)
    assert np.allclose(q1, q2, atol=1e-12)


def test_box_validation():
    with pytest.raises(ValueError):
        Box(2, 0, 1, 1)
    with pytest.raises(ValueError):
        Box(0, 0, 1, 1, score=1.5)
    with pytest.raises(ValueError):
        Box(0, 0, 1, 1, category="car")
