import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import box as shp_box

from cbl.geometry import (
    as_boxes,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    iou,
    iou_matrix,
    make_box,
    nms,
)
from conftest import random_boxes

coord = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def boxes(draw):
    x1, x2 = sorted([draw(coord), draw(coord)])
    y1, y2 = sorted([draw(coord), draw(coord)])
    return (x1, y1, x2 + 1e-3, y2 + 1e-3)


def shapely_iou(a, b):
    pa, pb = shp_box(*a), shp_box(*b)
    union = pa.union(pb).area
    return pa.intersection(pb).area / union


def test_iou_half_overlap():
    assert iou((0, 0, 10, 10), (0, 0, 10, 5)) == pytest.approx(0.5, abs=1e-12)


def test_iou_disjoint_is_zero():
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_matches_polygon_oracle(a, b):
    assert iou(a, b) == iou(b, a)
    assert iou(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-9)
    m = iou_matrix(np.array([a]), np.array([b]))[0, 0]
    assert m == pytest.approx(iou(a, b), abs=1e-12)


@given(boxes())
def test_self_iou_is_exactly_one(a):
    assert iou(a, a) == 1.0
    assert iou_matrix(np.array([a]), np.array([a]))[0, 0] == 1.0


def test_make_box_rejects_degenerate_and_nonfinite():
    assert make_box(0, 0, 1, 2).area == 2.0
    with pytest.raises(ValueError):
        make_box(1, 0, 1, 1)
    with pytest.raises(ValueError):
        make_box(0, 0, float("nan"), 1)
    with pytest.raises(ValueError):
        as_boxes([[0, 0, 1, 1], [0, 0, 0, 1]])


def test_nms_identical_pair_keeps_higher():
    b = np.array([[0, 0, 1, 1], [0, 0, 1, 1]], dtype=float)
    assert nms(b, [0.9, 0.8], 0.5) == [0]
    assert nms(b, [0.8, 0.9], 0.5) == [1]


def test_nms_empty_and_ties():
    assert nms(np.zeros((0, 4)), [], 0.5) == []
    b = np.array([[0, 0, 1, 1], [0, 0, 1, 1]], dtype=float)
    assert nms(b, [0.5, 0.5], 0.5) == [0]


def _nms_oracle(b, s, thresh):
    """Exhaustive search for the one subset that is closed under greedy suppression:
    a box is kept iff no kept box ranked above it overlaps it by more than ``thresh``."""
    n = len(s)
    rank = sorted(range(n), key=lambda i: (-s[i], i))
    pos = {i: r for r, i in enumerate(rank)}
    found = []
    for mask in range(1 << n):
        kept = [i for i in range(n) if mask >> i & 1]
        ok = True
        for i in range(n):
            blocked = any(pos[j] < pos[i] and iou(b[j], b[i]) > thresh for j in kept)
            if (i in kept) == blocked:
                ok = False
                break
        if ok:
            found.append(sorted(kept, key=lambda i: pos[i]))
    assert len(found) == 1
    return found[0]


def test_nms_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    for trial in range(600):
        n = int(rng.integers(1, 9))
        b = random_boxes(rng, n, grid=6 if trial % 2 else None)
        s = rng.integers(0, 4, size=n) / 4.0 if trial % 3 == 0 else rng.uniform(size=n)
        thresh = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
        assert nms(b, s, thresh) == _nms_oracle(b, s, thresh)


@given(st.lists(boxes(), min_size=1, max_size=10), st.floats(0.0, 0.99), st.data())
def test_nms_properties(bs, thresh, data):
    b = np.array(bs)
    s = np.array(data.draw(st.lists(st.floats(0, 1), min_size=len(bs), max_size=len(bs), unique=True)))
    keep = nms(b, s, thresh)
    assert len(set(keep)) == len(keep) and set(keep) <= set(range(len(bs)))
    assert all(s[keep[i]] > s[keep[i + 1]] for i in range(len(keep) - 1))
    for i, j in itertools.combinations(keep, 2):
        assert iou(b[i], b[j]) <= thresh
    assert nms(b, s, 1.0) == sorted(range(len(bs)), key=lambda i: -s[i])


def test_deltas_examples():
    p = np.array([[0.0, 0.0, 2.0, 1.0]])
    assert np.allclose(encode_deltas(p, p), 0.0, atol=1e-12)
    shifted = np.array([[2.0, 0.0, 4.0, 1.0]])
    assert np.allclose(encode_deltas(p, shifted), [[1, 0, 0, 0]], atol=1e-12)
    wide = np.array([[-1.0, 0.0, 3.0, 1.0]])
    assert np.allclose(encode_deltas(p, wide), [[0, 0, math.log(2), 0]], atol=1e-12)
    assert np.allclose(decode_deltas(p, [[0, 0, math.log(2), 0]]), wide, atol=1e-12)


def test_decode_inverts_encode(rng):
    for _ in range(50):
        p = random_boxes(rng, 6)
        g = random_boxes(rng, 6)
        assert np.allclose(decode_deltas(p, encode_deltas(p, g)), g, atol=1e-9)


def test_clip_boxes():
    assert np.array_equal(clip_boxes(np.array([[-0.5, 0.2, 1.5, 0.4]])), [[0.0, 0.2, 1.0, 0.4]])
