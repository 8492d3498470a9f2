import numpy as np
import pytest

from querytrack.geometry import BBox, GeometryError, giou, iou, l1_box


def test_iou_hand_case():
    a = BBox.from_ltrb(0.0, 0.0, 2.0, 2.0)
    b = BBox.from_ltrb(1.0, 1.0, 3.0, 3.0)
    assert iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)


def test_iou_identical_is_one():
    a = BBox(0.3, -2.0, 1.5, 0.25)
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


def test_iou_disjoint_is_zero():
    a = BBox.from_ltrb(0.0, 0.0, 1.0, 1.0)
    b = BBox.from_ltrb(5.0, 5.0, 6.0, 6.0)
    assert iou(a, b) == 0.0


def test_giou_hand_case():
    a = BBox.from_ltrb(0.0, 0.0, 1.0, 1.0)
    b = BBox.from_ltrb(1.0, 1.0, 2.0, 2.0)
    assert giou(a, b) == pytest.approx(-0.5, abs=1e-12)


def test_giou_equals_iou_when_boxes_coincide():
    a = BBox(1.0, 1.0, 2.0, 3.0)
    assert giou(a, a) == pytest.approx(iou(a, a), abs=1e-12)


def test_l1_hand_case():
    a = BBox(0.5, 0.5, 0.2, 0.3)
    b = BBox(0.6, 0.4, 0.25, 0.25)
    assert l1_box(a, b) == pytest.approx(0.3, abs=1e-12)


def test_degenerate_box_rejected():
    with pytest.raises(GeometryError):
        BBox(0.0, 0.0, 0.0, 1.0).validate()
    with pytest.raises(GeometryError):
        BBox(0.0, 0.0, 1.0, -2.0).validate()
    with pytest.raises(GeometryError):
        BBox(float("nan"), 0.0, 1.0, 1.0).validate()
    with pytest.raises(GeometryError):
        iou(BBox(0.0, 0.0, 1.0, 0.0), BBox(0.0, 0.0, 1.0, 1.0))


def test_conversions_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(200):
        cx, cy = rng.normal(size=2) * 10.0
        w, h = rng.uniform(0.1, 5.0, size=2)
        box = BBox(cx, cy, w, h)
        for via in (BBox.from_ltrb(*box.to_ltrb()), BBox.from_ltwh(*box.to_ltwh())):
            assert np.allclose(via.as_tuple(), box.as_tuple(), atol=1e-12)


def test_iou_properties_random():
    rng = np.random.default_rng(11)
    for _ in range(300):
        a = BBox(*rng.normal(size=2), *rng.uniform(0.1, 4.0, size=2))
        b = BBox(*rng.normal(size=2), *rng.uniform(0.1, 4.0, size=2))
        v = iou(a, b)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(iou(b, a), abs=1e-12)
        g = giou(a, b)
        assert -1.0 - 1e-12 <= g <= 1.0 + 1e-12
        assert g <= v + 1e-12
        assert g == pytest.approx(giou(b, a), abs=1e-12)


def test_giou_monotone_in_separation():
    # Pushing one box further away never increases giou.
    a = BBox.from_ltrb(0.0, 0.0, 1.0, 1.0)
    prev = None
    for shift in np.linspace(0.0, 10.0, 40):
        b = BBox.from_ltrb(shift, 0.0, shift + 1.0, 1.0)
        g = giou(a, b)
        if prev is not None:
            assert g <= prev + 1e-12
        prev = g


def test_l1_is_a_metric_sample():
    rng = np.random.default_rng(3)
    for _ in range(100):
        boxes = [BBox(*rng.normal(size=2), *rng.uniform(0.1, 3.0, size=2))
                 for _ in range(3)]
        a, b, c = boxes
        assert l1_box(a, b) >= 0.0
        assert l1_box(a, a) == 0.0
        assert l1_box(a, b) == pytest.approx(l1_box(b, a), abs=1e-12)
        assert l1_box(a, c) <= l1_box(a, b) + l1_box(b, c) + 1e-12
