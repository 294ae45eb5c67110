# tests/test_foreground.py
import math

import numpy as np
import pytest

from rsn.core import Box7
from rsn.errors import UndefinedMetricError
from rsn.foreground import (
    ForegroundPoints,
    focal_loss_seg,
    recall_precision,
    select_foreground,
    selection_mask,
)
from rsn.range_image import RangeImage, default_inclinations, label_foreground, project
from rsn.rife import RifeOutput


def _image_and_rife(seed=0, height=6, width=12, features=3):
    rng = np.random.default_rng(seed)
    valid = rng.random((height, width)) < 0.7
    image = RangeImage(rng.uniform(1, 40, (height, width)), np.zeros((height, width)),
                       np.zeros((height, width)), valid, default_inclinations(height))
    rife = RifeOutput(rng.normal(0, 3, (height, width)), rng.normal(size=(height, width, features)))
    return image, rife


def test_focal_loss_confident_positive():
    loss, _ = focal_loss_seg(np.array([[20.0]]), np.array([[True]]), np.array([[True]]))
    assert loss <= 1e-8


def test_focal_loss_closed_form_at_zero_logit():
    loss, _ = focal_loss_seg(np.array([[0.0]]), np.array([[True]]), np.array([[True]]))
    assert loss == pytest.approx(0.25 * 0.5 ** 2 * math.log(2), rel=1e-12)
    neg, _ = focal_loss_seg(np.array([[0.0]]), np.array([[False]]), np.array([[True]]))
    assert neg == pytest.approx(0.75 * 0.5 ** 2 * math.log(2), rel=1e-12)


def test_focal_loss_ignores_invalid_pixels():
    logits = np.array([[0.0, 50.0]])
    labels = np.array([[True, False]])
    loss, grad = focal_loss_seg(logits, labels, np.array([[True, False]]))
    assert loss == pytest.approx(0.25 * 0.25 * math.log(2))
    assert grad[0, 1] == 0.0
    with pytest.raises(ValueError):
        focal_loss_seg(logits, labels, np.zeros((1, 2), dtype=bool))


def test_focal_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    step = 1e-3
    for _ in range(100):
        logits = rng.uniform(-4, 4, size=(3, 4))
        labels = rng.random((3, 4)) < 0.4
        valid = rng.random((3, 4)) < 0.8
        valid[0, 0] = True
        _, grad = focal_loss_seg(logits, labels, valid)
        i, j = rng.integers(3), rng.integers(4)
        plus, minus = logits.copy(), logits.copy()
        plus[i, j] += step
        minus[i, j] -= step
        numeric = (focal_loss_seg(plus, labels, valid)[0] - focal_loss_seg(minus, labels, valid)[0]) / (2 * step)
        assert grad[i, j] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_select_foreground_endpoints():
    image, rife = _image_and_rife()
    assert len(select_foreground(rife, image, 1.0)) == 0
    everything = select_foreground(rife, image, 0.0)
    assert len(everything) == int(image.valid.sum())
    np.testing.assert_array_equal(selection_mask(everything, image.valid.shape), image.valid)


def test_select_foreground_order_and_fields():
    image, rife = _image_and_rife(seed=2)
    points = select_foreground(rife, image, 0.3, frame_index=2)
    keys = points.pixels[:, 0] * image.width + points.pixels[:, 1]
    assert np.all(np.diff(keys) > 0)
    assert np.all(points.scores > 0.3)
    assert np.all(points.frame_index == 2)
    first = points[0]
    np.testing.assert_array_equal(first.range_feature, rife.features[first.source_pixel])
    assert first.frame_index == 2


def test_select_foreground_is_monotone_in_gamma():
    image, rife = _image_and_rife(seed=3)
    previous = None
    for gamma in np.linspace(0, 1, 11):
        mask = selection_mask(select_foreground(rife, image, gamma), image.valid.shape)
        if previous is not None:
            assert not np.any(mask & ~previous)
        previous = mask


def test_selection_invariant_to_monotone_logit_transform():
    image, rife = _image_and_rife(seed=4)
    gamma = 0.4
    scaled = RifeOutput(2.0 * rife.seg_logits + 1.0, rife.features)
    # sigmoid(2x + 1) > g  iff  x > (logit(g) - 1) / 2
    gamma_scaled = 1.0 / (1.0 + math.exp(-(2.0 * math.log(gamma / (1 - gamma)) + 1.0)))
    a = select_foreground(rife, image, gamma)
    b = select_foreground(scaled, image, gamma_scaled)
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_planted_logits_select_exact_box_pixels():
    incl = default_inclinations(16)
    rng = np.random.default_rng(5)
    box = Box7(12.0, 0.0, -1.0, 4.0, 2.0, 1.6, 0.2)
    local = rng.uniform(-0.45, 0.45, size=(400, 3)) * [box.l, box.w, box.h]
    c, s = math.cos(box.theta), math.sin(box.theta)
    in_box = np.column_stack([box.cx + c * local[:, 0] - s * local[:, 1],
                              box.cy + s * local[:, 0] + c * local[:, 1], box.cz + local[:, 2]])
    ground = np.column_stack([rng.uniform(-30, 30, (1000, 2)), np.full(1000, -1.8)])
    cloud = np.vstack([in_box, ground])
    image = project(np.column_stack([cloud, np.zeros((len(cloud), 2))]), 16, 128, incl)
    labels = label_foreground(image, [box]).fg_label
    rife = RifeOutput(np.where(labels, 10.0, -10.0), np.zeros((16, 128, 2)))
    selected = selection_mask(select_foreground(rife, image, 0.15), labels.shape)
    np.testing.assert_array_equal(selected, labels)


def test_recall_precision_cases():
    labels = np.zeros(20, dtype=bool)
    labels[:10] = True
    assert recall_precision(labels, labels) == (1.0, 1.0)
    recall, precision = recall_precision(np.zeros(20, dtype=bool), labels)
    assert recall == 0.0 and precision is None
    selected = np.zeros(20, dtype=bool)
    selected[:8] = True
    selected[10:12] = True
    assert recall_precision(selected, labels) == (pytest.approx(0.8), pytest.approx(0.8))
    with pytest.raises(UndefinedMetricError):
        recall_precision(selected, np.zeros(20, dtype=bool))


def test_foreground_points_validation():
    empty = ForegroundPoints.empty(4)
    assert len(empty) == 0 and empty.feature_width == 4
    with pytest.raises(ValueError):
        ForegroundPoints(np.zeros((2, 3)), np.zeros((1, 4)), np.zeros((2, 2), dtype=np.int64),
                         np.zeros(2, dtype=np.int64), np.zeros(2))
