# tests/test_head.py
import math

import numpy as np
import pytest
from scipy.special import logit

from rsn.core import Box7, DetectorConfig, Point3, point_in_box, wrap_angle
from rsn.geometry import iou_3d
from rsn.head import (
    HeadOutput,
    HeadSites,
    compute_heatmap,
    decode,
    decode_heading,
    detection_targets,
    encode_heading,
    encode_targets,
    head_forward,
    head_layer_specs,
    local_maxima,
    loss_bin_heading,
    loss_box,
    loss_heatmap,
    loss_total,
    plant_head_output,
    smooth_l1,
)

from conftest import random_box


def _brute_heatmap(sites, boxes, sigma):
    heat = np.zeros(len(sites))
    for box in boxes:
        inside = [i for i, s in enumerate(sites) if point_in_box(Point3(*s), box)]
        if not inside:
            continue
        dist = {i: math.dist(sites[i], box.center) for i in inside}
        nearest = min(dist.values())
        for i in inside:
            heat[i] = max(heat[i], math.exp(-(dist[i] - nearest) / sigma ** 2))
    return heat


class TestHeatmap:
    @pytest.mark.parametrize("sigma", [1.0, 0.5])
    def test_matches_brute_force(self, sigma):
        rng = np.random.default_rng(0)
        for _ in range(50):
            sites = rng.uniform(-4, 4, size=(120, 3)) * [1, 1, 0.4]
            boxes = [random_box(rng, 2.0) for _ in range(int(rng.integers(0, 4)))]
            target = compute_heatmap(sites, boxes, sigma)
            np.testing.assert_allclose(target.heatmap, _brute_heatmap(sites, boxes, sigma), atol=1e-12)
            assert np.all((target.heatmap >= 0) & (target.heatmap <= 1))
            np.testing.assert_array_equal(target.regression_mask, target.heatmap > 0.2)

    def test_each_box_has_a_unit_peak(self):
        rng = np.random.default_rng(1)
        sites = rng.uniform(-4, 4, size=(400, 3)) * [1, 1, 0.4]
        boxes = [Box7(-2, -2, 0, 3, 2, 1.5, 0.3), Box7(2, 2, 0, 3, 2, 1.5, -0.8)]
        heat = compute_heatmap(sites, boxes, 1.0).heatmap
        for box in boxes:
            inside = [i for i, s in enumerate(sites) if point_in_box(Point3(*s), box)]
            assert heat[inside].max() == 1.0

    def test_line_of_sites_decreases_from_center(self):
        sites = np.column_stack([np.arange(0.0, 2.01, 0.2), np.zeros(11)])
        heat = compute_heatmap(sites, [Box7(0, 0, 0, 5, 1, 1, 0)], sigma=1.0).heatmap
        assert heat[0] == 1.0
        assert np.all(np.diff(heat) < 0)
        np.testing.assert_allclose(heat, np.exp(-sites[:, 0]), atol=1e-12)

    def test_unnormalized_uses_raw_distance(self):
        sites = np.array([[0.5, 0.0, 0.0], [1.0, 0.0, 0.0]])
        heat = compute_heatmap(sites, [Box7(0, 0, 0, 4, 2, 2, 0)], 1.0, normalized=False).heatmap
        np.testing.assert_allclose(heat, np.exp([-0.5, -1.0]))

    def test_rejects_empty_sites(self):
        with pytest.raises(ValueError):
            compute_heatmap(np.zeros((0, 3)), [], 1.0)


def test_heading_bins_examples():
    bins, residuals = encode_heading(0.0, 12)
    assert bins[0] == 6 and residuals[0] == pytest.approx(-1.0, abs=1e-9)
    bins, residuals = encode_heading(math.pi / 12, 12)
    assert bins[0] == 6 and residuals[0] == pytest.approx(0.0, abs=1e-9)
    bins, _ = encode_heading(math.pi, 12)
    assert bins[0] == 0


def test_heading_round_trip():
    thetas = np.random.default_rng(2).uniform(-math.pi, math.pi, 500)
    for num_bins in (2, 4, 12):
        bins, residuals = encode_heading(thetas, num_bins)
        assert np.all((bins >= 0) & (bins < num_bins))
        assert np.all(np.abs(residuals) <= 1.0 + 1e-6)
        for theta, b, r in zip(thetas, bins, residuals):
            assert wrap_angle(decode_heading(b, r, num_bins) - theta) == pytest.approx(0.0, abs=1e-9)


def test_encode_targets_pillar_dz_is_absolute():
    box = Box7(1.0, 2.0, -0.5, 4.0, 2.0, 1.5, 0.0)
    sites = np.array([[1.2, 2.2], [9.0, 9.0]])
    targets = encode_targets(sites, [box], 12)
    np.testing.assert_array_equal(targets.site_index, [0])
    np.testing.assert_allclose(targets.params[0], [-0.2, -0.2, -0.5, 4.0, 2.0, 1.5], atol=1e-12)
    assert targets.bins[0] == 6


def test_encode_targets_prefers_nearest_center_and_rejects_orphans():
    boxes = [Box7(0, 0, 0, 4, 4, 2, 0), Box7(1.5, 0, 0, 4, 4, 2, 0)]
    targets = encode_targets(np.array([[1.0, 0.0, 0.0]]), boxes, 12)
    assert targets.box_index[0] == 1
    with pytest.raises(ValueError):
        encode_targets(np.array([[20.0, 0.0, 0.0]]), boxes, 12, mask=np.array([True]))


def test_detection_targets_follow_detector_config():
    coords = np.indices((11, 11, 3)).reshape(3, -1).T
    sites = HeadSites(coords, coords * 0.5 + 0.25)
    box = Box7(2.6, 2.6, 0.6, 3.0, 2.0, 1.5, 0.3)
    config = DetectorConfig()
    heat, regression = detection_targets(sites, [box], config)
    assert heat.heatmap.max() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(regression.site_index, np.flatnonzero(heat.regression_mask))
    assert (regression.box_index == 0).all()
    np.testing.assert_allclose(regression.thetas, 0.3)

    raw = config.model_copy(update={"heatmap_normalized": False})
    raw_heat, _ = detection_targets(sites, [box], raw)
    np.testing.assert_array_equal(raw_heat.heatmap, compute_heatmap(sites.positions, [box], 1.0,
                                                                    normalized=False).heatmap)
    assert raw_heat.heatmap.max() < 1.0


def test_smooth_l1_values():
    value, grad = smooth_l1(np.array([0.5, 2.0, -2.0]))
    np.testing.assert_allclose(value, [0.125, 1.5, 1.5])
    np.testing.assert_allclose(grad, [0.5, 1.0, -1.0])


def test_heatmap_loss_closed_form():
    loss, _ = loss_heatmap(np.array([0.0, -30.0]), np.array([1.0, 0.5]))
    assert loss == pytest.approx(0.25 * math.log(2), rel=1e-9)
    with pytest.raises(ValueError):
        loss_heatmap(np.zeros(2), np.array([0.5, 0.2]))


def test_uniform_bin_logits_cost_log_bins():
    center_of_bin_one = -math.pi / 4
    loss, _, _ = loss_bin_heading(np.zeros((3, 4)), np.zeros((3, 4)), np.full(3, center_of_bin_one), 4)
    assert loss == pytest.approx(math.log(4), rel=1e-12)
    with pytest.raises(ValueError):
        loss_bin_heading(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), 1)


FD_STEP = 1e-3


def _numeric_gradient(f, x, step=FD_STEP):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (f(plus) - f(minus)) / (2 * step)
    return grad


def _relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale


class TestGradients:
    @pytest.mark.parametrize("seed", range(100))
    def test_heatmap_loss(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 16))
        logits = rng.uniform(-4, 4, n)
        heat = rng.uniform(0, 0.99, n)
        heat[rng.choice(n, int(rng.integers(1, 3)), replace=False)] = 1.0
        _, grad = loss_heatmap(logits, heat)
        numeric = _numeric_gradient(lambda x: loss_heatmap(x, heat)[0], logits)
        assert _relative_error(grad, numeric) <= 1e-4

    @pytest.mark.parametrize("seed", range(100))
    def test_smooth_l1(self, seed):
        rng = np.random.default_rng(1000 + seed)
        beta = rng.uniform(0.5, 2.0)
        x = rng.uniform(-3 * beta, 3 * beta, 20)
        x = x[np.abs(np.abs(x) - beta) > 1e-2]
        _, grad = smooth_l1(x, beta)
        numeric = _numeric_gradient(lambda v: smooth_l1(v, beta)[0].sum(), x)
        assert _relative_error(grad, numeric) <= 1e-4

    @pytest.mark.parametrize("seed", range(100))
    def test_bin_heading_loss(self, seed):
        rng = np.random.default_rng(2000 + seed)
        num_bins = int(rng.choice([2, 4, 8, 12]))
        m = int(rng.integers(1, 7))
        thetas = rng.uniform(-math.pi, math.pi, m)
        bins, target_res = encode_heading(thetas, num_bins)
        logits = rng.normal(size=(m, num_bins))
        residuals = rng.normal(size=(m, num_bins))
        # keep the true-bin residual error inside the quadratic part of smooth-L1
        residuals[np.arange(m), bins] = target_res + rng.uniform(-0.5, 0.5, m)
        _, grad_logits, grad_res = loss_bin_heading(logits, residuals, thetas, num_bins)
        numeric_logits = _numeric_gradient(lambda x: loss_bin_heading(x, residuals, thetas, num_bins)[0], logits)
        numeric_res = _numeric_gradient(lambda r: loss_bin_heading(logits, r, thetas, num_bins)[0], residuals)
        assert _relative_error(grad_logits, numeric_logits) <= 1e-4
        assert _relative_error(grad_res, numeric_res) <= 1e-4


def _perfect_predictions(sites, targets, n_bins=12):
    n = len(sites)
    params = np.tile([0.0, 0.0, 0.0, 1.0, 1.0, 1.0], (n, 1))
    bin_logits = np.full((n, n_bins), -20.0)
    residuals = np.zeros((n, n_bins))
    for j, s in enumerate(targets.site_index):
        params[s] = targets.params[j]
        bin_logits[s, targets.bins[j]] = 20.0
        residuals[s, targets.bins[j]] = targets.residuals[j]
    return HeadOutput(np.zeros(n), params, bin_logits, residuals)


def test_loss_box_perfect_predictions():
    sites = np.array([[0.0, 0.0, 0.0], [0.4, 0.0, 0.0], [10.0, 0.0, 0.0]])
    boxes = [Box7(0.2, 0.0, 0.0, 4.0, 2.0, 1.5, 0.7)]
    mask = np.array([True, True, False])
    targets = encode_targets(sites, boxes, 12, mask)
    loss, grads = loss_box(_perfect_predictions(sites, targets), targets, mask)
    assert loss == pytest.approx(0.0, abs=1e-9)
    assert not grads.box_params.any()
    with pytest.raises(ValueError):
        loss_box(_perfect_predictions(sites, targets), targets, np.zeros(3, dtype=bool))


def test_loss_total():
    assert loss_total(0.0, 0.0, 0.0) == 0.0
    assert loss_total(1.0, 1.0, 1.0) == 405.0
    assert loss_total(2.0, 1.0, 1.0) - loss_total(1.0, 1.0, 1.0) == 400.0
    with pytest.raises(ValueError):
        loss_total(float("nan"), 0.0, 0.0)


def _sites(coords, spacing=0.4):
    coords = np.asarray(coords, dtype=np.int64)
    return HeadSites(coords, coords * spacing)


def _head(logits, n_bins=12):
    n = len(logits)
    return HeadOutput(np.asarray(logits, dtype=float), np.tile([0.0, 0, 0, 4, 2, 1.5], (n, 1)),
                      np.zeros((n, n_bins)), np.zeros((n, n_bins)))


class TestDecode:
    config = DetectorConfig()

    def test_single_candidate(self):
        sites = _sites([[0, 0], [5, 5], [9, 9]])
        detections = decode(_head([2.0, -5.0, -5.0]), sites, self.config)
        assert len(detections) == 1
        assert detections[0].score == pytest.approx(1 / (1 + math.exp(-2.0)))
        assert (detections[0].box.cx, detections[0].box.cy) == (0.0, 0.0)

    def test_adjacent_sites_keep_the_higher(self):
        sites = _sites([[0, 0], [0, 1]])
        detections = decode(_head(logit([0.9, 0.8])), sites, self.config)
        assert [d.score for d in detections] == [pytest.approx(0.9)]

    def test_separate_peaks_sorted_by_score(self):
        sites = _sites([[0, 0], [0, 5]])
        detections = decode(_head(logit([0.6, 0.9])), sites, self.config)
        assert [d.score for d in detections] == [pytest.approx(0.9), pytest.approx(0.6)]

    def test_exact_tie_keeps_lexicographically_smallest(self):
        sites = _sites([[0, 1], [1, 1], [1, 2]])
        kept = local_maxima(sites, np.array([0.7, 0.7, 0.7]), 0.2)
        np.testing.assert_array_equal(kept, [0])

    def test_plateau_beside_a_higher_peak_keeps_its_far_end(self):
        sites = _sites([[0, 0], [0, 1], [0, 2]])
        kept = local_maxima(sites, np.array([0.9, 0.7, 0.7]), 0.2)
        np.testing.assert_array_equal(kept, [0, 2])
        detections = decode(_head(logit([0.9, 0.7, 0.7])), sites, self.config)
        assert [d.score for d in detections] == [pytest.approx(0.9), pytest.approx(0.7)]
        assert detections[1].box.cy == pytest.approx(0.8)

    def test_tie_chain_keeps_every_other_site(self):
        sites = _sites([[0, 0], [0, 1], [0, 2], [0, 3]])
        kept = local_maxima(sites, np.full(4, 0.5), 0.2)
        np.testing.assert_array_equal(kept, [0, 2])

    def test_maxima_are_exclusive(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            coords = np.unique(rng.integers(0, 12, size=(60, 2)), axis=0)
            scores = rng.random(len(coords))
            sites = _sites(coords)
            kept = local_maxima(sites, scores, 0.2)
            for a in kept:
                for b in kept:
                    if a != b:
                        assert np.abs(coords[a] - coords[b]).max() > 1
            for i in set(np.flatnonzero(scores > 0.2)) - set(kept):
                near = np.abs(coords - coords[i]).max(axis=1) <= 1
                assert scores[near].max() >= scores[i]

    def test_maxima_invariant_to_monotone_rescoring(self):
        rng = np.random.default_rng(7)
        coords = np.unique(rng.integers(0, 10, size=(50, 3)), axis=0)
        scores = rng.random(len(coords))
        sites = _sites(coords)
        np.testing.assert_array_equal(local_maxima(sites, scores, 0.3), local_maxima(sites, scores ** 3, 0.3 ** 3))

    def test_nothing_above_threshold(self):
        assert decode(_head([-5.0, -5.0]), _sites([[0, 0], [4, 4]]), self.config) == []


def test_planted_heads_decode_their_boxes():
    rng = np.random.default_rng(8)
    config = DetectorConfig()
    lattice = np.array([(i, j) for i in range(-3, 4) for j in range(-3, 4)])
    for _ in range(1000):
        anchor = rng.integers(-50, 50, size=2)
        coords = lattice + anchor
        sites = _sites(coords)
        center = (anchor + rng.uniform(-0.5, 0.5, 2)) * 0.4
        box = Box7(center[0], center[1], rng.uniform(-2, 1), rng.uniform(1, 5), rng.uniform(0.5, 3),
                   rng.uniform(1, 3), rng.uniform(-math.pi, math.pi))
        head = plant_head_output(sites, [box], config, margin=0.3)
        detections = decode(head, sites, config)
        assert len(detections) == 1
        decoded = detections[0].box
        np.testing.assert_allclose(decoded.as_array()[:6], box.as_array()[:6], atol=1e-9)
        assert wrap_angle(decoded.theta - box.theta) == pytest.approx(0.0, abs=1e-9)
        assert iou_3d(decoded, box) == pytest.approx(1.0, abs=1e-6)


def test_head_forward_splits_outputs():
    specs = head_layer_specs(4, 12)
    assert specs["head.weight"] == (4, 31)
    weights = {"head.weight": np.zeros((4, 31)), "head.bias": np.arange(31.0)}
    out = head_forward(np.ones((3, 4)), weights, 12)
    np.testing.assert_array_equal(out.heatmap_logits, [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(out.box_params[0], np.arange(1.0, 7.0))
    np.testing.assert_array_equal(out.bin_logits[0], np.arange(7.0, 19.0))
    np.testing.assert_array_equal(out.bin_residuals[0], np.arange(19.0, 31.0))
    with pytest.raises(ValueError):
        head_forward(np.ones((3, 5)), weights, 12)
    with pytest.raises(ValueError):
        head_forward(np.ones((3, 4)), weights, 4)
