# tests/test_synth.py
import json
import math

import numpy as np
import pytest

from rsn.core import Box7, PEDESTRIAN_CLASS_ID, Rng, points_in_box
from rsn.geometry import iou_bev
from rsn.synth import (
    CLASS_DIMS,
    GROUND_Z,
    MANIFEST_NAME,
    load_scenes,
    ray_box_hits,
    sample_boxes,
    save_scenes,
    split_sequences,
    synth_scene,
    synth_sequence,
)


def test_no_boxes_gives_only_ground(make_scene):
    scene = make_scene(seed=1, n_boxes=0, n_bg_points=200)
    assert scene.boxes == () and len(scene.class_ids) == 0
    assert 0 < len(scene.points) <= 200
    np.testing.assert_allclose(scene.points[:, 2], GROUND_Z, atol=1e-9)


def test_same_seed_same_scene(make_scene):
    a, b = make_scene(seed=3), make_scene(seed=3)
    np.testing.assert_array_equal(a.points, b.points)
    assert a.boxes == b.boxes
    assert not np.array_equal(a.points, make_scene(seed=4).points)


def test_points_are_box_returns_or_ground(make_scene):
    for seed in range(5):
        scene = make_scene(seed=seed, n_boxes=4)
        assert len(scene.boxes) > 0
        inside_any = np.zeros(len(scene.points), dtype=bool)
        for box in scene.boxes:
            inside = points_in_box(scene.points, box)
            assert inside.any()
            inside_any |= inside
        ground = scene.points[~inside_any]
        np.testing.assert_allclose(ground[:, 2], GROUND_Z, atol=1e-9)


def test_boxes_rest_on_ground_and_never_overlap(make_scene):
    scene = make_scene(seed=6, n_boxes=5)
    for box in scene.boxes:
        assert box.z_min == pytest.approx(GROUND_Z)
        assert 8.0 <= math.hypot(box.cx, box.cy) <= 30.0
    for i, a in enumerate(scene.boxes):
        for b in scene.boxes[i + 1:]:
            assert iou_bev(a, b) == 0.0


def test_pedestrian_dimensions():
    boxes = sample_boxes(Rng(2), 6, PEDESTRIAN_CLASS_ID)
    (l_lo, l_hi), (w_lo, w_hi), _ = CLASS_DIMS[PEDESTRIAN_CLASS_ID]
    assert len(boxes) == 6
    assert all(l_lo <= b.l <= l_hi and w_lo <= b.w <= w_hi for b in boxes)


def test_sample_boxes_validation():
    with pytest.raises(ValueError):
        sample_boxes(Rng(0), -1)
    with pytest.raises(ValueError):
        sample_boxes(Rng(0), 1, class_id=9)
    with pytest.raises(ValueError):
        sample_boxes(Rng(0), 1, max_range=5.0)


def test_ray_box_hits_entry_and_exit():
    box = Box7(10.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0)
    directions = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    entry, exit_ = ray_box_hits(directions, box)
    assert entry[0] == pytest.approx(9.0) and exit_[0] == pytest.approx(11.0)
    assert np.isinf(entry[1]) and np.isinf(entry[2])


def test_sequence_frames_share_one_world():
    frames = synth_sequence(Rng(7), n_frames=3, n_boxes=2, n_bg_points=100, height=32, width=256)
    assert [f.timestamp for f in frames] == [0.0, 0.1, 0.2]
    assert [f.scene_id for f in frames] == ["seq-0000-0000", "seq-0000-0001", "seq-0000-0002"]
    world = [f.pose.apply_boxes(f.boxes) for f in frames]
    for later in world[1:]:
        for a, b in zip(world[0], later):
            np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-9)
    with pytest.raises(ValueError):
        synth_sequence(Rng(7), 0, 1, 10)


def test_scene_directory_round_trip(tmp_path):
    scenes = [synth_scene(Rng(i), 2, 100, height=32, width=256, scene_id=f"scene-{i:04d}") for i in range(3)]
    manifest = save_scenes(tmp_path, scenes, {"seed": 0})
    assert manifest.name == MANIFEST_NAME
    data = json.loads(manifest.read_text())
    assert data["metadata"] == {"seed": 0}
    assert [e["scene_id"] for e in data["scenes"]] == ["scene-0000", "scene-0001", "scene-0002"]

    loaded = load_scenes(tmp_path)
    for original, again in zip(scenes, loaded):
        np.testing.assert_array_equal(again.points, original.points)
        assert again.boxes == original.boxes
        np.testing.assert_array_equal(again.class_ids, original.class_ids)
        assert again.scene_id == original.scene_id


def test_load_scenes_needs_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scenes(tmp_path)


def test_split_sequences_breaks_on_timestamp_reset():
    first = synth_sequence(Rng(1), 3, 1, 20, height=32, width=256, sequence_id="seq-0000")
    second = synth_sequence(Rng(2), 2, 1, 20, height=32, width=256, sequence_id="seq-0001")
    single = [synth_scene(Rng(3), 1, 20, height=32, width=256, scene_id=f"scene-{i:04d}") for i in range(2)]
    runs = split_sequences(first + second + single)
    assert [[s.scene_id for s in run] for run in runs] == [
        ["seq-0000-0000", "seq-0000-0001", "seq-0000-0002"],
        ["seq-0001-0000", "seq-0001-0001"],
        ["scene-0000"],
        ["scene-0001"],
    ]
    assert split_sequences([]) == []
