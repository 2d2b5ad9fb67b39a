import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointseg.scene import (Box2D, Box3D, CameraExtrinsics, CameraIntrinsics, InstanceLabeling3D,
                            Mask2D, PosedFrame, ScenePointCloud, validate_scene)

from conftest import camera_frame


def _rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_valid_scene_has_empty_report():
    rng = np.random.default_rng(0)
    cloud = ScenePointCloud(rng.random((10, 3)))
    k = CameraIntrinsics(100, 100, 50, 50, 100, 100)
    frames = [PosedFrame(k, CameraExtrinsics(_rotation(rng), rng.random(3)), np.ones((100, 100)), frame_id=i)
              for i in range(2)]
    report = validate_scene(cloud, frames)
    assert report and report.problems == []


def test_scaled_rotation_row_reported():
    rot = np.eye(3)
    rot[0] *= 2
    k = CameraIntrinsics(100, 100, 50, 50, 100, 100)
    fr = PosedFrame(k, CameraExtrinsics(rot, np.zeros(3)), np.ones((100, 100)))
    report = validate_scene(ScenePointCloud(np.zeros((1, 3))), [fr])
    assert any("extrinsics not orthonormal" in p for p in report.problems)


def test_depth_dimension_mismatch_reported():
    k = CameraIntrinsics(100, 100, 64, 64, 128, 128)
    fr = PosedFrame(k, CameraExtrinsics(np.eye(3), np.zeros(3)), np.ones((64, 64)))
    report = validate_scene(ScenePointCloud(np.zeros((1, 3))), [fr])
    assert any("dimension mismatch" in p for p in report.problems)


def test_reflection_and_bad_values_reported():
    k = CameraIntrinsics(100, 100, 5, 5, 10, 10)
    refl = np.diag([1.0, 1.0, -1.0])
    depth = np.ones((10, 10))
    depth[0, 0] = -1
    fr = PosedFrame(k, CameraExtrinsics(refl, np.zeros(3)), depth)
    report = validate_scene(ScenePointCloud([[np.nan, 0, 0]]), [fr])
    text = " ".join(report.problems)
    assert "det" in text and "non-finite" in text and "negative" in text
    assert not validate_scene(ScenePointCloud(np.zeros((0, 3))), [])


def test_value_type_constraints():
    with pytest.raises(ValueError):
        Box3D([0, 0, 0], [1, 0, 1])
    with pytest.raises(ValueError):
        Box2D(0, 0, 0, 1)
    with pytest.raises(ValueError):
        Mask2D(np.array([[-1]]))
    with pytest.raises(ValueError):
        InstanceLabeling3D(np.array([0, 3]), 2)
    cloud = ScenePointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        cloud.positions[0, 0] = 1.0  # immutable after construction


def test_from_labels_compacts_in_first_appearance_order():
    lab = InstanceLabeling3D.from_labels([0, 7, 7, 3, 0, 9], scores={3: 0.5, 7: 0.9, 9: 0.1})
    assert lab.labels.tolist() == [0, 1, 1, 2, 0, 3]
    assert lab.num_instances == 3
    assert lab.scores.tolist() == [0.9, 0.5, 0.1]
    assert [x.tolist() for x in lab.instances()] == [[1, 2], [3], [5]]


def test_box_helpers():
    box = Box3D.from_points(np.array([[0, 0, 0], [2, 4, 6.0]]))
    assert np.allclose(box.center, [1, 2, 3]) and np.allclose(box.size, [2, 4, 6])
    assert box.contains(np.array([[1, 1, 1], [3, 0, 0]])).tolist() == [True, False]
    assert box.contains(np.array([[2.05, 0, 0]]), margin=0.1)[0]
    assert len(box.corners()) == 8
    sl = Box2D(1.5, 2.2, 3.0, 1.0).pixel_slices((10, 10))
    assert sl == (slice(2, 4), slice(1, 5))


def test_look_at_is_proper_rotation():
    ext = CameraExtrinsics.look_at([3, 1, 2], [0, 0, 0])
    rot = ext.rotation
    assert np.allclose(rot.T @ rot, np.eye(3)) and np.isclose(np.linalg.det(rot), 1)
    assert np.allclose(ext.camera_center(), [3, 1, 2])
    cam = rot @ np.zeros(3) + ext.translation
    assert cam[2] > 0 and np.allclose(cam[:2], 0, atol=1e-12)


def test_frame_shape():
    assert camera_frame(size=20).shape == (20, 20)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_round_trips_are_identity(seed):
    rng = np.random.default_rng(seed)
    cloud = ScenePointCloud(rng.normal(size=(5, 3)), rng.random((5, 3)))
    back = ScenePointCloud.from_dict(cloud.to_dict())
    assert np.array_equal(back.positions, cloud.positions) and np.array_equal(back.colors, cloud.colors)

    k = CameraIntrinsics(*rng.uniform(1, 500, 4).tolist(), 64, 48)
    assert CameraIntrinsics.from_dict(k.to_dict()) == k
    ext = CameraExtrinsics(_rotation(rng), rng.normal(size=3))
    back_e = CameraExtrinsics.from_dict(ext.to_dict())
    assert np.array_equal(back_e.rotation, ext.rotation) and np.array_equal(back_e.translation, ext.translation)

    box = Box3D(rng.normal(size=3), rng.uniform(0.1, 2, 3), label_hint=int(rng.integers(3)))
    back_b = Box3D.from_dict(box.to_dict())
    assert np.array_equal(back_b.center, box.center) and np.array_equal(back_b.size, box.size)
    assert back_b.label_hint == box.label_hint
    b2 = Box2D(*rng.uniform(0.1, 50, 4).tolist())
    assert Box2D.from_dict(b2.to_dict()) == b2

    lab = InstanceLabeling3D.from_labels(rng.integers(0, 5, 30))
    back_l = InstanceLabeling3D.from_dict(lab.to_dict())
    assert np.array_equal(back_l.labels, lab.labels) and back_l.num_instances == lab.num_instances


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=40))
def test_labels_have_no_gaps(raw):
    lab = InstanceLabeling3D.from_labels(raw)
    used = set(np.unique(lab.labels).tolist()) - {0}
    assert used == set(range(1, lab.num_instances + 1))
    # same partition as the input
    raw = np.asarray(raw)
    for a in range(len(raw)):
        for b in range(len(raw)):
            assert (raw[a] == raw[b]) == (lab.labels[a] == lab.labels[b])
