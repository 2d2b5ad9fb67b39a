import numpy as np
import pytest

from pointseg import synthbench
from pointseg.scene import CameraExtrinsics, CameraIntrinsics, PosedFrame


def camera_frame(depth=None, f=100.0, size=100, frame_id=0):
    """Camera at the world origin looking down +z (camera frame == world frame)."""
    k = CameraIntrinsics(f, f, size / 2, size / 2, size, size)
    ext = CameraExtrinsics(np.eye(3), np.zeros(3))
    if depth is None:
        depth = np.zeros((size, size), np.float32)
    return PosedFrame(k, ext, depth, frame_id=frame_id)


@pytest.fixture(scope="session")
def small_scene():
    spec = synthbench.SceneSpec(num_instances=3, points_per_instance=1500, num_frames=10)
    return synthbench.generate_scene(spec, seed=3)


@pytest.fixture(scope="session")
def small_truth(small_scene):
    return small_scene.truth()
