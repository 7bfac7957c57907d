import numpy as np
import pytest

from episcore.geometry import CameraIntrinsics, RelativePose


def random_rotation(gen, max_angle_deg=30.0):
    axis = gen.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(gen.uniform(1.0, max_angle_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def random_pose(gen, max_angle_deg=30.0):
    R = random_rotation(gen, max_angle_deg)
    t = gen.normal(size=3)
    t /= np.linalg.norm(t)
    return RelativePose(R, t)


def make_correspondences(pose, kA, kB, n, gen, depth_range=(4.0, 10.0)):
    """Noiseless projections of random 3D points in front of both cameras."""
    pa, pb, pts = [], [], []
    while len(pa) < n:
        pix = gen.uniform(5, 58, size=2)
        z = gen.uniform(*depth_range)
        X = z * (kA.inverse @ np.array([pix[0], pix[1], 1.0]))
        Xb = pose.rotation @ X + pose.translation
        if Xb[2] <= 0.1:
            continue
        pb_px = (kB.matrix @ Xb)[:2] / Xb[2]
        pa.append(pix)
        pb.append(pb_px)
        pts.append(X)
    return np.array(pa), np.array(pb), np.array(pts)


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(fx=70.0, fy=70.0, cx=31.5, cy=31.5)


@pytest.fixture
def identity_intrinsics():
    return CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
