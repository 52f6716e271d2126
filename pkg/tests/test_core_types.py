import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from conftest import random_pose
from evrgbd.camera import CameraModel, InvalidDepthError, project, unproject
from evrgbd.events import Event, EventArray, seconds_to_us
from evrgbd.frame import Frame, bilinear, build_pyramid
from evrgbd.geometry import (PoseSE3, matrix_to_quat, quat_to_matrix, relative_pose, se3_exp,
                             se3_log, so3_exp, so3_log)


CAM = CameraModel(100.0, 100.0, 50.0, 50.0, 200, 200)


# ---- geometry

def test_quaternion_matches_scipy(rng):
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        np.testing.assert_allclose(quat_to_matrix(q), Rotation.from_quat(q).as_matrix(), atol=1e-14)
        R = Rotation.from_quat(q).as_matrix()
        q2 = matrix_to_quat(R)
        assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-12


def test_so3_exp_log_roundtrip(rng):
    for scale in (1e-10, 1e-4, 0.5, 3.0):
        phi = rng.normal(size=3)
        phi *= scale / np.linalg.norm(phi)
        np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-12)
        np.testing.assert_allclose(so3_exp(phi), Rotation.from_rotvec(phi).as_matrix(), atol=1e-13)


def test_se3_exp_log_roundtrip(rng):
    for _ in range(50):
        xi = np.concatenate([rng.normal(size=3), rng.normal(scale=0.8, size=3)])
        np.testing.assert_allclose(se3_log(*se3_exp(xi)), xi, atol=1e-10)


def test_group_axioms(rng):
    for _ in range(100):
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = (a @ b) @ c
        rhs = a @ (b @ c)
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-12)
        np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-12)
        np.testing.assert_allclose((a.inverse() @ a).matrix(), np.eye(4), atol=1e-12)
        assert abs(np.linalg.norm(a.rotation) - 1.0) < 1e-9


def test_pose_normalises_quaternion():
    p = PoseSE3(np.array([0.0, 0.0, 0.0, 2.0]), np.zeros(3))
    assert abs(np.linalg.norm(p.rotation) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        PoseSE3(np.zeros(4), np.zeros(3))


def test_pose_is_immutable():
    p = PoseSE3.identity()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


def test_relative_pose_identity_when_equal(rng):
    a = random_pose(rng)
    np.testing.assert_allclose(relative_pose(a, a).matrix(), np.eye(4), atol=1e-12)


def test_relative_pose_from_identity(rng):
    b = random_pose(rng)
    np.testing.assert_allclose(relative_pose(PoseSE3.identity(), b).matrix(), b.matrix(), atol=1e-15)


def test_relative_pose_group_law(rng):
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose((a @ relative_pose(a, b)).matrix(), b.matrix(), atol=1e-12)


# ---- camera

def test_project_optical_axis():
    assert project(CAM, np.array([0.0, 0.0, 2.0])) == pytest.approx((50.0, 50.0))


def test_project_offset_point():
    assert project(CAM, np.array([1.0, 0.0, 2.0])) == pytest.approx((100.0, 50.0))


def test_project_behind_camera_is_out_of_view():
    assert project(CAM, np.array([0.0, 0.0, -1.0])) is None
    assert project(CAM, np.array([0.0, 0.0, 0.0])) is None


def test_project_out_of_bounds():
    assert project(CAM, np.array([10.0, 0.0, 1.0])) is None


def test_unproject_examples():
    np.testing.assert_allclose(unproject(CAM, 50, 50, 2.0), [0, 0, 2])
    np.testing.assert_allclose(unproject(CAM, 100, 50, 2.0), [1, 0, 2])


@pytest.mark.parametrize("depth", [0.0, -1.0])
def test_unproject_invalid_depth(depth):
    with pytest.raises(InvalidDepthError):
        unproject(CAM, 10, 10, depth)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 199), st.floats(0, 199), st.floats(0.1, 50.0))
def test_roundtrip_pinhole(u, v, z):
    p = unproject(CAM, u, v, z)
    uu, vv = project(CAM, p)
    assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9


def test_roundtrip_distorted(rng):
    cam = CameraModel(120.0, 118.0, 80.3, 59.7, 160, 120, k1=-0.12, k2=0.03, p1=1e-3, p2=-5e-4)
    u = rng.uniform(0, 159, 500)
    v = rng.uniform(0, 119, 500)
    z = rng.uniform(0.3, 10, 500)
    P = cam.unproject_points(u, v, z)
    uv, ok = cam.project_points(P)
    assert ok.all()
    assert np.abs(uv[:, 0] - u).max() < 1e-9 and np.abs(uv[:, 1] - v).max() < 1e-9


def test_projection_jacobian_fd(rng):
    cam = CameraModel(120.0, 118.0, 80.3, 59.7, 160, 120, k1=-0.12, k2=0.03, p1=1e-3, p2=-5e-4)
    P = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(2, 4, 20)])
    J = cam.projection_jacobian(P)
    h = 1e-6
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        num = (cam.project_points(P + d)[0] - cam.project_points(P - d)[0]) / (2 * h)
        np.testing.assert_allclose(J[:, :, k], num, atol=1e-5)


def test_scaled_camera_pixel_centres():
    c = CAM.scaled(1)
    assert c.fx == 50.0 and c.cx == pytest.approx((50.0 + 0.5) / 2 - 0.5)
    assert (c.width, c.height) == (100, 100)


# ---- frame / pyramid

@pytest.mark.parametrize("shape", [(72, 96), (71, 95), (13, 9)])
def test_pyramid_dimensions_floor(shape):
    img = np.zeros(shape, dtype=np.uint8)
    pyr = build_pyramid(img, 3)
    h, w = shape
    for lvl in pyr:
        assert lvl.shape == (h, w)
        h, w = h // 2, w // 2


def test_pyramid_level0_is_full_resolution():
    img = np.arange(64 * 48, dtype=np.float64).reshape(48, 64) % 255
    f = Frame(0.0, img.astype(np.uint8), np.ones((48, 64)))
    np.testing.assert_array_equal(f.pyramid[0], img.astype(np.uint8))


def test_frame_shape_mismatch():
    with pytest.raises(ValueError):
        Frame(0.0, np.zeros((4, 5), np.uint8), np.zeros((5, 4)))


def test_bilinear_matches_scipy(rng):
    from oracles import bilinear as ref
    img = rng.uniform(0, 255, (20, 30))
    u = rng.uniform(0, 29, 200)
    v = rng.uniform(0, 19, 200)
    val, ok = bilinear(img, u, v)
    assert ok.all()
    for i in range(200):
        assert val[i] == pytest.approx(ref(img, u[i], v[i]), abs=1e-10)
    _, ok = bilinear(img, np.array([-0.1, 29.01]), np.array([1.0, 1.0]))
    assert not ok.any()


# ---- events

def test_event_array_roundtrip():
    evs = [Event(1, 2, 3, 1), Event(5, 0, 0, -1)]
    arr = EventArray.from_events(evs)
    assert list(arr) == evs
    assert len(arr.between(1, 5)) == 1


def test_event_sortedness():
    arr = EventArray(np.array([1, 3, 2]), np.zeros(3), np.zeros(3), np.ones(3))
    assert not arr.is_sorted()
    assert arr.first_unsorted_index() == 2


def test_seconds_to_us():
    assert seconds_to_us(1.5) == 1_500_000
    assert seconds_to_us(0.0333333) == 33333
