import math

import numpy as np
import pytest

import oracles
from conftest import smooth_image
from evrgbd.camera import CameraModel, RigCalibration
from evrgbd.events import EventArray
from evrgbd.frame import Frame, build_pyramid
from evrgbd.geometry import PoseSE3, pose_distance
from evrgbd.mapping import PATTERN9, PATTERN14, TemporaryMapPoint, create_map_points
from evrgbd.odometry import RunConfig, TrackerState, run_odometry, track_frame
from evrgbd.pixel_selection import RgbPixelSelector, RgbSelectConfig
from evrgbd.synthetic import Scene, render_view
from evrgbd.tracking import (TrackerConfig, TrackingFailure, constant_velocity_guess, motion_factor,
                             optimize_pose, residual_event, residual_rgb)

CAM = CameraModel(120.0, 120.0, 79.5, 59.5, 160, 120)
RIG = RigCalibration(CAM, CameraModel(90.0, 90.0, 59.5, 44.5, 120, 90),
                     PoseSE3.exp(np.array([0.02, -0.01, 0.0, 0.01, 0.02, -0.01])), 0.001)


def perturb(pose, rng, deg, cm):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    xi = np.concatenate([d * cm / 100.0, axis * math.radians(deg)])
    return pose.compose(PoseSE3.exp(xi))


def host_map(scene, pose, cam=CAM, levels=3, supersample=1):
    gray, depth = render_view(scene, cam, pose, supersample)
    f = Frame(0.0, gray, depth, levels)
    pix = RgbPixelSelector(RgbSelectConfig(block_size=32, target_per_block=40)).select(gray, rounds=3)
    pts, _ = create_map_points(pix, f, pose, cam)
    return f, pts


def fd_relative_error(res, pose, h=1e-7):
    e0, J = res(pose, True)
    num = np.zeros_like(J)
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        # left twist on world-to-camera == right twist (negated) on camera-to-world
        ep = res(pose.compose(PoseSE3.exp(-d)), False)
        em = res(pose.compose(PoseSE3.exp(d)), False)
        num[:, k] = (ep - em) / (2 * h)
    return np.abs(J - num).max() / max(np.abs(num).max(), 1.0)


def near_cell_edge(uv, pattern, level, margin=1e-3):
    s = 2.0 ** -level
    for du, dv in pattern:
        for c in ((uv[0] + 0.5) * s - 0.5 + du, (uv[1] + 0.5) * s - 0.5 + dv):
            if abs(c - round(c)) < margin:
                return True
    return False


def test_rgb_jacobian_matches_finite_differences(rng):
    img = smooth_image(160, 120, seed=7).astype(np.uint8)
    f = Frame(0.0, img, np.full(img.shape, 2.0), 3)
    n_checked = 0
    while n_checked < 100:
        pos = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.6, 0.6), rng.uniform(1.5, 3.0)])
        pt = type("P", (), {"position": pos, "z_arrays": rng.uniform(0, 255, (3, 9))})()
        T = PoseSE3.exp(np.concatenate([rng.normal(0, 0.05, 3), rng.normal(0, 0.05, 3)]))
        level = int(rng.integers(0, 3))
        Tinv = np.linalg.inv(oracles.to_matrix(T))
        pc = Tinv[:3, :3] @ pos + Tinv[:3, 3]
        uv = oracles.project(CAM.fx, CAM.fy, CAM.cx, CAM.cy, pc)
        if near_cell_edge(uv, PATTERN9, level):
            continue

        def res(pose, jac):
            return residual_rgb(pt, pose, f, CAM, level, jacobian=jac)
        if res(T, False) is None:
            continue
        assert fd_relative_error(res, T) < 1e-4
        n_checked += 1


def test_event_jacobian_matches_finite_differences(rng):
    ats = build_pyramid(smooth_image(120, 90, seed=8).astype(np.uint8), 3)
    ev = RIG.event_cam
    E = oracles.to_matrix(RIG.T_rgb_to_event)
    n_checked = 0
    while n_checked < 100:
        pos = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.6, 0.6), rng.uniform(1.5, 3.0)])
        pt = TemporaryMapPoint(pos, rng.uniform(0, 255, (3, 14)), 0.0)
        T = PoseSE3.exp(np.concatenate([rng.normal(0, 0.05, 3), rng.normal(0, 0.05, 3)]))
        level = int(rng.integers(0, 3))
        M = E @ np.linalg.inv(oracles.to_matrix(T))
        pe = M[:3, :3] @ pos + M[:3, 3]
        uv = oracles.project(ev.fx, ev.fy, ev.cx, ev.cy, pe)
        if near_cell_edge(uv, PATTERN14, level):
            continue

        def res(pose, jac):
            return residual_event(pt, pose, ats, RIG, level, jacobian=jac)
        if res(T, False) is None:
            continue
        assert fd_relative_error(res, T) < 1e-4
        n_checked += 1


def test_residual_zero_at_host_pose():
    scene = Scene.textured_room(0)
    pose = PoseSE3.exp(np.array([0.1, 0.0, 0.2, 0.0, 0.2, 0.0]))
    f, pts = host_map(scene, pose)
    assert len(pts) > 100
    for lvl in range(3):
        for p in pts[::7]:
            e = residual_rgb(p, pose, f, CAM, lvl)
            assert e is not None and np.abs(e).max() < 1e-9


def test_residual_constant_frame_is_zero():
    f = Frame(0.0, np.full((120, 160), 90, np.uint8), np.full((120, 160), 2.0))
    pt = type("P", (), {"position": np.array([0.1, 0.1, 2.0]), "z_arrays": np.full((3, 9), 90.0)})()
    e = residual_rgb(pt, PoseSE3.exp(np.array([0.01, 0, 0, 0, 0.01, 0])), f, CAM, 0)
    assert np.abs(e).max() == 0


def test_residual_matches_bruteforce_on_render(rng):
    scene = Scene.textured_room(0)
    host = PoseSE3.identity()
    f0, pts = host_map(scene, host)
    cur = perturb(host, rng, 1.0, 2.0)
    gray, depth = render_view(scene, CAM, cur)
    f1 = Frame(0.0, gray, depth, 3)
    Tinv = np.linalg.inv(oracles.to_matrix(cur))
    checked = 0
    for p in pts[::5]:
        e = residual_rgb(p, cur, f1, CAM, 0)
        pc = Tinv[:3, :3] @ p.position + Tinv[:3, 3]
        u, v = oracles.project(CAM.fx, CAM.fy, CAM.cx, CAM.cy, pc)
        ref = [p.z_arrays[0][k] - oracles.bilinear(f1.pyramid[0], u + du, v + dv)
               for k, (du, dv) in enumerate(PATTERN9)]
        if min(u, v) < 2 or u > CAM.width - 3 or v > CAM.height - 3:
            continue
        np.testing.assert_allclose(e, ref, atol=1e-9)
        checked += 1
    assert checked > 20


def test_residual_out_of_view_is_none():
    f = Frame(0.0, np.zeros((120, 160), np.uint8), np.ones((120, 160)))
    pt = type("P", (), {"position": np.array([0.0, 0.0, -1.0]), "z_arrays": np.zeros((3, 9))})()
    assert residual_rgb(pt, PoseSE3.identity(), f, CAM) is None
    pt.position = np.array([5.0, 0.0, 1.0])
    assert residual_rgb(pt, PoseSE3.identity(), f, CAM) is None


def test_identity_extrinsic_event_residual_equals_rgb_with_14_pattern(rng):
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    img = smooth_image(160, 120, seed=2).astype(np.uint8)
    f = Frame(0.0, img, np.ones(img.shape), 3)
    pt = TemporaryMapPoint(np.array([0.1, -0.05, 2.0]), rng.uniform(0, 255, (3, 14)), 0.0)
    T = PoseSE3.exp(np.array([0.01, 0.02, 0.0, 0.01, 0.0, 0.02]))
    for lvl in range(3):
        a = residual_event(pt, T, f.pyramid, rig, lvl)
        b = residual_rgb(pt, T, f, CAM, lvl, pattern=PATTERN14)
        np.testing.assert_array_equal(a, b)


# ---- motion factor

def test_motion_factor_examples():
    cfg = TrackerConfig(motion_omega_max=5.0)
    a = PoseSE3.identity(0.0)
    assert motion_factor(a, a, 0.033, cfg) == 0.0
    b = PoseSE3.exp(np.array([0, 0, 0, 0, 0, 0.1]), 0.02)
    assert motion_factor(a, b, 0.02, cfg) == pytest.approx(1.0)
    # 510 deg/s over one 30 Hz frame with the default thresholds
    flip = PoseSE3.exp(np.array([0, 0, 0, math.radians(510) / 30, 0, 0]), 1 / 30)
    assert motion_factor(a, flip, 1 / 30, TrackerConfig()) > 1.0
    with pytest.raises(ValueError):
        motion_factor(a, b, 0.0, cfg)


def test_motion_factor_combines_translation():
    cfg = TrackerConfig(motion_omega_max=1.0, motion_v_max=2.0)
    b = PoseSE3.exp(np.array([0.1, 0, 0, 0, 0, 0.05]), 0.1)
    assert motion_factor(PoseSE3.identity(), b, 0.1, cfg) == pytest.approx(0.5 + 0.5, rel=1e-9)


def test_constant_velocity_guess_extrapolates():
    a = PoseSE3.identity(0.0)
    b = PoseSE3.exp(np.array([0.1, 0, 0, 0, 0.05, 0]), 1.0)
    c = constant_velocity_guess(a, b, 2.0)
    np.testing.assert_allclose(c.log(), 2 * b.log(), atol=1e-12)
    assert c.timestamp == 2.0


# ---- optimisation

@pytest.fixture(scope="module")
def recovery_setup():
    scene = Scene.textured_room(0)
    host = PoseSE3.exp(np.array([0.05, 0.02, 0.1, 0.02, 0.1, 0.0]))
    _, pts = host_map(scene, host)
    cur = host.compose(PoseSE3.exp(np.array([0.02, 0.0, 0.01, 0.0, 0.01, 0.005])))
    gray, depth = render_view(scene, CAM, cur)
    return pts, Frame(0.0, gray, depth, 3), cur


def test_optimize_from_ground_truth_stays():
    # host frame at the host pose: residuals vanish, so the guess must come back unchanged
    scene = Scene.textured_room(0)
    host = PoseSE3.exp(np.array([0.05, 0.02, 0.1, 0.02, 0.1, 0.0]))
    f, pts = host_map(scene, host)
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    pose, st = optimize_pose(pts, [], f, None, [host], TrackerConfig(), rig)
    r, t = pose_distance(pose, host)
    assert r < 1e-9 and t < 1e-9
    assert st.cost <= 1e-6


def test_pose_recovery_small_perturbations(recovery_setup, rng):
    pts, frame, gt = recovery_setup
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    ok = 0
    for _ in range(10):
        pose, _ = optimize_pose(pts, [], frame, None, [perturb(gt, rng, 2.0, 5.0)], TrackerConfig(), rig)
        r, t = pose_distance(pose, gt)
        ok += math.degrees(r) <= 0.2 and t <= 0.005
    assert ok >= 9


def test_accepted_steps_never_increase_cost(recovery_setup, rng):
    pts, frame, gt = recovery_setup
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    _, st = optimize_pose(pts, [], frame, None, [perturb(gt, rng, 2.0, 5.0)], TrackerConfig(), rig)
    assert st.accepted_steps
    assert all(new <= old for old, new in st.accepted_steps)


def test_order_invariance(recovery_setup, rng):
    pts, frame, gt = recovery_setup
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    guess = perturb(gt, rng, 1.0, 3.0)
    a, _ = optimize_pose(pts, [], frame, None, [guess], TrackerConfig(), rig)
    shuffled = [pts[i] for i in rng.permutation(len(pts))]
    b, _ = optimize_pose(shuffled, [], frame, None, [guess], TrackerConfig(), rig)
    np.testing.assert_array_equal(a.matrix(), b.matrix())


def test_omega2_zero_makes_event_term_inert(recovery_setup, rng):
    pts, frame, gt = recovery_setup
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    temp = [TemporaryMapPoint(p.position, rng.uniform(0, 255, (3, 14)), 0.0) for p in pts[:50]]
    guess = perturb(gt, rng, 1.0, 3.0)
    cfg = TrackerConfig(omega2=0.0)
    a, _ = optimize_pose(pts, [], frame, None, [guess], cfg, rig)
    b, _ = optimize_pose(pts, temp, frame, frame.pyramid, [guess], cfg, rig)
    np.testing.assert_array_equal(a.matrix(), b.matrix())


def test_lowest_cost_guess_wins(recovery_setup, rng):
    pts, frame, gt = recovery_setup
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    far = perturb(gt, rng, 25.0, 60.0)
    pose, st = optimize_pose(pts, [], frame, None, [far, gt], TrackerConfig(), rig)
    assert st.guess_index == 1
    r, t = pose_distance(pose, gt)
    assert math.degrees(r) < 0.2 and t < 0.005


def test_cost_basin_on_grid(recovery_setup):
    pts, frame, gt = recovery_setup
    rig = RigCalibration(CAM, CAM, PoseSE3.identity(), 0.001)
    cfg = TrackerConfig(max_iters_per_level=1, convergence_eps=1e30)

    def cost(pose):
        # a single evaluation: LM with no usable step leaves the pose unchanged
        return optimize_pose(pts, [], frame, None, [pose], cfg, rig)[1].initial_cost

    c0 = cost(gt)
    for k in range(6):
        for sign in (-1, 1):
            xi = np.zeros(6)
            xi[k] = sign * (0.02 if k < 3 else math.radians(1.0))
            assert cost(gt.compose(PoseSE3.exp(xi))) > c0


def test_no_points_raises():
    f = Frame(0.0, np.zeros((120, 160), np.uint8), np.ones((120, 160)))
    with pytest.raises(TrackingFailure):
        optimize_pose([], [], f, None, [PoseSE3.identity()], TrackerConfig(), RIG)


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(omega1=-1)
    with pytest.raises(ValueError):
        TrackerConfig(motion_v_max=0)


# ---- per-frame tracking

def static_sequence(n=6):
    scene = Scene.textured_room(0)
    rig = RigCalibration(CAM, RIG.event_cam, PoseSE3.identity(), 0.001)
    gray, depth = render_view(scene, CAM, PoseSE3.identity())
    return [Frame(i / 30, gray, depth, 3) for i in range(n)], rig


def test_static_sequence_rgb_every_frame():
    frames, rig = static_sequence()
    traj, diags = run_odometry(frames, EventArray.empty(), rig)
    assert [d.branch for d in diags] == ["init"] + ["rgb"] * (len(frames) - 1)
    for p in traj:
        r, t = pose_distance(p, PoseSE3.identity())
        assert r < 1e-6 and t < 1e-6


def test_empty_temporary_map_falls_back():
    frames, rig = static_sequence(4)
    # a fast motion history forces the fused branch, but there are no events
    state = TrackerState(rig, RunConfig())
    track_frame(frames[0], EventArray.empty(), state)
    state.poses = [PoseSE3.exp(np.array([0, 0, 0, 0, -0.3, 0]), -1 / 30),
                   PoseSE3.identity(0.0)]
    _, diag = track_frame(frames[1], EventArray.empty(), state)
    assert diag.motion_factor > 1 and diag.branch == "rgb_fallback"
