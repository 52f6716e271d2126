import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evrgbd.camera import CameraModel, RigCalibration  # noqa: E402
from evrgbd.geometry import PoseSE3  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def smooth_image(w=96, h=72, seed=0):
    """Sum of low-frequency sinusoids in [20, 235]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.full((h, w), 128.0)
    for _ in range(4):
        fx, fy = rng.uniform(-0.08, 0.08, 2)
        img += rng.uniform(15, 25) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 6.3))
    return np.clip(img, 20, 235)


def random_pose(rng, rot_scale=1.0, trans_scale=1.0, timestamp=0.0):
    xi = np.concatenate([rng.normal(0, trans_scale, 3), rng.normal(0, rot_scale, 3)])
    return PoseSE3.exp(xi, timestamp)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_rig():
    rgb = CameraModel(80.0, 80.0, 47.5, 35.5, 96, 72)
    ev = CameraModel(60.0, 60.0, 39.5, 29.5, 80, 60)
    ext = PoseSE3.exp(np.array([0.03, -0.01, 0.005, 0.01, -0.02, 0.015]))
    return RigCalibration(rgb, ev, ext, 0.001)


@pytest.fixture(scope="session")
def small_sequence():
    """Half a second of slow drift through the textured room at 96x72."""
    from evrgbd.synthetic import (EventSimConfig, MotionProfile, Scene, Segment, SynthConfig,
                                  default_rig, make_sequence)
    rig = default_rig(96, 72, 80.0)
    profile = MotionProfile((Segment(0.5, linear=(0.1, 0.0, 0.05), angular=(0.0, 0.1, 0.0)),))
    cfg = SynthConfig(events=EventSimConfig(min_depth=1.5, seed=3))
    return make_sequence(Scene.textured_room(3), profile, rig, 30.0, cfg)
