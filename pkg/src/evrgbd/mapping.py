"""Keyframes, RGB map points and the short-lived event (ATS) map."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, RigCalibration
from .frame import Frame, bilinear
from .geometry import PoseSE3
from .pixel_selection import SelectedPixels

# (du, dv) sample offsets around a selected pixel, in pixels of each pyramid level
PATTERN9 = ((0, 0), (-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))
PATTERN14 = PATTERN9 + ((0, -2), (0, 2), (-2, 0), (2, 0), (2, 2))


def level_coords(u, v, level: int):
    """Level-0 pixel coordinates -> coordinates on pyramid level ``level``."""
    s = 2.0 ** -level
    return (np.asarray(u, dtype=np.float64) + 0.5) * s - 0.5, (np.asarray(v, dtype=np.float64) + 0.5) * s - 0.5


@dataclass(frozen=True)
class MapPoint:
    position: np.ndarray         # world frame
    host_keyframe: int
    z_arrays: np.ndarray         # (levels, 9)
    source: str = "rgb"


@dataclass(frozen=True)
class TemporaryMapPoint:
    position: np.ndarray         # world frame
    z_arrays: np.ndarray         # (levels, 14) sampled from the ATS pyramid
    creation_time: float


@dataclass(frozen=True)
class Keyframe:
    id: int
    pose: PoseSE3
    frame: Frame
    point_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class KeyframePolicy:
    region_health_min: int = 10
    healthy_regions_min: int = 6
    total_tracked_min: int = 150

    def __post_init__(self):
        if not 0 <= self.healthy_regions_min <= 9:
            raise ValueError("healthy_regions_min must be in [0, 9]")
        if self.region_health_min < 0 or self.total_tracked_min < 0:
            raise ValueError("policy thresholds must be non-negative")


@dataclass(frozen=True)
class MappingConfig:
    pyramid_levels: int = 3
    active_keyframes: int = 3

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.active_keyframes < 1:
            raise ValueError("active_keyframes must be >= 1")


def region_counts(u, v, width: int, height: int) -> np.ndarray:
    """Tracked-pixel counts over a 3x3 tiling of the image (row-major)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ok = (u >= 0) & (v >= 0) & (u < width) & (v < height)
    cx = np.minimum((3 * u[ok] / width).astype(int), 2)
    cy = np.minimum((3 * v[ok] / height).astype(int), 2)
    return np.bincount(cy * 3 + cx, minlength=9)


def assess_keyframe_need(u, v, width: int, height: int, policy: KeyframePolicy) -> str:
    counts = region_counts(u, v, width, height)
    healthy = int(np.count_nonzero(counts >= policy.region_health_min))
    if healthy < policy.healthy_regions_min or counts.sum() < policy.total_tracked_min:
        return "insert"
    return "keep"


def sample_pattern(pyramid, u, v, pattern) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples (N, levels, P) of ``pattern`` around level-0 pixels; plus all-valid mask."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    off = np.asarray(pattern, dtype=np.float64)
    out = np.zeros((len(u), len(pyramid), len(off)))
    ok = np.ones(len(u), dtype=bool)
    for level, img in enumerate(pyramid):
        lu, lv = level_coords(u, v, level)
        val, valid = bilinear(img, lu[:, None] + off[None, :, 0], lv[:, None] + off[None, :, 1])
        out[:, level] = val
        ok &= valid.all(axis=1)
    return out, ok


def create_map_points(pixels: SelectedPixels, frame: Frame, pose: PoseSE3, cam: CameraModel,
                      host_keyframe: int = 0, pattern=PATTERN9) -> tuple[list[MapPoint], int]:
    """Back-project selected pixels with valid depth; returns (points, skipped count)."""
    if len(pixels) == 0:
        return [], 0
    u, v = pixels.u, pixels.v
    d = frame.depth[v, u]
    good = d > 0
    z, ok = sample_pattern(frame.pyramid, u, v, pattern)
    good &= ok
    skipped = int(len(u) - np.count_nonzero(good))
    if not good.any():
        return [], skipped
    pc = cam.unproject_points(u[good], v[good], d[good])
    pw = pose.act(pc)
    zg = z[good]
    pts = [MapPoint(pw[i].copy(), host_keyframe, zg[i].copy(), pixels.source) for i in range(len(pw))]
    return pts, skipped


def reproject_depth_to_event(depth: np.ndarray, rig: RigCalibration) -> np.ndarray:
    """Z-buffered depth image of the event camera from an RGB-aligned depth image."""
    ev = rig.event_cam
    out = np.full((ev.height, ev.width), np.inf)
    vv, uu = np.nonzero(depth > 0)
    if len(uu) == 0:
        return np.zeros_like(out)
    pr = rig.rgb_cam.unproject_points(uu, vv, depth[vv, uu])
    pe = rig.T_rgb_to_event.act(pr)
    uv, valid = ev.project_points(pe)
    iu = np.rint(uv[valid, 0]).astype(np.int64)
    iv = np.rint(uv[valid, 1]).astype(np.int64)
    np.minimum.at(out, (iv, iu), pe[valid, 2])
    out[np.isinf(out)] = 0.0
    return out


_NEIGHBOURS = sorted(itertools.product((-1, 0, 1), repeat=2), key=lambda o: (abs(o[0]) + abs(o[1]), o))


def lookup_depth(depth: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Depth at (u, v), else the nearest valid neighbour within 1 px; 0 if none."""
    h, w = depth.shape
    out = np.zeros(len(u))
    todo = np.ones(len(u), dtype=bool)
    for du, dv in _NEIGHBOURS:
        uu, vv = u + du, v + dv
        inb = todo & (uu >= 0) & (vv >= 0) & (uu < w) & (vv < h)
        idx = np.nonzero(inb)[0]
        d = depth[vv[idx], uu[idx]]
        hit = idx[d > 0]
        out[hit] = d[d > 0]
        todo[hit] = False
    return out


def build_temporary_event_map(pixels: SelectedPixels, event_depth: np.ndarray, ats_pyramid,
                              pose: PoseSE3, rig: RigCalibration, creation_time: float = 0.0,
                              pattern=PATTERN14) -> list[TemporaryMapPoint]:
    """Temporary map from ATS-selected pixels.

    ``event_depth`` must already live in the event camera (see
    reproject_depth_to_event); ``pose`` is the RGB camera-to-world pose.
    """
    if len(pixels) == 0:
        return []
    u, v = pixels.u, pixels.v
    d = lookup_depth(event_depth, u, v)
    z, ok = sample_pattern(ats_pyramid, u, v, pattern)
    good = (d > 0) & ok
    if not good.any():
        return []
    pe = rig.event_cam.unproject_points(u[good], v[good], d[good])
    pw = pose.compose(rig.T_rgb_to_event.inverse()).act(pe)
    zg = z[good]
    return [TemporaryMapPoint(pw[i], zg[i], creation_time) for i in range(len(pw))]


def visible_mask(positions: np.ndarray, pose: PoseSE3, cam: CameraModel) -> np.ndarray:
    if len(positions) == 0:
        return np.zeros(0, dtype=bool)
    pc = pose.inverse().act(positions)
    return cam.project_points(pc)[1]


def visible_points(points, pose: PoseSE3, cam: CameraModel) -> list:
    """Points projecting in-bounds with positive depth; ``pose`` is camera-to-world."""
    if not points:
        return []
    mask = visible_mask(np.array([p.position for p in points]), pose, cam)
    return [p for p, m in zip(points, mask) if m]


@dataclass
class Map:
    """Keyframes plus their points.  Keyframe poses never change after insertion."""

    keyframes: list[Keyframe] = field(default_factory=list)
    points: list[MapPoint] = field(default_factory=list)

    def add_keyframe(self, pose: PoseSE3, frame: Frame, points: list[MapPoint]) -> Keyframe:
        start = len(self.points)
        kf = Keyframe(len(self.keyframes), pose, frame, tuple(range(start, start + len(points))))
        self.keyframes.append(kf)
        self.points.extend(points)
        return kf

    def next_keyframe_id(self) -> int:
        return len(self.keyframes)

    def local_points(self, n_keyframes: int) -> list[MapPoint]:
        out = []
        for kf in self.keyframes[-n_keyframes:]:
            out.extend(self.points[i] for i in kf.point_ids)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("x,y,z,source\n")
            for p in self.points:
                f.write(f"{p.position[0]:.9g},{p.position[1]:.9g},{p.position[2]:.9g},{p.source}\n")
