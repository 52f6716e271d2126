"""Frame-by-frame visual odometry: branch selection, tracking and keyframe mapping."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import RigCalibration
from .events import EventArray, seconds_to_us
from .frame import Frame, build_pyramid
from .geometry import PoseSE3
from .mapping import (KeyframePolicy, Map, MappingConfig, TemporaryMapPoint, assess_keyframe_need,
                      build_temporary_event_map, create_map_points, reproject_depth_to_event,
                      visible_points)
from .pixel_selection import (EventSelectConfig, RgbPixelSelector, RgbSelectConfig,
                              select_ats_pixels)
from .time_surface import AtsConfig, SurfaceOfActiveEvents, render_ats
from .tracking import (TrackerConfig, TrackingFailure, constant_velocity_guess, motion_factor,
                       optimize_pose)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    ats: AtsConfig = field(default_factory=AtsConfig)
    rgb_select: RgbSelectConfig = field(default_factory=RgbSelectConfig)
    event_select: EventSelectConfig = field(default_factory=EventSelectConfig)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)


@dataclass
class FrameDiagnostics:
    index: int
    timestamp: float
    branch: str                 # "init", "rgb", "fused", "rgb_fallback", "failed"
    motion_factor: float = 0.0
    cost: float = float("nan")
    initial_cost: float = float("nan")
    inliers_rgb: int = 0
    inliers_event: int = 0
    temp_points: int = 0
    iterations: int = 0
    keyframe: bool = False

    FIELDS = ("index", "timestamp", "branch", "motion_factor", "cost", "initial_cost",
              "inliers_rgb", "inliers_event", "temp_points", "iterations", "keyframe")

    def row(self) -> str:
        vals = []
        for name in self.FIELDS:
            v = getattr(self, name)
            vals.append(f"{v:.9g}" if isinstance(v, float) else str(int(v) if isinstance(v, bool) else v))
        return ",".join(vals)


@dataclass
class TrackerState:
    rig: RigCalibration
    cfg: RunConfig
    map: Map = field(default_factory=Map)
    poses: list[PoseSE3] = field(default_factory=list)
    sae: SurfaceOfActiveEvents | None = None
    prev_frame: Frame | None = None
    prev_sae: SurfaceOfActiveEvents | None = None
    prev_events: EventArray = field(default_factory=EventArray.empty)
    temp_map: list[TemporaryMapPoint] = field(default_factory=list)
    selector: RgbPixelSelector | None = None
    frame_index: int = 0
    failed: bool = False

    def __post_init__(self):
        ev = self.rig.event_cam
        if self.sae is None:
            self.sae = SurfaceOfActiveEvents(ev.width, ev.height)
        if self.selector is None:
            self.selector = RgbPixelSelector(self.cfg.rgb_select)


def _insert_keyframe(state: TrackerState, frame: Frame, pose: PoseSE3, rounds: int = 1) -> int:
    pix = state.selector.select(frame.gray, rounds=rounds)
    kf_id = state.map.next_keyframe_id()
    pts, skipped = create_map_points(pix, frame, pose, state.rig.rgb_cam, kf_id)
    state.map.add_keyframe(pose, frame, pts)
    log.debug("keyframe %d: %d points (%d skipped)", kf_id, len(pts), skipped)
    return len(pts)


def _build_temp_map(state: TrackerState) -> tuple[list[TemporaryMapPoint], object]:
    cfg = state.cfg
    prev = state.prev_frame
    t_prev_us = seconds_to_us(prev.timestamp)
    ats_prev = render_ats(state.prev_sae, t_prev_us, cfg.ats)
    build_start = seconds_to_us(state.poses[-2].timestamp) if len(state.poses) > 1 else t_prev_us
    pix = select_ats_pixels(ats_prev, state.prev_events, build_start, cfg.event_select)
    depth_e = reproject_depth_to_event(prev.depth, state.rig)
    pyr = build_pyramid(ats_prev.gray, cfg.mapping.pyramid_levels)
    temp = build_temporary_event_map(pix, depth_e, pyr, state.poses[-1], state.rig, prev.timestamp)
    return temp, ats_prev


def track_frame(frame: Frame, events: EventArray, state: TrackerState,
                initial_pose: PoseSE3 | None = None) -> tuple[PoseSE3, FrameDiagnostics]:
    """Track one frame.  ``events`` are those with t in (previous frame, this frame]."""
    cfg = state.cfg
    rig = state.rig
    state.sae.ingest(events)
    idx = state.frame_index
    state.frame_index += 1

    if not state.poses:
        pose = (initial_pose or PoseSE3.identity()).with_timestamp(frame.timestamp)
        _insert_keyframe(state, frame, pose, rounds=3)
        diag = FrameDiagnostics(idx, frame.timestamp, "init", keyframe=True)
        _advance(state, frame, events, pose)
        return pose, diag

    prev_pose = state.poses[-1]
    factor = 0.0
    if len(state.poses) > 1:
        dt = prev_pose.timestamp - state.poses[-2].timestamp
        if dt > 0:
            factor = motion_factor(state.poses[-2], prev_pose, dt, cfg.tracker)
    visible = visible_points(state.map.local_points(cfg.mapping.active_keyframes),
                             prev_pose, rig.rgb_cam)

    branch = "rgb"
    temp: list[TemporaryMapPoint] = []
    ats_pyr = None
    tcfg = cfg.tracker
    if factor > 1.0 and tcfg.fused_enabled and tcfg.omega2 > 0:
        temp, _ = _build_temp_map(state)
        if temp:
            branch = "fused"
            ats_cur = render_ats(state.sae, seconds_to_us(frame.timestamp), cfg.ats)
            ats_pyr = build_pyramid(ats_cur.gray, cfg.mapping.pyramid_levels)
        else:
            branch = "rgb_fallback"
    state.temp_map = temp

    if branch == "fused":
        # event-based tracking only gets the zero-motion prediction
        guesses = [prev_pose.with_timestamp(frame.timestamp)]
        if tcfg.fused_warmup:
            # at fused-mode speeds T_{i-1} is usually outside the RGB basin, so the
            # event term alone pulls it in first and the joint solve starts from there
            try:
                warm, _ = optimize_pose([], temp, frame, ats_pyr, guesses,
                                        dataclasses.replace(tcfg, omega1=0.0), rig)
                guesses = [warm]
            except TrackingFailure:
                pass
    else:
        guesses = []
        if len(state.poses) > 1:
            guesses.append(constant_velocity_guess(state.poses[-2], prev_pose, frame.timestamp))
        guesses.append(prev_pose.with_timestamp(frame.timestamp))

    diag = FrameDiagnostics(idx, frame.timestamp, branch, factor, temp_points=len(temp))
    try:
        pose, stats = optimize_pose(visible, temp, frame, ats_pyr, guesses, tcfg, rig)
    except TrackingFailure as exc:
        log.warning("frame %d: tracking failed (%s); keeping previous pose", idx, exc)
        state.failed = True
        diag.branch = "failed"
        pose = prev_pose.with_timestamp(frame.timestamp)
        _advance(state, frame, events, pose)
        return pose, diag

    diag.cost = stats.cost
    diag.initial_cost = stats.initial_cost
    diag.inliers_rgb = stats.n_inliers_rgb
    diag.inliers_event = stats.n_inliers_event
    diag.iterations = stats.iterations
    h, w = frame.shape
    uv = stats.tracked_uv
    if assess_keyframe_need(uv[:, 0], uv[:, 1], w, h, cfg.keyframe) == "insert":
        _insert_keyframe(state, frame, pose)
        diag.keyframe = True
    _advance(state, frame, events, pose)
    return pose, diag


def _advance(state: TrackerState, frame: Frame, events: EventArray, pose: PoseSE3) -> None:
    state.poses.append(pose)
    del state.poses[:-3]
    state.prev_frame = frame
    state.prev_sae = state.sae.snapshot()
    state.prev_events = events


def run_odometry(frames, events: EventArray, rig: RigCalibration, cfg: RunConfig | None = None,
                 initial_pose: PoseSE3 | None = None, stop_on_failure: bool = False):
    """Track a whole sequence; returns (trajectory, diagnostics).

    With ``stop_on_failure`` the run ends at the first frame whose optimisation
    fails; that frame is reported in the diagnostics but gets no pose.
    """
    cfg = cfg or RunConfig()
    state = TrackerState(rig, cfg)
    traj, diags = [], []
    t_last = None
    for frame in frames:
        t_us = seconds_to_us(frame.timestamp)
        chunk = events.between(-1 if t_last is None else t_last, t_us)
        pose, diag = track_frame(frame, chunk, state, initial_pose)
        diags.append(diag)
        if stop_on_failure and diag.branch == "failed":
            break
        traj.append(pose)
        t_last = t_us
    return traj, diags
