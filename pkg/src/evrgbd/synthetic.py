"""Deterministic ray-cast renderer, motion profiles and an ideal event generator.

Scenes are sets of textured rectangles.  Each rectangle carries a smooth
procedural texture (a soft checker plus a few sinusoids) so that direct
alignment has usable gradients at every pyramid level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .camera import CameraModel, RigCalibration
from .events import EventArray
from .frame import Frame
from .geometry import PoseSE3, so3_exp

log_floor = 1.0  # keeps log() finite for fully dark texture values


@dataclass(frozen=True)
class Texture:
    """Gray value (0-255 float) as a function of rectangle coordinates (meters)."""

    base: float = 128.0
    checker_amp: float = 60.0
    checker_period: float = 0.5
    checker_sharpness: float = 3.0
    sine_amps: tuple[float, ...] = ()
    sine_freqs: tuple[tuple[float, float], ...] = ()   # cycles per meter along (s, t)
    sine_phases: tuple[float, ...] = ()

    @classmethod
    def random(cls, rng: np.random.Generator, base=None, n_sines: int = 4) -> Texture:
        amps = tuple(float(a) for a in rng.uniform(8.0, 20.0, n_sines))
        freqs = tuple((float(a), float(b)) for a, b in rng.uniform(-3.0, 3.0, (n_sines, 2)))
        phases = tuple(float(p) for p in rng.uniform(0, 2 * np.pi, n_sines))
        return cls(
            base=float(rng.uniform(100, 150)) if base is None else base,
            checker_amp=float(rng.uniform(40, 60)),
            checker_period=float(rng.uniform(0.35, 0.8)),
            checker_sharpness=float(rng.uniform(2.0, 4.0)),
            sine_amps=amps, sine_freqs=freqs, sine_phases=phases,
        )

    def __call__(self, s, t):
        s = np.asarray(s, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        k = 2.0 * np.pi / self.checker_period
        val = self.base + self.checker_amp * np.tanh(
            self.checker_sharpness * np.sin(k * s) * np.sin(k * t))
        for a, (fs, ft), ph in zip(self.sine_amps, self.sine_freqs, self.sine_phases):
            val = val + a * np.sin(2.0 * np.pi * (fs * s + ft * t) + ph)
        return np.clip(val, 5.0, 250.0)


@dataclass(frozen=True)
class Rect:
    origin: tuple[float, float, float]
    axis_u: tuple[float, float, float]      # unit vector
    axis_v: tuple[float, float, float]      # unit vector, orthogonal to axis_u
    size_u: float
    size_v: float
    texture: Texture

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)


@dataclass(frozen=True)
class Scene:
    rects: tuple[Rect, ...]
    background: float = 0.0

    @classmethod
    def plane(cls, distance: float = 2.0, texture: Texture | None = None, half_size: float = 50.0) -> Scene:
        """Fronto-parallel plane z = distance facing a camera at the origin."""
        tex = texture or Texture()
        return cls((Rect((-half_size, -half_size, distance), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                         2 * half_size, 2 * half_size, tex),))

    @classmethod
    def textured_room(cls, seed: int = 0, half_width: float = 3.0, half_height: float = 1.5,
                      z_near: float = -2.5, z_far: float = 4.0, boxes: bool = True) -> Scene:
        rng = np.random.default_rng(seed)
        w, h = half_width, half_height
        rects = []

        def add_box_faces(lo, hi, inward):
            lo = np.asarray(lo, float)
            hi = np.asarray(hi, float)
            sx, sy, sz = hi - lo
            faces = [
                # (origin, axis_u, axis_v, size_u, size_v); normal = u x v
                ((lo[0], lo[1], hi[2]), (1, 0, 0), (0, 1, 0), sx, sy),   # +z face, normal +z
                ((hi[0], lo[1], lo[2]), (-1, 0, 0), (0, 1, 0), sx, sy),  # -z face, normal -z
                ((hi[0], lo[1], lo[2]), (0, 1, 0), (0, 0, 1), sy, sz),   # +x face
                ((lo[0], lo[1], hi[2]), (0, 1, 0), (0, 0, -1), sy, sz),  # -x face
                ((lo[0], hi[1], lo[2]), (0, 0, 1), (1, 0, 0), sz, sx),   # +y face
                ((lo[0], lo[1], lo[2]), (1, 0, 0), (0, 0, 1), sx, sz),   # -y face
            ]
            for o, u, v, su, sv in faces:
                rects.append(Rect(tuple(map(float, o)), tuple(map(float, u)), tuple(map(float, v)),
                                  float(su), float(sv), Texture.random(rng)))

        add_box_faces((-w, -h, z_near), (w, h, z_far), inward=True)
        if boxes:
            add_box_faces((-1.3, -0.1, 2.2), (-0.5, 0.7, 2.9), inward=False)
            add_box_faces((0.6, -0.9, 2.6), (1.5, 0.2, 3.3), inward=False)
        return cls(tuple(rects))


@njit(cache=True)
def _raycast(dx, dy, R, o, geom, tex, sines, background, gray, depth):
    h, w = dx.shape
    n_rect = geom.shape[0]
    # per-rectangle offsets from the camera centre and plane distances
    rel = np.empty((n_rect, 4))
    for i in range(n_rect):
        rel[i, 0] = geom[i, 0] - o[0]
        rel[i, 1] = geom[i, 1] - o[1]
        rel[i, 2] = geom[i, 2] - o[2]
        rel[i, 3] = rel[i, 0] * geom[i, 9] + rel[i, 1] * geom[i, 10] + rel[i, 2] * geom[i, 11]
    for r in range(h):
        for c in range(w):
            wx = R[0, 0] * dx[r, c] + R[0, 1] * dy[r, c] + R[0, 2]
            wy = R[1, 0] * dx[r, c] + R[1, 1] * dy[r, c] + R[1, 2]
            wz = R[2, 0] * dx[r, c] + R[2, 1] * dy[r, c] + R[2, 2]
            best = np.inf
            hit = -1
            bs = 0.0
            bt = 0.0
            for i in range(n_rect):
                denom = wx * geom[i, 9] + wy * geom[i, 10] + wz * geom[i, 11]
                if denom == 0.0:
                    continue
                tt = rel[i, 3] / denom
                if not (tt > 1e-9 and tt < best):
                    continue
                hx = wx * tt - rel[i, 0]
                hy = wy * tt - rel[i, 1]
                hz = wz * tt - rel[i, 2]
                s = hx * geom[i, 3] + hy * geom[i, 4] + hz * geom[i, 5]
                t = hx * geom[i, 6] + hy * geom[i, 7] + hz * geom[i, 8]
                if s >= 0.0 and s <= geom[i, 12] and t >= 0.0 and t <= geom[i, 13]:
                    best = tt
                    hit = i
                    bs = s
                    bt = t
            if hit < 0:
                gray[r, c] = background
                depth[r, c] = 0.0
                continue
            depth[r, c] = best
            k = 2.0 * np.pi / tex[hit, 2]
            val = tex[hit, 0] + tex[hit, 1] * np.tanh(tex[hit, 3] * np.sin(k * bs) * np.sin(k * bt))
            for j in range(sines.shape[1]):
                val += sines[hit, j, 0] * np.sin(
                    2.0 * np.pi * (sines[hit, j, 1] * bs + sines[hit, j, 2] * bt) + sines[hit, j, 3])
            gray[r, c] = min(max(val, 5.0), 250.0)


class Renderer:
    """Ray caster over the scene's rectangles; caches per-camera ray directions.

    ``supersample`` = k (odd) averages gray over a k x k grid of rays per pixel,
    a box prefilter that keeps grazing surfaces from aliasing.  Depth always
    comes from the central ray.
    """

    def __init__(self, scene: Scene, cam: CameraModel, supersample: int = 1):
        if supersample < 1 or supersample % 2 == 0:
            raise ValueError("supersample must be a positive odd integer")
        self.scene = scene
        self.cam = cam
        self.supersample = supersample
        vs, us = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
        offs = (np.arange(supersample) - supersample // 2) / supersample
        # central ray first so its depth can be kept
        grid = sorted(((a, b) for a in offs for b in offs), key=lambda o: (o != (0.0, 0.0), o))
        self.rays = []
        for ou, ov in grid:
            u, v = us + ou, vs + ov
            if cam.distorted:
                d = cam.unproject_points(u.ravel(), v.ravel(), np.ones(u.size))
                self.rays.append((d[:, 0].reshape(us.shape), d[:, 1].reshape(us.shape)))
            else:
                self.rays.append(((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy))
        self.dx, self.dy = self.rays[0]
        n = len(scene.rects)
        n_sines = max([len(rc.texture.sine_amps) for rc in scene.rects] + [0])
        self.geom = np.zeros((n, 14))
        self.tex = np.zeros((n, 4))
        self.sines = np.zeros((n, max(n_sines, 1), 4))
        for i, rc in enumerate(scene.rects):
            self.geom[i] = (*rc.origin, *rc.axis_u, *rc.axis_v, *rc.normal, rc.size_u, rc.size_v)
            tx = rc.texture
            self.tex[i] = (tx.base, tx.checker_amp, tx.checker_period, tx.checker_sharpness)
            for j, (a, (fs, ft), ph) in enumerate(zip(tx.sine_amps, tx.sine_freqs, tx.sine_phases)):
                self.sines[i, j] = (a, fs, ft, ph)

    def render(self, pose: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
        """(float gray 0-255, z-depth in meters with 0 = no hit) for camera-to-world ``pose``."""
        R = np.ascontiguousarray(pose.R)
        o = np.array(pose.translation)
        bg = float(self.scene.background)
        gray = np.empty(self.dx.shape)
        depth = np.empty(self.dx.shape)
        _raycast(self.dx, self.dy, R, o, self.geom, self.tex, self.sines, bg, gray, depth)
        if len(self.rays) > 1:
            g, d = np.empty_like(gray), np.empty_like(depth)
            for dx, dy in self.rays[1:]:
                _raycast(dx, dy, R, o, self.geom, self.tex, self.sines, bg, g, d)
                gray += g
            gray /= len(self.rays)
        return gray, depth


def render_view(scene: Scene, cam: CameraModel, pose: PoseSE3,
                supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """8-bit gray image and float depth (m) of ``scene`` seen from ``pose``."""
    gray, depth = Renderer(scene, cam, supersample).render(pose)
    return quantize(gray), depth


def quantize(gray: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(gray + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Segment:
    """Motion relative to the segment's start pose, expressed in the start frame.

    translation(s) = linear*s + linear_accel*s^2/2 + linear_amp*(1 - cos(2*pi*freq*s))
    rotation(s)    = Exp(angular*s + angular_accel*s^2/2 + angular_amp*(1 - cos(2*pi*angular_freq*s)))

    ``angular_freq`` defaults to ``freq``.  Both oscillations
    start at rest so the segment joins its predecessor smoothly.
    """

    duration: float
    kind: str = "constant_velocity"
    linear: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular: tuple[float, float, float] = (0.0, 0.0, 0.0)
    linear_accel: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_accel: tuple[float, float, float] = (0.0, 0.0, 0.0)
    linear_amp: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_amp: tuple[float, float, float] = (0.0, 0.0, 0.0)
    freq: float = 0.0
    angular_freq: float | None = None

    KINDS = ("static", "constant_velocity", "constant_angular_velocity", "jerk", "oscillation")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.duration <= 0:
            raise ValueError("segment duration must be positive")
        if self.kind == "static" and any(any(getattr(self, f)) for f in (
                "linear", "angular", "linear_accel", "angular_accel", "linear_amp", "angular_amp")):
            raise ValueError("static segment cannot move")

    def offsets(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        lin_osc = 1.0 - math.cos(2.0 * math.pi * self.freq * s)
        f_ang = self.freq if self.angular_freq is None else self.angular_freq
        ang_osc = 1.0 - math.cos(2.0 * math.pi * f_ang * s)
        rho = np.asarray(self.linear) * s + 0.5 * np.asarray(self.linear_accel) * s * s \
            + np.asarray(self.linear_amp) * lin_osc
        phi = np.asarray(self.angular) * s + 0.5 * np.asarray(self.angular_accel) * s * s \
            + np.asarray(self.angular_amp) * ang_osc
        return rho, phi


@dataclass(frozen=True)
class MotionProfile:
    segments: tuple[Segment, ...]
    start: PoseSE3 = field(default_factory=PoseSE3.identity)
    sample_rate: float = 200.0

    def __post_init__(self):
        starts = [self.start]
        t0 = 0.0
        for seg in self.segments:
            starts.append(seg_pose(starts[-1], seg, seg.duration, t0 + seg.duration))
            t0 += seg.duration
        object.__setattr__(self, "_starts", tuple(starts))

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def pose(self, t: float) -> PoseSE3:
        """Camera-to-world pose at time t (clamped to the profile span)."""
        t = float(t)
        t0 = 0.0
        for i, seg in enumerate(self.segments):
            if t < t0 + seg.duration or i == len(self.segments) - 1:
                s = min(max(t - t0, 0.0), seg.duration)
                return seg_pose(self._starts[i], seg, s, t)
            t0 += seg.duration
        return self.start.with_timestamp(t)

    def speed_bound(self, t: float, h: float = 1e-4) -> tuple[float, float]:
        """(angular rad/s, linear m/s) by central difference."""
        a, b = self.pose(max(t - h, 0.0)), self.pose(t + h)
        d = a.inverse().compose(b)
        span = (t + h) - max(t - h, 0.0)
        return float(np.linalg.norm(d.log()[3:])) / span, float(np.linalg.norm(b.translation - a.translation)) / span

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "start": {"translation": list(self.start.translation), "rotation": list(self.start.rotation)},
            "segments": [{k: (list(v) if isinstance(v, tuple) else v) for k, v in seg.__dict__.items()}
                         for seg in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MotionProfile:
        start = d.get("start", {})
        pose = PoseSE3(start.get("rotation", (0, 0, 0, 1)), start.get("translation", (0, 0, 0)))
        segs = tuple(Segment(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in s.items()})
                     for s in d["segments"])
        return cls(segs, pose, float(d.get("sample_rate", 200.0)))

    @classmethod
    def load(cls, path) -> MotionProfile:
        with open(path) as f:
            return cls.from_dict(json.load(f))


def seg_pose(start: PoseSE3, seg: Segment, s: float, timestamp: float) -> PoseSE3:
    rho, phi = seg.offsets(s)
    R0 = start.R
    return PoseSE3.from_rt(R0 @ so3_exp(phi), start.translation + R0 @ rho, timestamp)


def slow_fast_profile(slow: float = 4.0, fast: float = 6.0) -> MotionProfile:
    """Gentle drift followed by fast oscillating motion (default e2e scenario)."""
    return MotionProfile((
        Segment(slow, "constant_velocity", linear=(0.15, 0.0, 0.05), angular=(0.0, 0.06, 0.0)),
        Segment(fast, "oscillation", linear_amp=(0.25, 0.03, 0.1), angular_amp=(0.06, 0.3, 0.03),
                freq=0.6, angular_freq=1.2),
    ))


def spin_profile(duration: float = 1.2, rate: float = 3.5) -> MotionProfile:
    """Constant fast rotation about the vertical axis."""
    return MotionProfile((Segment(duration, "constant_angular_velocity", angular=(0.0, rate, 0.0)),))


def emit_crossings(ref: np.ndarray, L_prev: np.ndarray, L_new: np.ndarray, t_prev: float,
                   t_new: float, C) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Threshold crossings of one sampling step for all pixels (flattened arrays).

    Updates ``ref`` in place.  Returns (pixel index, time s, polarity), time sorted.
    ``C`` may be a scalar or a per-pixel array.
    """
    C = np.broadcast_to(np.asarray(C, dtype=np.float64), ref.shape)
    delta = L_new - ref
    nxt = np.floor(np.abs(delta) / C + 1e-9).astype(np.int64)
    idx = np.nonzero(nxt)[0]
    if len(idx) == 0:
        return idx, np.zeros(0), np.zeros(0, dtype=np.int8)
    counts = nxt[idx]
    sign = np.sign(delta[idx])
    pix = np.repeat(idx, counts)
    start = np.cumsum(counts) - counts
    k = np.arange(counts.sum()) - np.repeat(start, counts) + 1
    levels = ref[pix] + np.repeat(sign, counts) * k * C[pix]
    span = L_new[pix] - L_prev[pix]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span != 0, (levels - L_prev[pix]) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    times = t_prev + frac * (t_new - t_prev)
    ref[idx] += sign * counts * C[idx]
    pol = np.repeat(sign, counts).astype(np.int8)
    order = np.lexsort((pix, times))
    return pix[order], times[order], pol[order]


@dataclass(frozen=True)
class EventSimConfig:
    contrast: float = 0.25
    max_px_step: float = 0.5
    min_step: float = 1e-5
    max_step: float = 5e-3
    min_depth: float = 1.0
    threshold_noise: float = 0.0   # relative std of per-pixel thresholds
    time_jitter_us: float = 0.0
    seed: int = 0


def generate_events(scene: Scene, cam: CameraModel, profile: MotionProfile, contrast: float,
                    t_start: float = 0.0, t_end: float | None = None,
                    cfg: EventSimConfig | None = None,
                    camera_offset: PoseSE3 | None = None) -> EventArray:
    """Ideal log-intensity events along ``profile``.

    ``camera_offset`` maps the event camera into the profile's camera frame
    (profile pose ∘ offset = event camera pose).
    """
    cfg = cfg or EventSimConfig(contrast=contrast)
    if not contrast > 0:
        raise ValueError("contrast threshold must be positive")
    t_end = profile.duration if t_end is None else t_end
    rng = np.random.default_rng(cfg.seed)
    renderer = Renderer(scene, cam)
    n_pix = cam.width * cam.height
    C = np.full(n_pix, float(contrast))
    if cfg.threshold_noise > 0:
        C = np.maximum(C * (1.0 + cfg.threshold_noise * rng.standard_normal(n_pix)), 0.01 * contrast)

    def pose_at(t):
        p = profile.pose(t)
        return p.compose(camera_offset) if camera_offset is not None else p

    def log_img(t):
        g, _ = renderer.render(pose_at(t))
        return np.log(g.ravel() + log_floor)

    f = max(cam.fx, cam.fy)
    t = t_start
    L_prev = log_img(t)
    ref = L_prev.copy()
    chunks = []
    while t < t_end - 1e-12:
        w, v = profile.speed_bound(t)
        px_rate = f * (w + v / cfg.min_depth)
        dt = cfg.max_step if px_rate <= 0 else min(cfg.max_step, max(cfg.min_step, cfg.max_px_step / px_rate))
        t_new = min(t + dt, t_end)
        L_new = log_img(t_new)
        pix, times, pol = emit_crossings(ref, L_prev, L_new, t, t_new, C)
        if len(pix):
            chunks.append((pix, times, pol))
        L_prev, t = L_new, t_new
    if not chunks:
        return EventArray.empty()
    pix = np.concatenate([c[0] for c in chunks])
    times = np.concatenate([c[1] for c in chunks])
    pol = np.concatenate([c[2] for c in chunks])
    t_us = np.floor(times * 1e6 + 0.5).astype(np.int64)
    if cfg.time_jitter_us > 0:
        t_us = np.maximum(t_us + np.rint(rng.normal(0, cfg.time_jitter_us, len(t_us))).astype(np.int64), 0)
        order = np.argsort(t_us, kind="stable")
        pix, pol, t_us = pix[order], pol[order], t_us[order]
    return EventArray(t_us, pix % cam.width, pix // cam.width, pol)


@dataclass(frozen=True)
class SynthConfig:
    frame_rate: float = 30.0
    exposure: float = 0.0          # seconds; > 0 enables motion blur
    blur_samples: int = 9
    levels: int = 3
    events: EventSimConfig = field(default_factory=EventSimConfig)


@dataclass
class SyntheticSequence:
    frames: list[Frame]
    frame_poses: list[PoseSE3]     # ground truth at frame timestamps
    events: EventArray
    groundtruth: list[PoseSE3]     # ground truth at the profile sample rate
    rig: RigCalibration


def make_sequence(scene: Scene, profile: MotionProfile, rig: RigCalibration,
                  frame_rate: float = 30.0, cfg: SynthConfig | None = None) -> SyntheticSequence:
    cfg = cfg or SynthConfig(frame_rate=frame_rate)
    renderer = Renderer(scene, rig.rgb_cam)
    n = int(math.floor(profile.duration * frame_rate + 1e-9))
    frames, poses = [], []
    for k in range(n):
        t = k / frame_rate
        pose = profile.pose(t)
        gray, depth = renderer.render(pose)
        if cfg.exposure > 0 and cfg.blur_samples > 1:
            acc = np.zeros_like(gray)
            for s in np.linspace(t - cfg.exposure / 2, t + cfg.exposure / 2, cfg.blur_samples):
                acc += renderer.render(profile.pose(max(s, 0.0)))[0]
            gray = acc / cfg.blur_samples
        frames.append(Frame(t, quantize(gray), depth, cfg.levels))
        poses.append(pose)
    events = generate_events(scene, rig.event_cam, profile, cfg.events.contrast, cfg=cfg.events,
                             camera_offset=rig.T_rgb_to_event.inverse())
    m = int(math.floor(profile.duration * profile.sample_rate + 1e-9))
    gt = [profile.pose(k / profile.sample_rate) for k in range(m)]
    return SyntheticSequence(frames, poses, events, gt, rig)


def default_rig(width: int = 240, height: int = 180, f: float = 200.0,
                event_scale: float = 2.0 / 3.0) -> RigCalibration:
    """RGB camera plus a co-located, lower-resolution event camera."""
    cam = CameraModel(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    ew, eh = int(round(width * event_scale)), int(round(height * event_scale))
    ef = round(f * event_scale, 2)
    ev = CameraModel(ef, ef, (ew - 1) / 2.0, (eh - 1) / 2.0, ew, eh)
    return RigCalibration(cam, ev, PoseSE3.identity(), 0.001)


def slow_fast_sequence(slow: float = 4.0, fast: float = 6.0, exposure: float = 0.033,
                       blur_samples: int = 15, seed: int = 0, contrast: float = 0.25,
                       rig: RigCalibration | None = None) -> SyntheticSequence:
    """Textured room, slow drift then fast oscillation, RGB frames blurred over ``exposure``."""
    rig = rig or default_rig()
    cfg = SynthConfig(exposure=exposure, blur_samples=blur_samples,
                      events=EventSimConfig(contrast=contrast, min_depth=1.5, seed=seed))
    return make_sequence(Scene.textured_room(seed), slow_fast_profile(slow, fast), rig, 30.0, cfg)
