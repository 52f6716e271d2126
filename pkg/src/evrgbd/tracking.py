"""Direct photometric pose tracking against RGB map points and the temporary event map.

The optimised unknown is the world-to-camera transform of the current RGB
camera.  Increments are left twists: T_cw <- Exp(delta) @ T_cw, with
delta = (rho, phi).  All public functions take and return camera-to-world
poses (PoseSE3), the same convention as trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .camera import CameraModel, RigCalibration
from .frame import Frame
from .geometry import PoseSE3, se3_exp
from .mapping import PATTERN9, PATTERN14, MapPoint, TemporaryMapPoint

log = logging.getLogger(__name__)


class TrackingFailure(RuntimeError):
    """Raised when no residual block is valid for any initial guess."""


@dataclass(frozen=True)
class TrackerConfig:
    omega1: float = 1.0
    omega2: float = 1.0
    w_rgb: float = 1.0
    w_event: float = 1.0
    motion_omega_max: float = 1.5
    motion_v_max: float = 1.0
    huber_delta: float = 10.0
    max_iters_per_level: int = 30
    convergence_eps: float = 1e-4
    inlier_rms: float = 20.0
    fused_enabled: bool = True
    fused_warmup: bool = True     # event-only solve from T_{i-1} seeds the joint solve

    def __post_init__(self):
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("omega1 and omega2 must be >= 0")
        if self.motion_omega_max <= 0 or self.motion_v_max <= 0:
            raise ValueError("motion thresholds must be > 0")
        if self.w_rgb < 0 or self.w_event < 0 or self.huber_delta <= 0:
            raise ValueError("weights must be >= 0 and huber_delta > 0")
        if self.max_iters_per_level < 1:
            raise ValueError("max_iters_per_level must be >= 1")


def motion_factor(T_prev2: PoseSE3, T_prev1: PoseSE3, dt: float, cfg: TrackerConfig) -> float:
    """Normalised inter-frame speed; the fused branch runs when this exceeds 1."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    xi = T_prev2.inverse().compose(T_prev1).log()
    return (float(np.linalg.norm(xi[3:])) / (dt * cfg.motion_omega_max)
            + float(np.linalg.norm(xi[:3])) / (dt * cfg.motion_v_max))


def _world_to_camera(T_wc: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
    R = T_wc.R
    return R.T, -R.T @ T_wc.translation


@njit(cache=True)
def _residual_kernel(P, Z, R, t, Re, te, use_ext, img, intr, dist, off, want_jac, e, valid, J, uv):
    h, w = img.shape
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    k1, k2, p1, p2 = dist[0], dist[1], dist[2], dist[3]
    distorted = k1 != 0.0 or k2 != 0.0 or p1 != 0.0 or p2 != 0.0
    Jp = np.zeros((3, 6))
    Jn = np.zeros((2, 3))
    Juv = np.zeros((2, 6))
    for n in range(P.shape[0]):
        pcx = R[0, 0] * P[n, 0] + R[0, 1] * P[n, 1] + R[0, 2] * P[n, 2] + t[0]
        pcy = R[1, 0] * P[n, 0] + R[1, 1] * P[n, 1] + R[1, 2] * P[n, 2] + t[1]
        pcz = R[2, 0] * P[n, 0] + R[2, 1] * P[n, 1] + R[2, 2] * P[n, 2] + t[2]
        if use_ext:
            psx = Re[0, 0] * pcx + Re[0, 1] * pcy + Re[0, 2] * pcz + te[0]
            psy = Re[1, 0] * pcx + Re[1, 1] * pcy + Re[1, 2] * pcz + te[1]
            psz = Re[2, 0] * pcx + Re[2, 1] * pcy + Re[2, 2] * pcz + te[2]
        else:
            psx, psy, psz = pcx, pcy, pcz
        valid[n] = False
        if not psz > 1e-9:
            continue
        iz = 1.0 / psz
        x = psx * iz
        y = psy * iz
        # normalised-coordinate jacobian d(x, y)/d(ps)
        Jn[0, 0] = iz
        Jn[0, 1] = 0.0
        Jn[0, 2] = -x * iz
        Jn[1, 0] = 0.0
        Jn[1, 1] = iz
        Jn[1, 2] = -y * iz
        if distorted:
            r2 = x * x + y * y
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            dr = 2.0 * k1 + 4.0 * k2 * r2
            xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            a = radial + x * dr * x + 2.0 * p1 * y + 6.0 * p2 * x
            b = x * dr * y + 2.0 * p1 * x + 2.0 * p2 * y
            c = y * dr * x + 2.0 * p1 * x + 2.0 * p2 * y
            d = radial + y * dr * y + 6.0 * p1 * y + 2.0 * p2 * x
            for m in range(3):
                j0 = Jn[0, m]
                j1 = Jn[1, m]
                Jn[0, m] = a * j0 + b * j1
                Jn[1, m] = c * j0 + d * j1
        else:
            xd = x
            yd = y
        u = fx * xd + cx
        v = fy * yd + cy
        uv[n, 0] = u
        uv[n, 1] = v
        ok = True
        for k in range(off.shape[0]):
            su = u + off[k, 0]
            sv = v + off[k, 1]
            if not (su >= 0.0 and sv >= 0.0 and su <= w - 1 and sv <= h - 1):
                ok = False
                break
            x0 = min(int(np.floor(su)), w - 2)
            y0 = min(int(np.floor(sv)), h - 2)
            ax = su - x0
            ay = sv - y0
            i00 = img[y0, x0]
            i01 = img[y0, x0 + 1]
            i10 = img[y0 + 1, x0]
            i11 = img[y0 + 1, x0 + 1]
            top = i00 + ax * (i01 - i00)
            bot = i10 + ax * (i11 - i10)
            e[n, k] = Z[n, k] - (top + ay * (bot - top))
            if want_jac:
                J[n, k, 0] = (1.0 - ay) * (i01 - i00) + ay * (i11 - i10)
                J[n, k, 1] = bot - top
        if not ok:
            for k in range(off.shape[0]):
                e[n, k] = 0.0
            continue
        valid[n] = True
        if not want_jac:
            continue
        # d(pc)/d(delta) = [I | -[pc]x], then through the extrinsic rotation
        for r in range(3):
            for q in range(6):
                Jp[r, q] = 0.0
        Jp[0, 0] = 1.0
        Jp[1, 1] = 1.0
        Jp[2, 2] = 1.0
        Jp[0, 4] = pcz
        Jp[0, 5] = -pcy
        Jp[1, 3] = -pcz
        Jp[1, 5] = pcx
        Jp[2, 3] = pcy
        Jp[2, 4] = -pcx
        for q in range(6):
            if use_ext:
                a0 = Re[0, 0] * Jp[0, q] + Re[0, 1] * Jp[1, q] + Re[0, 2] * Jp[2, q]
                a1 = Re[1, 0] * Jp[0, q] + Re[1, 1] * Jp[1, q] + Re[1, 2] * Jp[2, q]
                a2 = Re[2, 0] * Jp[0, q] + Re[2, 1] * Jp[1, q] + Re[2, 2] * Jp[2, q]
            else:
                a0, a1, a2 = Jp[0, q], Jp[1, q], Jp[2, q]
            Juv[0, q] = fx * (Jn[0, 0] * a0 + Jn[0, 1] * a1 + Jn[0, 2] * a2)
            Juv[1, q] = fy * (Jn[1, 0] * a0 + Jn[1, 1] * a1 + Jn[1, 2] * a2)
        for k in range(off.shape[0]):
            gu = J[n, k, 0]
            gv = J[n, k, 1]
            for q in range(6):
                J[n, k, q] = -(gu * Juv[0, q] + gv * Juv[1, q])


def photometric_residuals(positions: np.ndarray, z: np.ndarray, R_cw: np.ndarray, t_cw: np.ndarray,
                          image: np.ndarray, cam: CameraModel, pattern,
                          extrinsic: tuple[np.ndarray, np.ndarray] | None = None,
                          jacobian: bool = False):
    """Residuals z - I(pi(T p) + offset) for a batch of points on one pyramid level.

    ``cam`` must already be scaled to the level of ``image``; ``z`` is
    (N, P).  ``extrinsic`` = (R, t) maps RGB-camera to sensor coordinates.
    Image lookups are bilinear and the Jacobian uses the exact derivative of
    the bilinear interpolant.  Returns (e (N, P), valid (N,), J (N, P, 6) or
    None, uv (N, 2)); invalid blocks have zero residuals and Jacobians.
    """
    P = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    off = np.ascontiguousarray(pattern, dtype=np.float64).reshape(-1, 2)
    e = np.zeros((n, len(off)))
    valid = np.zeros(n, dtype=np.bool_)
    J = np.zeros((n, len(off), 6)) if jacobian else np.zeros((0, len(off), 6))
    uv = np.full((n, 2), np.nan)
    use_ext = extrinsic is not None
    Re, te = (extrinsic if use_ext else (np.eye(3), np.zeros(3)))
    _residual_kernel(P, np.ascontiguousarray(z, dtype=np.float64).reshape(n, len(off)),
                     np.ascontiguousarray(R_cw, dtype=np.float64), np.ascontiguousarray(t_cw, dtype=np.float64),
                     np.ascontiguousarray(Re, dtype=np.float64), np.ascontiguousarray(te, dtype=np.float64),
                     use_ext, np.ascontiguousarray(image, dtype=np.float64),
                     np.array([cam.fx, cam.fy, cam.cx, cam.cy]), np.array([cam.k1, cam.k2, cam.p1, cam.p2]),
                     off, jacobian, e, valid, J, uv)
    if jacobian:
        J[~valid] = 0.0
        return e, valid, J, uv
    return e, valid, None, uv


def _single(position, z_level, T_wc, image, cam, pattern, extrinsic, jacobian):
    R_cw, t_cw = _world_to_camera(T_wc)
    e, valid, J, _ = photometric_residuals(np.asarray(position, dtype=np.float64)[None],
                                           np.asarray(z_level, dtype=np.float64)[None],
                                           R_cw, t_cw, image, cam, pattern, extrinsic, jacobian)
    if not valid[0]:
        return None
    return (e[0], J[0]) if jacobian else e[0]


def residual_rgb(point: MapPoint, T: PoseSE3, frame: Frame, cam: CameraModel, level: int = 0,
                 jacobian: bool = False, pattern=PATTERN9):
    """9 gray differences of one map point; None when any sample leaves the image."""
    return _single(point.position, point.z_arrays[level], T, frame.pyramid[level],
                   cam.scaled(level), pattern, None, jacobian)


def residual_event(point: TemporaryMapPoint, T: PoseSE3, ats_pyramid, rig: RigCalibration,
                   level: int = 0, jacobian: bool = False, pattern=PATTERN14):
    """14 ATS differences of one temporary point, seen through the RGB->event extrinsic."""
    ext = rig.T_rgb_to_event
    return _single(point.position, point.z_arrays[level], T, ats_pyramid[level],
                   rig.event_cam.scaled(level), pattern, (ext.R, ext.translation), jacobian)


@dataclass
class _Term:
    positions: np.ndarray
    z: np.ndarray                # (N, L, P)
    pyramid: tuple
    cam: CameraModel
    pattern: tuple
    extrinsic: tuple | None
    weight: float

    @classmethod
    def build(cls, points, pyramid, cam, pattern, extrinsic, weight):
        pos = np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3)
        z = np.array([p.z_arrays for p in points], dtype=np.float64)
        # canonical order so results do not depend on input ordering
        keys = [z.reshape(len(z), -1)[:, i] for i in range(z[0].size - 1, -1, -1)] if len(z) else []
        order = np.lexsort(tuple(keys) + (pos[:, 2], pos[:, 1], pos[:, 0])) if len(pos) else []
        return cls(pos[order], z[order], pyramid, cam, pattern, extrinsic, weight)

    def evaluate(self, level, R_cw, t_cw, jacobian):
        return photometric_residuals(self.positions, self.z[:, level], R_cw, t_cw,
                                     self.pyramid[level], self.cam.scaled(level),
                                     self.pattern, self.extrinsic, jacobian)


def _robust(e: np.ndarray, delta: float):
    """Per-block Huber on the block RMS: returns (cost per block, IRLS weight, rms)."""
    k = e.shape[1]
    s = (e * e).sum(axis=1)
    rms = np.sqrt(s / k)
    inl = rms <= delta
    cost = np.where(inl, s, k * (2.0 * delta * rms - delta * delta))
    w = np.where(inl, 1.0, delta / np.maximum(rms, 1e-300))
    return cost, w, rms


@njit(cache=True)
def _masked_cost(e, mask, delta):
    """Sum of block Huber costs over masked blocks (same formula as _robust)."""
    k = e.shape[1]
    total = 0.0
    for n in range(e.shape[0]):
        if not mask[n]:
            continue
        s = 0.0
        for j in range(k):
            s += e[n, j] * e[n, j]
        rms = np.sqrt(s / k)
        total += s if rms <= delta else k * (2.0 * delta * rms - delta * delta)
    return total


@njit(cache=True)
def _accumulate(e, valid, J, weight, delta, H, g):
    """Add the Huber-weighted normal equations of the valid blocks to H, g."""
    k = e.shape[1]
    count = 0
    for n in range(e.shape[0]):
        if not valid[n]:
            continue
        count += 1
        s = 0.0
        for j in range(k):
            s += e[n, j] * e[n, j]
        rms = np.sqrt(s / k)
        w = weight if rms <= delta else weight * delta / max(rms, 1e-300)
        for j in range(k):
            for a in range(6):
                wa = w * J[n, j, a]
                g[a] += wa * e[n, j]
                for b in range(a, 6):
                    H[a, b] += wa * J[n, j, b]
    if count:
        for a in range(6):
            for b in range(a):
                H[a, b] = H[b, a]
    return count


@dataclass
class OptimStats:
    cost: float = np.inf                 # mean robust cost per valid block, finest level
    initial_cost: float = np.inf
    total_cost: float = np.inf
    iterations: int = 0
    n_valid_rgb: int = 0
    n_valid_event: int = 0
    n_inliers_rgb: int = 0
    n_inliers_event: int = 0
    tracked_uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    guess_index: int = 0
    accepted_steps: list = field(default_factory=list)   # (old cost, new cost) per accepted step


def _cost(terms, evals, delta, masks=None):
    total = 0.0
    for i, (term, ev) in enumerate(zip(terms, evals)):
        e, valid = ev[0], ev[1]
        m = valid if masks is None else masks[i]
        total += term.weight * _masked_cost(e, m, delta)
    return total


def _lm_level(terms, level, R, t, cfg: TrackerConfig, stats: OptimStats):
    delta = cfg.huber_delta
    evals = [term.evaluate(level, R, t, True) for term in terms]
    lam = 1e-4
    for _ in range(cfg.max_iters_per_level):
        H = np.zeros((6, 6))
        g = np.zeros(6)
        n_valid = 0
        for term, (e, valid, J, _) in zip(terms, evals):
            n_valid += _accumulate(e, valid, J, term.weight, delta, H, g)
        if n_valid == 0:
            break
        stats.iterations += 1
        A = H + lam * np.diag(np.diag(H)) + 1e-12 * np.trace(H) * np.eye(6)
        try:
            d = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            break
        dR, dt = se3_exp(d)
        R_new, t_new = dR @ R, dR @ t + dt
        new = [term.evaluate(level, R_new, t_new, True) for term in terms]
        masks = [a[1] & b[1] for a, b in zip(evals, new)]
        kept = sum(int(m.sum()) for m in masks)
        old_c = _cost(terms, evals, delta, masks)
        new_c = _cost(terms, new, delta, masks)
        if kept >= 0.5 * n_valid and new_c <= old_c:
            stats.accepted_steps.append((old_c, new_c))
            R, t, evals = R_new, t_new, new
            lam = max(lam / 3.0, 1e-10)
            if np.linalg.norm(d) < cfg.convergence_eps:
                break
        else:
            lam *= 5.0
            if lam > 1e8:
                break
    return R, t


def _finest_summary(terms, kinds, R, t, cfg, stats: OptimStats):
    total, n = 0.0, 0
    uv_in = []
    for term, kind in zip(terms, kinds):
        e, valid, _, uv = term.evaluate(0, R, t, False)
        nv = int(valid.sum())
        if nv:
            c, _, rms = _robust(e[valid], cfg.huber_delta)
            total += term.weight * float(c.sum())
            inl = rms <= cfg.inlier_rms
        else:
            inl = np.zeros(0, dtype=bool)
        n += nv
        if kind == "rgb":
            stats.n_valid_rgb, stats.n_inliers_rgb = nv, int(inl.sum())
            stats.tracked_uv = uv[valid][inl]
        else:
            stats.n_valid_event, stats.n_inliers_event = nv, int(inl.sum())
    return total, n


def optimize_pose(rgb_points: list[MapPoint], event_points: list[TemporaryMapPoint], frame: Frame,
                  ats_pyramid, initial_poses: list[PoseSE3], cfg: TrackerConfig,
                  rig: RigCalibration) -> tuple[PoseSE3, OptimStats]:
    """Minimise the weighted robust photometric cost over the current camera pose.

    Runs coarse-to-fine LM from every initial guess and returns the pose with
    the lowest mean robust cost per valid block at the finest level.
    """
    terms, kinds = [], []
    if rgb_points and cfg.omega1 > 0:
        terms.append(_Term.build(rgb_points, frame.pyramid, rig.rgb_cam, PATTERN9, None,
                                 cfg.omega1 * cfg.w_rgb))
        kinds.append("rgb")
    if event_points and cfg.omega2 > 0 and ats_pyramid is not None:
        ext = rig.T_rgb_to_event
        terms.append(_Term.build(event_points, ats_pyramid, rig.event_cam, PATTERN14,
                                 (ext.R, ext.translation), cfg.omega2 * cfg.w_event))
        kinds.append("event")
    if not terms:
        raise TrackingFailure("no map points to track against")
    levels = min(min(len(tm.pyramid), tm.z.shape[1]) for tm in terms)

    best = None
    for gi, T0 in enumerate(initial_poses):
        stats = OptimStats(guess_index=gi)
        R, t = _world_to_camera(T0)
        init_total, init_n = _finest_summary(terms, kinds, R, t, cfg, OptimStats())
        stats.initial_cost = init_total / init_n if init_n else np.inf
        for level in range(levels - 1, -1, -1):
            R, t = _lm_level(terms, level, R, t, cfg, stats)
        total, n = _finest_summary(terms, kinds, R, t, cfg, stats)
        if n == 0:
            continue
        stats.total_cost = total
        stats.cost = total / n
        if best is None or stats.cost < best[1].cost:
            R_wc = R.T
            best = (PoseSE3.from_rt(R_wc, -R_wc @ t, frame.timestamp), stats)
    if best is None:
        raise TrackingFailure("all residuals invalid")
    return best


def constant_velocity_guess(T_prev2: PoseSE3, T_prev1: PoseSE3, t_now: float) -> PoseSE3:
    """Extrapolate the last inter-frame motion to ``t_now``."""
    dt_prev = T_prev1.timestamp - T_prev2.timestamp
    if dt_prev <= 0:
        return T_prev1.with_timestamp(t_now)
    scale = (t_now - T_prev1.timestamp) / dt_prev
    xi = T_prev2.inverse().compose(T_prev1).log() * scale
    return T_prev1.compose(PoseSE3.exp(xi, t_now))
