"""Trajectory alignment and ATE / RPE scoring.

Trajectories are camera-to-world poses.  Alignment is a rigid fit (no
scale) over the first few matched positions followed by a rotation that
makes the first estimated orientation coincide with ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import PoseSE3, relative_pose, rotation_angle

ATE_DIVERGED_M = 5.0
RPE_ROT_DIVERGED = 1.0        # deg per deg
RPE_TRANS_DIVERGED_CM = 20.0  # cm per deg
CUT_PERSIST_S = 1.0

UNITS = ("per_frame", "per_degree", "per_meter")


class EvaluationError(ValueError):
    pass


class Trajectory:
    """Timestamped poses with strictly increasing stamps."""

    def __init__(self, poses: Iterable[PoseSE3]):
        self.poses = list(poses)
        ts = np.array([p.timestamp for p in self.poses], dtype=np.float64)
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            i = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise EvaluationError(f"timestamps not strictly increasing at index {i}")
        self.timestamps = ts

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Trajectory(self.poses[i])
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])

    def transformed(self, G: PoseSE3) -> Trajectory:
        """Left-multiply every pose by G (change of world frame)."""
        return Trajectory(G.compose(p) for p in self.poses)

    def until(self, t_cut: float) -> Trajectory:
        """Poses strictly before t_cut."""
        return Trajectory(p for p in self.poses if p.timestamp < t_cut)


def read_trajectory(path) -> Trajectory:
    """Read a TUM file: "timestamp tx ty tz qx qy qz qw" per line, '#' comments."""
    poses = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise EvaluationError(f"{path}:{n}: expected 8 columns, got {len(parts)}")
        v = [float(x) for x in parts]
        poses.append(PoseSE3(v[4:8], v[1:4], v[0]))
    return Trajectory(poses)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> list[tuple[PoseSE3, PoseSE3]]:
    """Pair each estimated pose with the nearest ground-truth stamp within max_dt.

    Ties go to the earlier ground-truth pose.  Unmatched poses are dropped.
    """
    if len(est) == 0 or len(gt) == 0:
        raise EvaluationError("cannot associate empty trajectories")
    tg = gt.timestamps
    pairs = []
    for p in est:
        j = int(np.searchsorted(tg, p.timestamp))
        best = None
        for k in (j - 1, j):
            if 0 <= k < len(tg):
                d = abs(tg[k] - p.timestamp)
                if best is None or d < best[0]:
                    best = (d, k)
        if best[0] <= max_dt:
            pairs.append((p, gt[best[1]]))
    if not pairs:
        raise EvaluationError(f"no pose pairs within {max_dt} s")
    return pairs


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares R, t with dst ≈ R src + t (Kabsch, no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def alignment_transform(pairs: Sequence[tuple[PoseSE3, PoseSE3]], k_first: int = 10) -> PoseSE3:
    """World-frame correction G so that G ∘ est is aligned with gt."""
    if k_first < 1 or not pairs:
        raise EvaluationError("alignment needs at least one pose pair")
    head = pairs[:k_first]
    src = np.array([e.translation for e, _ in head])
    dst = np.array([g.translation for _, g in head])
    if np.max(np.linalg.norm(src - src.mean(axis=0), axis=1)) < 1e-12 \
            or np.max(np.linalg.norm(dst - dst.mean(axis=0), axis=1)) < 1e-12:
        # no spatial extent: align the first pose directly
        e0, g0 = pairs[0]
        return g0.compose(e0.inverse()).with_timestamp(0.0)
    R, t = rigid_fit(src, dst)
    e0 = pairs[0][0]
    p0 = R @ e0.translation + t
    R_off = pairs[0][1].R @ (R @ e0.R).T
    # rotate about the first aligned position so it stays put
    return PoseSE3.from_rt(R_off @ R, R_off @ (t - p0) + p0)


def align(pairs: Sequence[tuple[PoseSE3, PoseSE3]], k_first: int = 10) -> list[tuple[PoseSE3, PoseSE3]]:
    G = alignment_transform(pairs, k_first)
    return [(G.compose(e), g) for e, g in pairs]


def position_errors(pairs) -> np.ndarray:
    return np.array([np.linalg.norm(e.translation - g.translation) for e, g in pairs])


def ate(pairs) -> float:
    """RMSE of position differences, in cm."""
    err = position_errors(pairs)
    return float(np.sqrt(np.mean(err ** 2)) * 100.0)


def rpe(pairs, unit: str = "per_frame") -> tuple[float, float]:
    """Relative pose error over consecutive pairs -> (deg per unit, cm per unit).

    per_frame averages over intervals.  per_degree and per_meter divide the
    summed errors by the summed ground-truth rotation (deg) or path length (m);
    intervals without ground-truth motion in that quantity are skipped.
    """
    if unit not in UNITS:
        raise EvaluationError(f"unknown RPE unit {unit!r}")
    if len(pairs) < 2:
        raise EvaluationError("RPE needs at least two pose pairs")
    rot, trans, norm = [], [], []
    for (e0, g0), (e1, g1) in zip(pairs[:-1], pairs[1:]):
        dg = relative_pose(g0, g1)
        de = relative_pose(e0, e1)
        delta = dg.inverse().compose(de)
        if unit == "per_degree":
            n = math.degrees(rotation_angle(dg.R))
        elif unit == "per_meter":
            n = float(np.linalg.norm(dg.translation))
        else:
            n = 1.0
        if n <= 0.0:
            continue
        rot.append(math.degrees(rotation_angle(delta.R)))
        trans.append(float(np.linalg.norm(delta.translation)) * 100.0)
        norm.append(n)
    if not norm:
        return 0.0, 0.0
    total = float(np.sum(norm))
    return float(np.sum(rot)) / total, float(np.sum(trans)) / total


@dataclass
class ErrorReport:
    ate_rmse: float          # cm
    rpe_rot: float           # deg per unit
    rpe_trans: float         # cm per unit
    unit: str = "per_degree"
    diverged: bool = False
    partial_cut_time: float | None = None
    n_pairs: int = 0

    def __post_init__(self):
        for name in ("ate_rmse", "rpe_rot", "rpe_trans"):
            if not getattr(self, name) >= 0:
                raise EvaluationError(f"{name} must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def table(self) -> str:
        u = {"per_frame": "f", "per_degree": "deg", "per_meter": "m"}[self.unit]
        rows = [("t_ate [cm]", f"{self.ate_rmse:.3f}"),
                (f"R_rpe [deg/{u}]", f"{self.rpe_rot:.4f}"),
                (f"t_rpe [cm/{u}]", f"{self.rpe_trans:.4f}"),
                ("pairs", str(self.n_pairs)),
                ("diverged", "yes" if self.diverged else "no")]
        if self.partial_cut_time is not None:
            rows.append(("cut time [s]", f"{self.partial_cut_time:.3f}"))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b}" for a, b in rows)


def divergence_cut_time(aligned_pairs, threshold_m: float = ATE_DIVERGED_M,
                        persist_s: float = CUT_PERSIST_S) -> float | None:
    """Earliest stamp after which the position error stays above threshold for persist_s."""
    err = position_errors(aligned_pairs)
    ts = np.array([e.timestamp for e, _ in aligned_pairs])
    above = err > threshold_m
    run_start = None
    for i in range(len(ts)):
        if above[i]:
            if run_start is None:
                run_start = i
            if ts[i] - ts[run_start] >= persist_s:
                return float(ts[run_start])
        else:
            run_start = None
    return None


def detect_divergence(report: ErrorReport, aligned_pairs=None) -> tuple[bool, float | None]:
    """Divergence flag and optional cut time.

    The RPE thresholds are stated per degree of ground-truth rotation and only
    apply to reports in that unit.
    """
    diverged = report.ate_rmse > ATE_DIVERGED_M * 100.0
    if report.unit == "per_degree":
        diverged |= report.rpe_rot > RPE_ROT_DIVERGED or report.rpe_trans > RPE_TRANS_DIVERGED_CM
    cut = divergence_cut_time(aligned_pairs) if aligned_pairs is not None else None
    if cut is not None:
        diverged = True
    return bool(diverged), cut


def evaluate(est: Trajectory, gt: Trajectory, unit: str = "per_degree", k_first: int = 10,
             max_dt: float = 0.02) -> ErrorReport:
    pairs = align(associate(est, gt, max_dt), k_first)
    r_rot, r_trans = rpe(pairs, unit) if len(pairs) >= 2 else (0.0, 0.0)
    report = ErrorReport(ate(pairs), r_rot, r_trans, unit, n_pairs=len(pairs))
    report.diverged, report.partial_cut_time = detect_divergence(report, pairs)
    return report
