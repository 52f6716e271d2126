"""Rigid-body transforms: unit quaternions, SO(3)/SE(3) exp/log and PoseSE3.

Conventions:
    - Quaternions are stored as (qx, qy, qz, qw), same order as TUM files.
    - Twists are 6-vectors (rho, phi): translation part first, rotation second.
    - A PoseSE3 maps points from its child frame into its parent frame,
      p_parent = R @ p_child + t.  Trajectory poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


def hat(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta ** 2 * K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    # via the quaternion: stable near 0 and near pi
    q = matrix_to_quat(R)
    if q[3] < 0:
        q = -q
    v = q[:3]
    s = float(np.linalg.norm(v))
    if s < _SMALL_ANGLE:
        return 2.0 * v / q[3]
    theta = 2.0 * np.arctan2(s, q[3])
    return theta * v / s


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1.0 - np.cos(theta)) / theta ** 2 * K
            + (theta - np.sin(theta)) / theta ** 3 * K @ K)


def _left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta ** 2
    return np.eye(3) - 0.5 * K + coef * K @ K


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map of a twist (rho, phi) -> (R, t)."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    return so3_exp(phi), _left_jacobian(phi) @ rho


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = so3_log(R)
    rho = _left_jacobian_inv(phi) @ np.asarray(t, dtype=np.float64)
    return np.concatenate([rho, phi])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (x, y, z, w) with w >= 0."""
    m = np.asarray(R, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s,
                      (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s,
                      0.25 * s, (m[1, 0] - m[0, 1]) / s])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.linalg.norm(so3_log(R)))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform with a timestamp (seconds).

    Rotation is a unit quaternion (x, y, z, w); it is renormalised on
    construction so the norm stays within 1e-9 of one.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("rotation quaternion must be non-zero")
        object.__setattr__(self, "rotation", _frozen(q / n))
        object.__setattr__(self, "translation",
                           _frozen(np.asarray(self.translation, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> PoseSE3:
        return cls(timestamp=timestamp)

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray, timestamp: float = 0.0) -> PoseSE3:
        return cls(matrix_to_quat(R), t, timestamp)

    @classmethod
    def from_matrix(cls, T: np.ndarray, timestamp: float = 0.0) -> PoseSE3:
        T = np.asarray(T, dtype=np.float64)
        return cls.from_rt(T[:3, :3], T[:3, 3], timestamp)

    @classmethod
    def exp(cls, xi: np.ndarray, timestamp: float = 0.0) -> PoseSE3:
        R, t = se3_exp(xi)
        return cls.from_rt(R, t, timestamp)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def log(self) -> np.ndarray:
        return se3_log(self.R, self.translation)

    def inverse(self) -> PoseSE3:
        q = self.rotation * np.array([-1.0, -1.0, -1.0, 1.0])
        return PoseSE3(q, -(quat_to_matrix(q) @ self.translation), self.timestamp)

    def compose(self, other: PoseSE3) -> PoseSE3:
        """self ∘ other; keeps other's timestamp."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return PoseSE3(q, t, other.timestamp)

    __matmul__ = compose

    def act(self, points: np.ndarray) -> np.ndarray:
        """Transform (3,) or (N, 3) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.translation

    def with_timestamp(self, timestamp: float) -> PoseSE3:
        return PoseSE3(self.rotation, self.translation, timestamp)


def relative_pose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """a⁻¹ ∘ b."""
    return a.inverse().compose(b)


def pose_distance(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """(rotation angle in radians, translation distance) between two poses."""
    d = relative_pose(a, b)
    return rotation_angle(d.R), float(np.linalg.norm(a.translation - b.translation))
