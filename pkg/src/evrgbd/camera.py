"""Pinhole camera with optional radial-tangential distortion, and rig calibration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PoseSE3


class InvalidDepthError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    @property
    def distorted(self) -> bool:
        return any((self.k1, self.k2, self.p1, self.p2))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> CameraModel:
        """Intrinsics for pyramid level ``level`` (2x2 averaging per level)."""
        if level == 0:
            return self
        s = 2.0 ** -level
        return CameraModel(
            self.fx * s, self.fy * s,
            (self.cx + 0.5) * s - 0.5, (self.cy + 0.5) * s - 0.5,
            self.width >> level, self.height >> level,
            self.k1, self.k2, self.p1, self.p2,
        )

    def in_bounds(self, u, v, margin: float = 0.0):
        return ((u >= margin) & (v >= margin)
                & (u <= self.width - 1 - margin) & (v <= self.height - 1 - margin))

    def _distort(self, x, y):
        if not self.distorted:
            return x, y
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return xd, yd

    def _distort_jacobian(self, x, y):
        """d(xd, yd)/d(x, y) as four arrays (a, b, c, d) = [[a, b], [c, d]]."""
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        dradial = 2.0 * self.k1 + 4.0 * self.k2 * r2  # d(radial)/d(r2) * 2
        a = radial + x * dradial * x + 2.0 * self.p1 * y + 6.0 * self.p2 * x
        b = x * dradial * y + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        c = y * dradial * x + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        d = radial + y * dradial * y + 6.0 * self.p1 * y + 2.0 * self.p2 * x
        return a, b, c, d

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, 3) camera-frame points. Returns (uv (N, 2), in-view mask)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        z = p[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        xd, yd = self._distort(p[:, 0] / zs, p[:, 1] / zs)
        u = self.fx * xd + self.cx
        v = self.fy * yd + self.cy
        valid = front & self.in_bounds(u, v)
        return np.stack([u, v], axis=1), valid

    def projection_jacobian(self, points: np.ndarray) -> np.ndarray:
        """d(u, v)/d(x, y, z) for (N, 3) points in front of the camera -> (N, 2, 3)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        iz = 1.0 / p[:, 2]
        x, y = p[:, 0] * iz, p[:, 1] * iz
        J = np.zeros((len(p), 2, 3))
        # d(x, y)/dp
        dn = np.zeros((len(p), 2, 3))
        dn[:, 0, 0] = iz
        dn[:, 0, 2] = -x * iz
        dn[:, 1, 1] = iz
        dn[:, 1, 2] = -y * iz
        if self.distorted:
            a, b, c, d = self._distort_jacobian(x, y)
            D = np.stack([np.stack([a, b], -1), np.stack([c, d], -1)], 1)
            dn = D @ dn
        J[:, 0] = self.fx * dn[:, 0]
        J[:, 1] = self.fy * dn[:, 1]
        return J

    def unproject_points(self, u, v, depth) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        if np.any(depth <= 0):
            raise InvalidDepthError("depth must be positive")
        xd = (u - self.cx) / self.fx
        yd = (v - self.cy) / self.fy
        x, y = xd.copy(), yd.copy()
        if self.distorted:
            # Newton iterations on the distortion map
            for _ in range(30):
                ex, ey = self._distort(x, y)
                ex, ey = ex - xd, ey - yd
                if np.max(np.abs(ex) * self.fx, initial=0) < 1e-12 and \
                        np.max(np.abs(ey) * self.fy, initial=0) < 1e-12:
                    break
                a, b, c, d = self._distort_jacobian(x, y)
                det = a * d - b * c
                x = x - (d * ex - b * ey) / det
                y = y - (-c * ex + a * ey) / det
        return np.stack([x * depth, y * depth, depth], axis=-1)


def project(cam: CameraModel, p) -> tuple[float, float] | None:
    """Project one camera-frame point; None when behind the camera or out of view."""
    uv, valid = cam.project_points(np.asarray(p, dtype=np.float64))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def unproject(cam: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"invalid depth {depth!r} at ({u}, {v})")
    return cam.unproject_points(u, v, depth)


@dataclass(frozen=True)
class RigCalibration:
    """RGB-D camera, event camera, and the fixed extrinsic between them.

    ``T_rgb_to_event`` maps RGB-camera coordinates into event-camera
    coordinates: p_event = T_rgb_to_event.act(p_rgb).
    """

    rgb_cam: CameraModel
    event_cam: CameraModel
    T_rgb_to_event: PoseSE3 = field(default_factory=PoseSE3.identity)
    depth_scale: float = 0.001
