"""Frames, image pyramids and bilinear sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def downsample(img: np.ndarray) -> np.ndarray:
    """Half-sample by 2x2 averaging; output dims are floor(input / 2)."""
    h, w = img.shape[0] // 2, img.shape[1] // 2
    a = np.asarray(img, dtype=np.float64)[: 2 * h, : 2 * w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def build_pyramid(img: np.ndarray, levels: int) -> tuple[np.ndarray, ...]:
    out = [np.asarray(img, dtype=np.float64)]
    for _ in range(1, levels):
        out.append(downsample(out[-1]))
    for level in out:
        level.setflags(write=False)
    return tuple(out)


def bilinear(img: np.ndarray, u, v, with_gradient: bool = False):
    """Bilinear lookup at float pixel coordinates (u = column, v = row).

    Returns (values, valid) or (values, du, dv, valid) where du/dv are the
    exact partial derivatives of the bilinear interpolant.  Samples outside
    [0, W-1] x [0, H-1] are invalid and return 0.
    """
    h, w = img.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    x0 = np.clip(np.floor(uu).astype(np.intp), 0, w - 2)
    y0 = np.clip(np.floor(vv).astype(np.intp), 0, h - 2)
    ax = uu - x0
    ay = vv - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    top = i00 + ax * (i01 - i00)
    bot = i10 + ax * (i11 - i10)
    val = np.where(valid, top + ay * (bot - top), 0.0)
    if not with_gradient:
        return val, valid
    du = (1.0 - ay) * (i01 - i00) + ay * (i11 - i10)
    dv = bot - top
    return val, np.where(valid, du, 0.0), np.where(valid, dv, 0.0), valid


def central_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference image gradient (zero on the border)."""
    a = np.asarray(img, dtype=np.float64)
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, 1:-1] = 0.5 * (a[:, 2:] - a[:, :-2])
    gy[1:-1, :] = 0.5 * (a[2:, :] - a[:-2, :])
    return gx, gy


@dataclass(frozen=True)
class Frame:
    """Grayscale + depth image pair at one timestamp (seconds).

    ``depth`` is in meters with 0 marking invalid pixels.
    """

    timestamp: float
    gray: np.ndarray
    depth: np.ndarray
    levels: int = 3
    pyramid: tuple[np.ndarray, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        gray = np.asarray(self.gray)
        if gray.ndim != 2:
            raise ValueError("gray image must be single-channel")
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.shape != gray.shape:
            raise ValueError(f"depth {depth.shape} and gray {gray.shape} differ in shape")
        gray.setflags(write=False)
        depth.setflags(write=False)
        object.__setattr__(self, "gray", gray)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "timestamp", float(self.timestamp))
        if not self.pyramid:
            object.__setattr__(self, "pyramid", build_pyramid(gray, self.levels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.gray.shape
