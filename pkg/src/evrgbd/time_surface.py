"""Surface of active events and (adaptive) time-surface rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .events import EventArray

UNSET = -1

# 16 cells on the border of the 5x5 window centred on the target pixel
RING16 = tuple((dx, dy) for dy in range(-2, 3) for dx in range(-2, 3)
               if max(abs(dx), abs(dy)) == 2)


@dataclass(frozen=True)
class AtsConfig:
    tau_upper: float = 0.3
    tau_lower: float = 0.01
    n: int = 5
    box_blur_radius: int = 1
    median_blur_radius: int = 1
    pattern: tuple[tuple[int, int], ...] = RING16

    def __post_init__(self):
        if not 0 < self.tau_lower <= self.tau_upper:
            raise ValueError("need 0 < tau_lower <= tau_upper")
        if not 1 <= self.n <= 16:
            raise ValueError("n must be in [1, 16]")
        if self.n > len(self.pattern):
            raise ValueError("n exceeds the neighbour pattern size")
        if self.box_blur_radius < 0 or self.median_blur_radius < 0:
            raise ValueError("blur radii must be non-negative")


class SurfaceOfActiveEvents:
    """Per-pixel timestamp (us) of the most recent event; UNSET where none fired."""

    def __init__(self, width: int, height: int):
        self.width = int(width)
        self.height = int(height)
        self.last_t = np.full((self.height, self.width), UNSET, dtype=np.int64)
        self.latest = UNSET

    def ingest(self, events: EventArray) -> int:
        """Fold ``events`` into the surface; returns the number rejected as out of bounds."""
        if len(events) == 0:
            return 0
        ok = (events.x >= 0) & (events.x < self.width) & (events.y >= 0) & (events.y < self.height)
        rejected = int(len(events) - np.count_nonzero(ok))
        if rejected:
            events = events[ok]
            if len(events) == 0:
                return rejected
        np.maximum.at(self.last_t, (events.y, events.x), events.t)
        self.latest = max(self.latest, int(events.t.max()))
        return rejected

    @property
    def activated(self) -> np.ndarray:
        return self.last_t != UNSET

    def snapshot(self) -> SurfaceOfActiveEvents:
        snap = SurfaceOfActiveEvents(self.width, self.height)
        snap.last_t = self.last_t.copy()
        snap.last_t.setflags(write=False)
        snap.latest = self.latest
        return snap


def ingest_events(sae: SurfaceOfActiveEvents, events: EventArray) -> tuple[SurfaceOfActiveEvents, int]:
    rejected = sae.ingest(events)
    return sae, rejected


@dataclass(frozen=True)
class AtsImage:
    gray: np.ndarray        # uint8, after box + median blur
    decay: np.ndarray       # seconds, before blur
    render_time: float      # seconds
    raw: np.ndarray = field(repr=False, default=None)  # uint8, before blur


def compute_decay_rate(sae: SurfaceOfActiveEvents, x: int, y: int, t_now_us: int,
                       cfg: AtsConfig) -> float:
    """Decay rate (s) of one pixel from the ages of its n most recent pattern neighbours."""
    ages = []
    for dx, dy in cfg.pattern:
        xx, yy = x + dx, y + dy
        if 0 <= xx < sae.width and 0 <= yy < sae.height:
            t = int(sae.last_t[yy, xx])
            if t != UNSET:
                ages.append(t_now_us - t)
    if not ages:
        return cfg.tau_upper
    ages.sort()
    recent = ages[: cfg.n]
    mean_gap = sum(recent) / len(recent) / 1e6
    return max(cfg.tau_upper - mean_gap, cfg.tau_lower)


def decay_map(sae: SurfaceOfActiveEvents, t_now_us: int, cfg: AtsConfig) -> np.ndarray:
    """Vectorised compute_decay_rate over every pixel."""
    h, w = sae.height, sae.width
    r = max(max(abs(dx), abs(dy)) for dx, dy in cfg.pattern)
    padded = np.full((h + 2 * r, w + 2 * r), UNSET, dtype=np.int64)
    padded[r:r + h, r:r + w] = sae.last_t
    ages = np.empty((len(cfg.pattern), h, w), dtype=np.float64)
    for i, (dx, dy) in enumerate(cfg.pattern):
        nb = padded[r + dy:r + dy + h, r + dx:r + dx + w]
        ages[i] = np.where(nb == UNSET, np.inf, (t_now_us - nb).astype(np.float64))
    n = cfg.n
    if n < len(cfg.pattern):
        ages = np.partition(ages, n - 1, axis=0)[:n]
    finite = np.isfinite(ages)
    count = finite.sum(axis=0)
    total = np.where(finite, ages, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_gap = np.where(count > 0, total / np.maximum(count, 1) / 1e6, 0.0)
    tau = np.maximum(cfg.tau_upper - mean_gap, cfg.tau_lower)
    return np.where(count > 0, tau, cfg.tau_upper)


def _surface(sae: SurfaceOfActiveEvents, t_now_us: int, tau: np.ndarray) -> np.ndarray:
    active = sae.activated
    age = np.where(active, (t_now_us - sae.last_t) / 1e6, 0.0)
    val = np.floor(255.0 * np.exp(-age / tau) + 0.5)
    return np.where(active, val, 0.0).astype(np.uint8)


def _blur(raw: np.ndarray, box_radius: int, median_radius: int) -> np.ndarray:
    out = raw
    if box_radius > 0:
        k = 2 * box_radius + 1
        out = cv2.blur(out, (k, k), borderType=cv2.BORDER_REFLECT_101)
    if median_radius > 0:
        out = cv2.medianBlur(np.ascontiguousarray(out), 2 * median_radius + 1)
    return out


def render_ats(sae: SurfaceOfActiveEvents, t_now_us: int, cfg: AtsConfig) -> AtsImage:
    tau = decay_map(sae, t_now_us, cfg)
    raw = _surface(sae, t_now_us, tau)
    return AtsImage(_blur(raw, cfg.box_blur_radius, cfg.median_blur_radius),
                    tau, t_now_us / 1e6, raw)


def render_ts(sae: SurfaceOfActiveEvents, t_now_us: int, tau_const: float,
              box_blur_radius: int = 1, median_blur_radius: int = 1) -> AtsImage:
    """Conventional time surface with a constant decay rate."""
    tau = np.full((sae.height, sae.width), float(tau_const))
    raw = _surface(sae, t_now_us, tau)
    return AtsImage(_blur(raw, box_blur_radius, median_blur_radius), tau, t_now_us / 1e6, raw)
