"""Sparse key-pixel selection on RGB images and on adaptive time surfaces."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .events import EventArray
from .frame import central_gradient
from .time_surface import AtsImage


@dataclass(frozen=True)
class RgbSelectConfig:
    block_size: int = 32
    target_per_block: int = 20
    initial_gradient_threshold: float = 20.0
    threshold_adapt_gain: float = 0.7

    def __post_init__(self):
        if self.block_size < 8:
            raise ValueError("block_size must be >= 8")
        if self.target_per_block < 1:
            raise ValueError("target_per_block must be >= 1")
        if not 0 < self.threshold_adapt_gain <= 1:
            raise ValueError("threshold_adapt_gain must be in (0, 1]")


@dataclass(frozen=True)
class EventSelectConfig:
    alpha: float = 1.0
    h: float = 180.0
    min_separation: int = 4
    mask_blur_radius: int = 2
    accumulation_fraction: float = 0.25

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.min_separation < 1:
            raise ValueError("min_separation must be >= 1")
        if not 0 < self.accumulation_fraction <= 1:
            raise ValueError("accumulation_fraction must be in (0, 1]")
        if self.mask_blur_radius < 1:
            raise ValueError("mask_blur_radius must be >= 1")


@dataclass(frozen=True)
class SelectedPixels:
    u: np.ndarray
    v: np.ndarray
    score: np.ndarray
    source: str  # "rgb" or "event"

    def __len__(self) -> int:
        return len(self.u)

    @classmethod
    def empty(cls, source: str) -> SelectedPixels:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), source)

    def as_tuples(self) -> list[tuple[int, int, str, float]]:
        return [(int(u), int(v), self.source, float(s))
                for u, v, s in zip(self.u, self.v, self.score)]


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gx, gy = central_gradient(img)
    return np.hypot(gx, gy)


class RgbPixelSelector:
    """Block-wise gradient thresholding with per-block adaptive thresholds.

    Each block keeps its own threshold.  After a call, a block that returned
    more than ``target_per_block`` pixels raises its threshold and one that
    returned fewer lowers it; the update moves the threshold geometrically
    (by ``threshold_adapt_gain``) towards the gradient level that would
    have produced exactly the target count on that image.
    """

    def __init__(self, cfg: RgbSelectConfig | None = None):
        self.cfg = cfg or RgbSelectConfig()
        self.thresholds: np.ndarray | None = None

    def _grid(self, shape):
        b = self.cfg.block_size
        return -(-shape[0] // b), -(-shape[1] // b)

    def select(self, gray: np.ndarray, rounds: int = 1) -> SelectedPixels:
        """Select pixels; ``rounds`` > 1 re-runs adaptation on the same image first."""
        if gray.shape[0] < self.cfg.block_size or gray.shape[1] < self.cfg.block_size:
            raise ValueError("image smaller than one block")
        mag = gradient_magnitude(gray)
        grid = self._grid(gray.shape)
        if self.thresholds is None or self.thresholds.shape != grid:
            self.thresholds = np.full(grid, float(self.cfg.initial_gradient_threshold))
        for _ in range(rounds - 1):
            self._select_once(mag)
        return self._select_once(mag)

    def _select_once(self, mag: np.ndarray) -> SelectedPixels:
        b = self.cfg.block_size
        target = self.cfg.target_per_block
        gain = self.cfg.threshold_adapt_gain
        us, vs, ss = [], [], []
        new_thr = self.thresholds.copy()
        for by in range(self.thresholds.shape[0]):
            for bx in range(self.thresholds.shape[1]):
                block = mag[by * b:(by + 1) * b, bx * b:(bx + 1) * b]
                thr = self.thresholds[by, bx]
                yy, xx = np.nonzero(block > thr)
                us.append(xx + bx * b)
                vs.append(yy + by * b)
                ss.append(block[yy, xx])
                count = len(yy)
                if count == target:
                    continue
                flat = np.sort(block, axis=None)[::-1]
                level = flat[min(target, flat.size) - 1]
                if count > target:
                    level = max(level, thr)
                else:
                    level = min(level, thr)
                level = float(np.clip(level, 1.0, 255.0))
                new_thr[by, bx] = float(np.clip(thr ** (1.0 - gain) * level ** gain, 1.0, 255.0))
        self.thresholds = new_thr
        u = np.concatenate(us).astype(np.int64)
        v = np.concatenate(vs).astype(np.int64)
        s = np.concatenate(ss).astype(np.float64)
        order = np.lexsort((u, v))
        return SelectedPixels(u[order], v[order], s[order], "rgb")


def select_rgb_pixels(gray: np.ndarray, cfg: RgbSelectConfig,
                      selector: RgbPixelSelector | None = None) -> SelectedPixels:
    """One selection call; pass a persistent ``selector`` to carry thresholds across calls."""
    selector = selector or RgbPixelSelector(cfg)
    return selector.select(gray)


def build_brightness_mask(ats: AtsImage, cfg: EventSelectConfig) -> np.ndarray:
    gray = np.ascontiguousarray(ats.gray, dtype=np.uint8)
    med = cv2.medianBlur(gray, 2 * cfg.mask_blur_radius + 1)
    return (gray > med) & (gray > 0)


def filter_events_by_mask(events: EventArray, window: tuple[int, int],
                          mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique (u, v) of events with t0 <= t <= t1 landing on the mask, sorted by (u, v)."""
    t0, t1 = window
    h, w = mask.shape
    keep = (events.t >= t0) & (events.t <= t1)
    keep &= (events.x >= 0) & (events.x < w) & (events.y >= 0) & (events.y < h)
    x = events.x[keep].astype(np.int64)
    y = events.y[keep].astype(np.int64)
    on = mask[y, x]
    lin = np.unique(x[on] * h + y[on])
    return lin // h, lin % h


def event_scores(ats: AtsImage, u: np.ndarray, v: np.ndarray, alpha: float) -> np.ndarray:
    img = ats.gray.astype(np.float64)
    mag = gradient_magnitude(img)
    return img[v, u] + alpha * mag[v, u]


def select_event_pixels(candidates: tuple[np.ndarray, np.ndarray], ats: AtsImage,
                        cfg: EventSelectConfig) -> SelectedPixels:
    u = np.asarray(candidates[0], dtype=np.int64)
    v = np.asarray(candidates[1], dtype=np.int64)
    if len(u) == 0:
        return SelectedPixels.empty("event")
    score = event_scores(ats, u, v, cfg.alpha)
    keep = score > cfg.h
    u, v, score = u[keep], v[keep], score[keep]
    # descending score, ties by (u, v)
    order = np.lexsort((v, u, -score))
    h, w = ats.gray.shape
    d = cfg.min_separation
    blocked = np.zeros((h + 2 * d, w + 2 * d), dtype=bool)
    acc = []
    for i in order:
        uu, vv = u[i], v[i]
        if blocked[vv + d, uu + d]:
            continue
        acc.append(i)
        blocked[vv:vv + 2 * d + 1, uu:uu + 2 * d + 1] = True
    acc = np.array(acc, dtype=np.int64)
    return SelectedPixels(u[acc], v[acc], score[acc], "event")


def select_ats_pixels(ats: AtsImage, events: EventArray, build_start_us: int,
                      cfg: EventSelectConfig) -> SelectedPixels:
    """Full event-pixel chain: brightness mask, trailing-window events, score + spacing.

    The ATS build interval is [build_start_us, render time]; only events in its
    trailing ``accumulation_fraction`` are projected onto the mask.
    """
    t1 = int(round(ats.render_time * 1e6))
    t0 = t1 - int(round(cfg.accumulation_fraction * max(t1 - build_start_us, 0)))
    mask = build_brightness_mask(ats, cfg)
    cand = filter_events_by_mask(events, (t0, t1), mask)
    return select_event_pixels(cand, ats, cfg)
