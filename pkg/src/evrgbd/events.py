"""Event containers.  Timestamps are integer microseconds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class EventArray:
    """Column-wise event stream: t (int64 us), x, y (int32), p (int8, +1/-1)."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.int64).reshape(-1)
        x = np.ascontiguousarray(self.x, dtype=np.int32).reshape(-1)
        y = np.ascontiguousarray(self.y, dtype=np.int32).reshape(-1)
        p = np.ascontiguousarray(self.p, dtype=np.int8).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event columns differ in length")
        for name, a in zip("txyp", (t, x, y, p)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def empty(cls) -> EventArray:
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> EventArray:
        rows = list(events)
        if not rows:
            return cls.empty()
        t, x, y, p = zip(*rows)
        return cls(np.array(t), np.array(x), np.array(y), np.array(p))

    @classmethod
    def concatenate(cls, parts: Iterable[EventArray]) -> EventArray:
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(e, k) for e in parts]) for k in "txyp"))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    def __getitem__(self, idx) -> EventArray:
        if isinstance(idx, (int, np.integer)):
            raise TypeError("index with a slice or mask; iterate for single events")
        return EventArray(self.t[idx], self.x[idx], self.y[idx], self.p[idx])

    def is_sorted(self) -> bool:
        return bool(np.all(self.t[1:] >= self.t[:-1]))

    def first_unsorted_index(self) -> int | None:
        bad = np.nonzero(self.t[1:] < self.t[:-1])[0]
        return int(bad[0]) + 1 if len(bad) else None

    def between(self, t0_us: int, t1_us: int) -> EventArray:
        """Events with t0 < t <= t1 (stream must be sorted)."""
        i0 = np.searchsorted(self.t, t0_us, side="right")
        i1 = np.searchsorted(self.t, t1_us, side="right")
        return self[i0:i1]

    def equals(self, other: EventArray) -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "txyp")


def seconds_to_us(t: float) -> int:
    return int(round(t * 1e6))
