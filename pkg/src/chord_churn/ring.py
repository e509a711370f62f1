"""Identifier-space arithmetic for a Chord ring of size K = 2**bits.

The simulator works on plain ints for speed; the ``RingKey`` /
``KeyInterval`` value types wrap the same helpers for callers that want
checked, self-describing keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Openness(Enum):
    OPEN_OPEN = "()"
    OPEN_CLOSED = "(]"
    CLOSED_OPEN = "[)"


def cw(a: int, b: int, size: int) -> int:
    """Clockwise distance from ``a`` to ``b`` on a ring of ``size`` keys."""
    return (b - a) % size


def between(x: int, lo: int, hi: int, size: int, openness: Openness = Openness.OPEN_OPEN) -> bool:
    """Membership of ``x`` in the ring interval from ``lo`` to ``hi``.

    When ``lo == hi`` the open-open interval is the whole ring minus ``lo``,
    and the half-open forms cover the whole ring.
    """
    d = (x - lo) % size
    span = (hi - lo) % size
    if openness is Openness.OPEN_OPEN:
        if span == 0:
            return d != 0
        return 0 < d < span
    if openness is Openness.OPEN_CLOSED:
        if span == 0:
            return True
        return 0 < d <= span
    if span == 0:
        return True
    return d < span


@dataclass(frozen=True, order=True)
class RingKey:
    value: int
    bits: int

    def __post_init__(self) -> None:
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if not 0 <= self.value < (1 << self.bits):
            raise ValueError(f"key {self.value} outside [0, 2**{self.bits})")

    @property
    def size(self) -> int:
        return 1 << self.bits

    def __int__(self) -> int:
        return self.value

    def __add__(self, d: int) -> RingKey:
        return key_add(self, d)


@dataclass(frozen=True)
class KeyInterval:
    start: RingKey
    end: RingKey
    openness: Openness = Openness.OPEN_CLOSED

    def __post_init__(self) -> None:
        if self.start.bits != self.end.bits:
            raise ValueError("interval endpoints live on different rings")

    def __contains__(self, x: RingKey) -> bool:
        return in_interval(x, self)


def key_add(a: RingKey, d: int) -> RingKey:
    return RingKey((a.value + d) % a.size, a.bits)


def clockwise_distance(a: RingKey, b: RingKey) -> int:
    if a.bits != b.bits:
        raise ValueError("keys live on different rings")
    return cw(a.value, b.value, a.size)


def finger_start(n: RingKey, i: int) -> RingKey:
    """Start key of finger ``i`` (1-based): ``n + 2**(i-1)``."""
    if not 1 <= i <= n.bits:
        raise ValueError(f"finger index {i} outside 1..{n.bits}")
    return key_add(n, 1 << (i - 1))


def in_interval(x: RingKey, iv: KeyInterval) -> bool:
    if x.bits != iv.start.bits:
        raise ValueError("key and interval live on different rings")
    return between(x.value, iv.start.value, iv.end.value, x.size, iv.openness)
