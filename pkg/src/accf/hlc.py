"""Per-server hybrid logical clock.

The clock never reads a physical clock itself: the simulator supplies the
physical reading with every call, which keeps runs deterministic and the
clock trivially testable.
"""

from __future__ import annotations

from .model import HlcTimestamp, ZERO


class HlcClock:
    """Strictly monotone timestamp source for one server."""

    __slots__ = ("current",)

    def __init__(self, initial: HlcTimestamp = ZERO):
        self.current = initial

    def update_for_put(self, pc: int, dt: HlcTimestamp) -> HlcTimestamp:
        """Advance past both the physical clock and an incoming write's
        highest dependency timestamp ``dt``.

        Four-branch rule: l <- max(l', pc, dt.l); the counter restarts at 0
        when l strictly advanced, otherwise increments past whichever side(s)
        share the new l.  The result is strictly greater than both dt and the
        previous clock value.
        """
        prev = self.current
        l_new = max(prev.l, pc, dt.l)
        if l_new == prev.l == dt.l:
            c_new = max(prev.c, dt.c) + 1
        elif l_new == prev.l:
            c_new = prev.c + 1
        elif l_new == dt.l:
            c_new = dt.c + 1
        else:
            c_new = 0
        self.current = HlcTimestamp(l_new, c_new)
        return self.current

    def tick(self, pc: int) -> HlcTimestamp:
        """dt-free advance used to stamp heartbeats."""
        prev = self.current
        l_new = max(prev.l, pc)
        c_new = prev.c + 1 if l_new == prev.l else 0
        self.current = HlcTimestamp(l_new, c_new)
        return self.current
