"""Injected time sources.

The request engine never reads the wall clock itself; it receives ``now``
as a plain epoch-seconds float. These classes are the two suppliers of
that value: the real clock for production and a manually advanced virtual
clock for deterministic tests of the 10-minute timeout protocol.
"""

from __future__ import annotations

import threading
import time
from datetime import datetime, timezone

# Fixed start for virtual time so rendered timestamps are reproducible.
VIRTUAL_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp()


class WallClock:
    def now(self) -> float:
        return time.time()


class VirtualClock:
    """A clock that only moves when told to; thread-safe."""

    def __init__(self, start: float = VIRTUAL_EPOCH):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError(f"cannot advance the clock backwards ({seconds}s)")
        with self._lock:
            self._now += seconds
            return self._now


def render_timestamp(epoch_seconds: float) -> str:
    """Epoch seconds as an RFC 3339 UTC string (second precision)."""
    dt = datetime.fromtimestamp(round(epoch_seconds, 3), tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")
