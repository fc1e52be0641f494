"""Wall and virtual clocks, and an asyncio loop that runs on virtual time.

Replay engines only ever see ``clock.now_us()`` and ``await sleep_until()``.
Under :class:`VirtualEventLoop` every timer fires at the exact integer
microsecond it was scheduled for and idle gaps take no wall time, so whole
distributed runs are deterministic and fast.
"""

from __future__ import annotations

import asyncio
import math
import selectors
import time
from typing import Any, Awaitable, Protocol, TypeVar

T = TypeVar("T")

# 2023-11-14T22:13:20Z; any fixed value keeps simulated runs reproducible.
DEFAULT_VIRTUAL_EPOCH_US = 1_700_000_000_000_000


class Clock(Protocol):
    def now_us(self) -> int: ...

    def loop_time(self, abs_us: int) -> float:
        """Event-loop time corresponding to the absolute epoch time ``abs_us``."""


class RealClock:
    """Host clock. Epoch microseconds come from ``time.time_ns``."""

    def now_us(self) -> int:
        return time.time_ns() // 1000

    def loop_time(self, abs_us: int) -> float:
        loop = asyncio.get_running_loop()
        return loop.time() + (abs_us - self.now_us()) / 1e6


class VirtualClock:
    def __init__(self, start_us: int = DEFAULT_VIRTUAL_EPOCH_US) -> None:
        self._origin = start_us
        self._now = start_us

    def now_us(self) -> int:
        return self._now

    @property
    def origin_us(self) -> int:
        return self._origin

    def advance(self, delta_us: int) -> None:
        if delta_us < 0:
            raise ValueError("virtual time cannot run backwards")
        self._now += delta_us

    def seconds(self) -> float:
        """Seconds since the clock's origin (what the loop reports as ``time()``)."""
        return (self._now - self._origin) / 1e6

    def loop_time(self, abs_us: int) -> float:
        return (abs_us - self._origin) / 1e6


class SimulationStalled(RuntimeError):
    """Every task is blocked and no timer is pending."""


class _AdvancingSelector(selectors.BaseSelector):
    """Polls real file descriptors without blocking; idles by advancing the clock."""

    def __init__(self, clock: VirtualClock) -> None:
        self._inner = selectors.DefaultSelector()
        self._clock = clock

    def register(self, fileobj, events, data=None):
        return self._inner.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._inner.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._inner.modify(fileobj, events, data)

    def get_map(self):
        return self._inner.get_map()

    def select(self, timeout=None):
        ready = self._inner.select(0)
        if ready:
            return ready
        if timeout is None:
            raise SimulationStalled("no runnable task and no pending timer")
        if timeout > 0:
            # timers sit on integer microseconds; absorb float noise
            self._clock.advance(max(1, math.ceil(timeout * 1e6 - 1e-3)))
        return []

    def close(self) -> None:
        self._inner.close()


class VirtualEventLoop(asyncio.SelectorEventLoop):
    def __init__(self, clock: VirtualClock) -> None:
        super().__init__(selector=_AdvancingSelector(clock))
        self.clock = clock

    def time(self) -> float:
        return self.clock.seconds()


def run_virtual(main: Awaitable[T], clock: VirtualClock | None = None) -> T:
    """Run ``main`` to completion on virtual time, then cancel leftover tasks."""
    clock = clock or VirtualClock()
    loop = VirtualEventLoop(clock)
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main)
    finally:
        try:
            pending = asyncio.all_tasks(loop)
            for task in pending:
                task.cancel()
            if pending:
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        finally:
            asyncio.set_event_loop(None)
            loop.close()


async def sleep_until(clock: Any, abs_us: int) -> None:
    """Return once ``clock.now_us() >= abs_us``; exactly ``abs_us`` on a virtual clock."""
    while True:
        remaining = abs_us - clock.now_us()
        if remaining <= 0:
            return
        await asyncio.sleep(remaining / 1e6)
