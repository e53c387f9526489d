"""Clocks for the runtime.

The runtime never reads time directly; it goes through a clock so that
budget enforcement and retry back-off can run against a fake clock in tests
and with ``--fixed-clock`` for reproducible traces.
"""

import asyncio
import time
from collections.abc import Awaitable
from datetime import datetime, timedelta, timezone
from typing import Protocol, TypeVar

from . import config

T = TypeVar("T")


class Clock(Protocol):
    def now(self) -> float:
        """Monotonic seconds."""
        ...

    def wall(self) -> datetime:
        """Wall-clock timestamp for recorded events."""
        ...

    async def sleep(self, seconds: float) -> None: ...

    async def wait_for(self, awaitable: Awaitable[T], timeout: float) -> T | None:
        """Await with a deadline; returns None when the deadline passes."""
        ...


class SystemClock:
    """Real time."""

    def now(self) -> float:
        return time.monotonic()

    def wall(self) -> datetime:
        return datetime.now(timezone.utc)

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(seconds)

    async def wait_for(self, awaitable: Awaitable[T], timeout: float) -> T | None:
        try:
            return await asyncio.wait_for(awaitable, timeout)
        except TimeoutError:
            return None


class FakeClock:
    """Deterministic clock that advances only when someone waits on it.

    ``wait_for`` lets the awaitable run for a fixed number of event-loop
    turns; if it has not finished by then the deadline is treated as passed
    and the clock jumps forward by the full timeout.
    """

    def __init__(
        self,
        start: float = 0.0,
        epoch: str = config.FIXED_CLOCK_EPOCH,
        settle_yields: int = config.CLOCK_SETTLE_YIELDS,
    ):
        self._now = start
        self._epoch = datetime.fromisoformat(epoch)
        self._settle_yields = settle_yields
        self.sleeps: list[float] = []

    def now(self) -> float:
        return self._now

    def wall(self) -> datetime:
        return self._epoch + timedelta(seconds=self._now)

    def advance(self, seconds: float) -> None:
        self._now += seconds

    async def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self._now += seconds
        await asyncio.sleep(0)

    async def wait_for(self, awaitable: Awaitable[T], timeout: float) -> T | None:
        task = asyncio.ensure_future(awaitable)
        for _ in range(self._settle_yields):
            if task.done():
                return task.result()
            await asyncio.sleep(0)
        if task.done():
            return task.result()
        task.cancel()
        try:
            await task
        except asyncio.CancelledError:
            pass
        self._now += timeout
        return None
