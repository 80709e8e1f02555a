"""Wall-clock abstraction so pipelines run against real or virtual time."""

import time


class Clock:
    def now_ms(self) -> int:
        raise NotImplementedError

    def sleep_ms(self, ms: float) -> None:
        raise NotImplementedError


class RealClock(Clock):
    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000

    def sleep_ms(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)


class VirtualClock(Clock):
    """Advances only when told to; sleep is instantaneous."""

    def __init__(self, start_ms: int = 0):
        self._now = float(start_ms)

    def now_ms(self) -> int:
        return int(self._now)

    def sleep_ms(self, ms: float) -> None:
        if ms > 0:
            self._now += ms

    def advance_ms(self, ms: float) -> None:
        self._now += ms
