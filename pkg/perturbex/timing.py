"""Per-phase wall-clock instrumentation for pipeline runs."""

from __future__ import annotations

import asyncio
import time
from collections.abc import Iterator
from contextlib import contextmanager
from enum import StrEnum
from typing import Protocol

from pydantic import BaseModel, ConfigDict, Field


class Phase(StrEnum):
    DETECT = "detect"
    MASK = "mask"
    INPAINT = "inpaint"
    REDETECT = "redetect"
    COMPOSITE = "composite"


class PhaseTiming(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_id: str
    condition: str | None = None
    phase: Phase
    wall_seconds: float = Field(ge=0.0)
    mask_mode: str | None = None


class Clock(Protocol):
    def now(self) -> float: ...

    async def sleep(self, seconds: float) -> None: ...


class MonotonicClock:
    """Real time: perf_counter and asyncio.sleep."""

    def now(self) -> float:
        return time.perf_counter()

    async def sleep(self, seconds: float) -> None:
        if seconds > 0:
            await asyncio.sleep(seconds)


class SimulatedClock:
    """Virtual time; sleeping advances the clock without waiting.

    Only meaningful when phases run one at a time (workers=1), since concurrent
    sleepers all advance the same counter.
    """

    def __init__(self, start: float = 0.0) -> None:
        self._now = start

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        self._now += max(0.0, seconds)

    async def sleep(self, seconds: float) -> None:
        self.advance(seconds)
        await asyncio.sleep(0)


class PhaseRecorder:
    """Collects PhaseTiming rows for one run."""

    def __init__(self, clock: Clock) -> None:
        self.clock = clock
        self.timings: list[PhaseTiming] = []

    @contextmanager
    def phase(
        self,
        image_id: str,
        phase: Phase,
        *,
        condition: str | None = None,
        mask_mode: str | None = None,
    ) -> Iterator[None]:
        start = self.clock.now()
        try:
            yield
        finally:
            elapsed = max(0.0, self.clock.now() - start)
            self.timings.append(
                PhaseTiming(
                    image_id=image_id,
                    condition=condition,
                    phase=phase,
                    wall_seconds=elapsed,
                    mask_mode=mask_mode,
                )
            )
