"""CPU-second quota accounting over a rolling window.

Charges land in per-second buckets, so admission is O(buckets) and exact to
one-second resolution. A call is admitted only if the window's already
charged CPU plus all in-flight reservations plus this call's own
reservation fits the budget; the reservation is the worst case the call
could cost (its manifest cpu_limit) and is replaced by the measured usage
when the call settles.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import PrismError

_EPS = 1e-9


class QuotaExceeded(PrismError):
    """Admission denied; retry_after says when capacity frees up."""

    def __init__(self, message: str, retry_after: float):
        super().__init__(message)
        self.retry_after = retry_after


@dataclass(frozen=True)
class QuotaPolicy:
    """Budget of cpu-seconds per rolling window, plus a concurrency cap."""

    cpu_seconds_per_window: float = 60.0
    window: float = 60.0
    max_concurrent: int = 4

    def __post_init__(self) -> None:
        if self.cpu_seconds_per_window <= 0 or self.max_concurrent <= 0:
            raise ValueError("quota budget and concurrency must be positive")
        if self.window < 1.0:
            raise ValueError("quota window must be at least one second")


class Reservation:
    """An admitted call's in-flight claim; settle() exactly once."""

    def __init__(self, ledger: "QuotaLedger", entity: str, amount: float, concurrent: bool):
        self._ledger = ledger
        self.entity = entity
        self.amount = amount
        self.concurrent = concurrent
        self._settled = False

    def settle(self, actual_cpu_seconds: float) -> None:
        """Replace the reservation with the measured charge."""
        if self._settled:
            return
        self._settled = True
        self._ledger._settle(self, max(0.0, actual_cpu_seconds))


@dataclass
class _EntityState:
    buckets: dict[int, float] = field(default_factory=dict)
    inflight: list[Reservation] = field(default_factory=list)


class QuotaLedger:
    """Thread-safe admission control and charge accounting per entity."""

    def __init__(self, clock: Callable[[], float] = time.time):
        self._clock = clock
        self._lock = threading.Lock()
        self._entities: dict[str, _EntityState] = {}

    def reserve(
        self,
        entity: str,
        policy: QuotaPolicy,
        amount: float,
        concurrent: bool = True,
    ) -> Reservation:
        """Admit a call reserving `amount` cpu-seconds, or raise QuotaExceeded."""
        now = self._clock()
        with self._lock:
            state = self._entities.setdefault(entity, _EntityState())
            self._evict(state, now, policy.window)

            if concurrent:
                active = sum(1 for r in state.inflight if r.concurrent)
                if active >= policy.max_concurrent:
                    raise QuotaExceeded(
                        f"{entity}: {active} calls already in flight "
                        f"(max_concurrent {policy.max_concurrent})",
                        retry_after=1.0,
                    )

            charged = sum(state.buckets.values())
            reserved = sum(r.amount for r in state.inflight)
            if charged + reserved + amount > policy.cpu_seconds_per_window + _EPS:
                retry = self._retry_after(state, now, policy, reserved + amount)
                raise QuotaExceeded(
                    f"{entity}: cpu budget of {policy.cpu_seconds_per_window} "
                    f"cpu-seconds per {policy.window}s window exhausted",
                    retry_after=retry,
                )

            reservation = Reservation(self, entity, amount, concurrent)
            state.inflight.append(reservation)
            return reservation

    def charge_direct(self, entity: str, cpu_seconds: float) -> None:
        """Record usage without an admission check (crash-recovered jobs)."""
        if cpu_seconds <= 0:
            return
        now = self._clock()
        with self._lock:
            state = self._entities.setdefault(entity, _EntityState())
            bucket = math.floor(now)
            state.buckets[bucket] = state.buckets.get(bucket, 0.0) + cpu_seconds

    def window_charged(self, entity: str, policy: QuotaPolicy) -> float:
        """Sum of charges currently inside the entity's window."""
        now = self._clock()
        with self._lock:
            state = self._entities.setdefault(entity, _EntityState())
            self._evict(state, now, policy.window)
            return sum(state.buckets.values())

    def _settle(self, reservation: Reservation, actual: float) -> None:
        now = self._clock()
        with self._lock:
            state = self._entities.setdefault(reservation.entity, _EntityState())
            try:
                state.inflight.remove(reservation)
            except ValueError:
                pass
            if actual > 0:
                bucket = math.floor(now)
                state.buckets[bucket] = state.buckets.get(bucket, 0.0) + actual

    @staticmethod
    def _evict(state: _EntityState, now: float, window: float) -> None:
        horizon = math.floor(now) - window
        stale = [sec for sec in state.buckets if sec <= horizon]
        for sec in stale:
            del state.buckets[sec]

    @staticmethod
    def _retry_after(
        state: _EntityState, now: float, policy: QuotaPolicy, committed: float
    ) -> float:
        """Seconds until enough charged buckets age out for `committed` to fit."""
        budget = policy.cpu_seconds_per_window
        remaining = sum(state.buckets.values())
        if committed > budget + _EPS:
            # No amount of waiting makes this call fit alongside what is
            # already reserved; suggest one full window.
            return policy.window
        freed_until: Optional[int] = None
        for sec in sorted(state.buckets):
            if remaining + committed <= budget + _EPS:
                break
            remaining -= state.buckets[sec]
            freed_until = sec
        if freed_until is None:
            return 1.0
        return max(0.0, freed_until + policy.window - now)
