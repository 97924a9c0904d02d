"""Deterministic discrete-event kernel.

Integer tick clock, a heap-ordered event queue with (fire_at, seq)
tie-breaking, named seeded random streams, and line-delimited trace
emission. Every other component runs on top of this loop; a run is a
pure function of (scenario, master_seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from random import Random
from typing import Any, Callable
import heapq

SimTime = int


class SchedulingInPast(Exception):
    """fire_at is earlier than the current clock."""


class UnknownStream(Exception):
    """draw() on a stream that was never registered."""


class InvalidDistribution(Exception):
    """Malformed or degenerate distribution spec."""


@dataclass(order=True)
class Event:
    fire_at: int
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False)


@dataclass
class RunStats:
    events_fired: int
    final_clock: int


def payload_digest(payload: dict) -> str:
    """Stable short digest of an event payload for the trace file."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def trace_line(event: Event) -> str:
    return f"{event.fire_at}\t{event.seq}\t{event.kind}\t{payload_digest(event.payload)}"


class RngStreams:
    """Named random streams, each an independent generator.

    A stream's sequence depends only on (master_seed, stream_id), never
    on draws made from other streams. Seeding goes through the string
    form so derivation is stable across platforms and processes.
    """

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self._streams: dict[str, Random] = {}

    def register(self, stream_id: str) -> None:
        if stream_id not in self._streams:
            self._streams[stream_id] = Random(f"{self.master_seed}/{stream_id}")

    def get(self, stream_id: str) -> Random:
        try:
            return self._streams[stream_id]
        except KeyError:
            raise UnknownStream(stream_id) from None

    def draw(self, stream_id: str, spec: dict) -> float | int:
        """Next value of the named stream under a distribution spec.

        Supported kinds: constant, uniform, uniform_int, exponential,
        choice (optionally weighted with rationals).
        """
        rng = self.get(stream_id)
        if not isinstance(spec, dict) or "dist" not in spec:
            raise InvalidDistribution(f"spec must carry a 'dist' key: {spec!r}")
        kind = spec["dist"]
        if kind == "constant":
            return spec["value"]
        if kind == "uniform":
            low, high = spec["low"], spec["high"]
            if high < low:
                raise InvalidDistribution("uniform: high < low")
            return low + (high - low) * rng.random()
        if kind == "uniform_int":
            low, high = spec["low"], spec["high"]
            if high < low:
                raise InvalidDistribution("uniform_int: high < low")
            span = high - low + 1
            return low + min(span - 1, int(rng.random() * span))
        if kind == "exponential":
            rate = Fraction(spec["rate"]) if isinstance(spec["rate"], str) else spec["rate"]
            if rate <= 0:
                raise InvalidDistribution("exponential: rate must be > 0")
            return -math.log(1.0 - rng.random()) / float(rate)
        if kind == "choice":
            values = spec["values"]
            if not values:
                raise InvalidDistribution("choice: empty values")
            weights = spec.get("weights")
            if weights is None:
                return values[min(len(values) - 1, int(rng.random() * len(values)))]
            if len(weights) != len(values):
                raise InvalidDistribution("choice: weights/values length mismatch")
            total = sum(weights)
            if total <= 0:
                raise InvalidDistribution("choice: weights must sum > 0")
            u = rng.random() * total
            acc = 0.0
            for value, weight in zip(values, weights):
                acc += weight
                if u < acc:
                    return value
            return values[-1]
        raise InvalidDistribution(f"unknown distribution kind {kind!r}")


class SimEngine:
    """Single-threaded event loop with deterministic ordering.

    Handlers are registered per event kind; observers see every fired
    event (metrics, trace writers). Events scheduled at the current
    clock fire later in the same tick, after everything already queued
    there, because seq strictly increases in scheduling order.
    """

    def __init__(self, master_seed: int = 0):
        self.clock: int = 0
        self.streams = RngStreams(master_seed)
        self._queue: list[Event] = []
        self._next_seq = 0
        self._events_fired = 0
        self._handlers: dict[str, Callable[[Event], None]] = {}
        self._observers: list[Callable[[Event], None]] = []

    # -- wiring -----------------------------------------------------------

    def on(self, kind: str, handler: Callable[[Event], None]) -> None:
        self._handlers[kind] = handler

    def add_observer(self, observer: Callable[[Event], None]) -> None:
        self._observers.append(observer)

    # -- scheduling -------------------------------------------------------

    def schedule(self, kind: str, payload: dict | None = None, fire_at: int = 0) -> int:
        if fire_at < self.clock:
            raise SchedulingInPast(f"fire_at={fire_at} < clock={self.clock}")
        event = Event(fire_at, self._next_seq, kind, payload or {})
        self._next_seq += 1
        heapq.heappush(self._queue, event)
        return event.seq

    def emit(self, kind: str, payload: dict | None = None) -> int:
        """Record an observation as a same-tick event."""
        return self.schedule(kind, payload, self.clock)

    # -- execution --------------------------------------------------------

    def run_until(self, t_end: int) -> RunStats:
        while self._queue and self._queue[0].fire_at <= t_end:
            event = heapq.heappop(self._queue)
            self.clock = event.fire_at
            self._events_fired += 1
            for observer in self._observers:
                observer(event)
            handler = self._handlers.get(event.kind)
            if handler is not None:
                handler(event)
        self.clock = max(self.clock, t_end)
        return RunStats(events_fired=self._events_fired, final_clock=self.clock)

    def drain(self) -> RunStats:
        """Run until the queue is empty, however far past t_end that goes."""
        while self._queue:
            self.run_until(self._queue[0].fire_at)
        return RunStats(events_fired=self._events_fired, final_clock=self.clock)

    @property
    def events_scheduled(self) -> int:
        return self._next_seq

    @property
    def pending(self) -> int:
        return len(self._queue)

    def draw(self, stream_id: str, spec: dict) -> float | int:
        return self.streams.draw(stream_id, spec)


class TraceRecorder:
    """Observer that keeps fired events and can render the trace file."""

    def __init__(self) -> None:
        self.events: list[Event] = []

    def __call__(self, event: Event) -> None:
        self.events.append(event)

    def lines(self) -> list[str]:
        return [trace_line(ev) for ev in self.events]

    def digest(self) -> str:
        body = "\n".join(self.lines())
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def filtered(self, kind: str) -> list[Event]:
        return [ev for ev in self.events if ev.kind == kind]


def fresh_engine(master_seed: int, *stream_ids: str) -> SimEngine:
    engine = SimEngine(master_seed)
    for stream_id in stream_ids:
        engine.streams.register(stream_id)
    return engine
