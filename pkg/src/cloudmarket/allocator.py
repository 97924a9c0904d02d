"""SLA-driven admission control, pricing quotes, and usage accounting.

The examiner either rejects a request with the most fundamental reason
that applies (deadline before budget before capacity) or accepts it and
commits a capacity block, so an accepted plan can never be invalidated
by later admissions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .datacenter import Block, Datacenter
from .engine import SimEngine
from .money import Money, as_fraction, ceil_div, round_half_up

REJECT_DEADLINE = "DeadlineInfeasible"
REJECT_BUDGET = "BudgetInfeasible"
REJECT_CAPACITY = "CapacityUnavailable"

QUEUED = "Queued"
EXECUTING = "Executing"
COMPLETED = "Completed"
FAILED = "Failed"


class UnknownRequest(Exception):
    pass


class OverlappingInterval(Exception):
    """Metering the same request twice over intersecting ticks."""


class RequestNotFinished(Exception):
    """finalize_charge before the request completed or failed."""


class AlreadyFinalized(Exception):
    pass


class InvalidPolicy(Exception):
    pass


@dataclass(frozen=True)
class QosSpec:
    deadline: int
    budget: Money
    cpu_need: int
    mem_need: int
    reliability_class: int = 0
    security_class: int = 0


@dataclass(frozen=True)
class ServiceRequest:
    request_id: str
    consumer_id: str
    submit_time: int
    workload_volume: int
    qos: QosSpec

    @property
    def runtime(self) -> int:
        return ceil_div(self.workload_volume, self.qos.cpu_need)


@dataclass(frozen=True)
class AllocationPlan:
    request_id: str
    machine_id: str
    vm_start: int
    exec_start: int
    completion: int
    price: Money


@dataclass(frozen=True)
class Accept:
    plan: AllocationPlan
    accepted: bool = True


@dataclass(frozen=True)
class Reject:
    reason: str
    detail: str = ""
    accepted: bool = False


Decision = Accept | Reject


# -- pricing ----------------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    rate: Fraction  # currency per cpu-tick of workload volume
    kind: str = "fixed"


@dataclass(frozen=True)
class PeakOffPeak:
    rate: Fraction
    peak_multiplier: Fraction
    peak_windows: tuple[tuple[int, int], ...]  # daily [start, end) tick spans
    day_length: int
    kind: str = "peak_off_peak"

    def __post_init__(self) -> None:
        spans = sorted(self.peak_windows)
        for (s1, e1), (s2, _e2) in zip(spans, spans[1:]):
            if s2 < e1:
                raise InvalidPolicy(f"peak windows overlap: [{s1},{e1}) and [{s2},..)")
        for s, e in spans:
            if not 0 <= s < e <= self.day_length:
                raise InvalidPolicy(f"peak window [{s},{e}) outside day of {self.day_length}")


@dataclass(frozen=True)
class UtilizationLinear:
    base_rate: Fraction
    alpha: Fraction
    kind: str = "utilization_linear"


PricingPolicy = Fixed | PeakOffPeak | UtilizationLinear


def pricing_from_config(config: dict) -> PricingPolicy:
    kind = config["kind"]
    if kind == "fixed":
        return Fixed(rate=as_fraction(config["rate"]))
    if kind == "peak_off_peak":
        return PeakOffPeak(
            rate=as_fraction(config["rate"]),
            peak_multiplier=as_fraction(config["peak_multiplier"]),
            peak_windows=tuple((int(s), int(e)) for s, e in config["peak_windows"]),
            day_length=int(config["day_length"]),
        )
    if kind == "utilization_linear":
        return UtilizationLinear(
            base_rate=as_fraction(config["base_rate"]),
            alpha=as_fraction(config["alpha"]),
        )
    raise InvalidPolicy(f"unknown pricing kind {kind!r}")


def quote(
    policy: PricingPolicy,
    volume: int,
    submit_time: int,
    utilization: Fraction = Fraction(0),
) -> Money:
    """Price a request under the given policy, rounded half-up once."""
    if isinstance(policy, Fixed):
        exact = policy.rate * volume
    elif isinstance(policy, PeakOffPeak):
        tick = submit_time % policy.day_length
        in_peak = any(s <= tick < e for s, e in policy.peak_windows)
        exact = policy.rate * volume * (policy.peak_multiplier if in_peak else 1)
    elif isinstance(policy, UtilizationLinear):
        exact = policy.base_rate * volume * (1 + policy.alpha * utilization)
    else:
        raise InvalidPolicy(f"unknown pricing policy {policy!r}")
    return round_half_up(exact)


# -- accounting ---------------------------------------------------------------

@dataclass
class MeterRecord:
    start: int
    end: int
    cpu: int

    @property
    def usage(self) -> int:
        return (self.end - self.start) * self.cpu


@dataclass(frozen=True)
class Invoice:
    request_id: str
    amount: Money
    agreed_price: Money
    line_items: tuple[tuple[int, int, int], ...]  # (start, end, cu_ticks)
    usage: int
    volume: int
    complete: bool
    finalized_at: int


@dataclass(frozen=True)
class ProgressReport:
    request_id: str
    state: str
    fraction_done: Fraction
    expected_completion: int | None


@dataclass
class _RequestTrack:
    request: ServiceRequest
    plan: AllocationPlan
    meters: list[MeterRecord] = field(default_factory=list)
    exec_start: int | None = None
    completed_at: int | None = None
    failed_at: int | None = None


class SlaAllocator:
    """Admission examiner plus the accounting books for one provider."""

    def __init__(
        self,
        engine: SimEngine,
        datacenter: Datacenter,
        pricing: PricingPolicy,
        reliability_class: int = 0,
        security_class: int = 0,
    ):
        self.engine = engine
        self.datacenter = datacenter
        self.pricing = pricing
        self.reliability_class = reliability_class
        self.security_class = security_class
        self.tracks: dict[str, _RequestTrack] = {}
        self.invoices: dict[str, Invoice] = {}
        # (at, accepted) per examination; (at, lateness) per completion
        self.examinations: list[tuple[int, bool]] = []
        self.completions: list[tuple[int, int]] = []

    # -- admission -----------------------------------------------------------

    def examine(
        self,
        request: ServiceRequest,
        at: int,
        load_stats: dict | None = None,
        backing: tuple[str, int, int] | None = None,
        agreed_price: Money | None = None,
        enforce_deadline: bool = True,
        horizon: int | None = None,
    ) -> Decision:
        """Admit or reject a request at tick `at`.

        `backing` is (machine_id, window_start, window_end) for a request
        whose capacity was already reserved; the plan then sits inside the
        reservation and no new commitment is made.  `agreed_price`
        overrides the posted quote when a price was already negotiated.
        With `enforce_deadline` off, slots past the deadline are searched
        up to `horizon` and lateness is settled through penalties instead.
        `load_stats` (see historical_stats) is accepted for policy tuning
        but the v1 examiner does not act on it.
        """
        decision = self._examine_inner(
            request, at, backing, agreed_price, enforce_deadline, horizon
        )
        if isinstance(decision, Accept):
            self.tracks[request.request_id] = _RequestTrack(request, decision.plan)
        self.examinations.append((at, decision.accepted))
        payload = {
            "provider": self.datacenter.provider_id,
            "request_id": request.request_id,
            "accepted": decision.accepted,
            "reason": None if isinstance(decision, Accept) else decision.reason,
            "price": decision.plan.price if isinstance(decision, Accept) else None,
        }
        if isinstance(decision, Accept):
            payload.update({
                "machine": decision.plan.machine_id,
                "vm_start": decision.plan.vm_start,
                "completion": decision.plan.completion,
                "cpu": request.qos.cpu_need,
                "mem": request.qos.mem_need,
                "backed": backing is not None,
            })
        self.engine.emit("admission", payload)
        return decision

    def _examine_inner(
        self,
        request: ServiceRequest,
        at: int,
        backing: tuple[str, int, int] | None,
        agreed_price: Money | None,
        enforce_deadline: bool,
        horizon: int | None,
    ) -> Decision:
        qos = request.qos
        runtime = request.runtime
        boot = self.datacenter.boot_delay
        if backing is not None:
            machine_id, window_start, window_end = backing
            vm_start = max(at, window_start)
            exec_start = vm_start + boot
            completion = exec_start + runtime
            if completion > window_end:
                return Reject(REJECT_CAPACITY, "reserved window too small")
            price = agreed_price if agreed_price is not None else self._quote_now(request, at)
            return Accept(AllocationPlan(
                request.request_id, machine_id, vm_start, exec_start, completion, price,
            ))

        # fastest possible finish on an idle machine
        if enforce_deadline and at + boot + runtime > qos.deadline:
            return Reject(
                REJECT_DEADLINE,
                f"needs {boot + runtime} ticks from {at}, deadline {qos.deadline}",
            )
        price = agreed_price if agreed_price is not None else self._quote_now(request, at)
        if price > qos.budget:
            return Reject(REJECT_BUDGET, f"quote {price} exceeds budget {qos.budget}")

        if (qos.reliability_class > self.reliability_class
                or qos.security_class > self.security_class):
            return Reject(
                REJECT_CAPACITY,
                f"provider grades ({self.reliability_class}, {self.security_class}) "
                f"below required ({qos.reliability_class}, {qos.security_class})",
            )
        if enforce_deadline:
            latest_start = qos.deadline - runtime - boot
        else:
            latest_start = (horizon if horizon is not None else qos.deadline * 4) - runtime - boot
        best: tuple[int, str] | None = None
        for machine_id in sorted(self.datacenter.machines):
            cal = self.datacenter.calendars[machine_id]
            start = cal.earliest_fit(at, latest_start, boot + runtime, qos.cpu_need, qos.mem_need)
            if start is not None and (best is None or start < best[0]):
                best = (start, machine_id)
        if best is None:
            return Reject(REJECT_CAPACITY, "no machine has a feasible slot")
        vm_start, machine_id = best
        plan = AllocationPlan(
            request.request_id, machine_id, vm_start,
            vm_start + boot, vm_start + boot + runtime, price,
        )
        self.datacenter.calendars[machine_id].add(Block(
            start=vm_start, end=plan.completion,
            cpu=qos.cpu_need, mem=qos.mem_need, owner=request.request_id,
        ))
        return Accept(plan)

    def _quote_now(self, request: ServiceRequest, at: int) -> Money:
        return quote(
            self.pricing,
            request.workload_volume,
            request.submit_time,
            self.datacenter.utilization_at(at),
        )

    def _track(self, request_id: str) -> _RequestTrack:
        track = self.tracks.get(request_id)
        if track is None:
            raise UnknownRequest(request_id)
        return track

    # -- request lifecycle markers ------------------------------------------------

    def mark_dispatched(self, request_id: str, exec_start: int) -> None:
        self._track(request_id).exec_start = exec_start

    def mark_completed(self, request_id: str, at: int) -> None:
        track = self._track(request_id)
        track.completed_at = at
        self.completions.append((at, max(0, at - track.request.qos.deadline)))

    def mark_failed(self, request_id: str, at: int) -> None:
        self._track(request_id).failed_at = at

    # -- metering --------------------------------------------------------------

    def meter(self, request_id: str, start: int, end: int, cpu: int) -> int:
        """Record measured usage; returns the accumulated cu-ticks."""
        track = self._track(request_id)
        if end <= start or cpu < 0:
            raise ValueError(f"bad meter interval [{start}, {end}) x {cpu}")
        for rec in track.meters:
            if start < rec.end and rec.start < end:
                raise OverlappingInterval(
                    f"{request_id}: [{start}, {end}) overlaps [{rec.start}, {rec.end})"
                )
        track.meters.append(MeterRecord(start, end, cpu))
        return self.usage(request_id)

    def usage(self, request_id: str) -> int:
        return sum(rec.usage for rec in self._track(request_id).meters)

    def finalize_charge(self, request_id: str, at: int) -> Invoice:
        """Close the books: full price when done, pro-rata by usage otherwise."""
        track = self._track(request_id)
        if request_id in self.invoices:
            raise AlreadyFinalized(request_id)
        if track.completed_at is None and track.failed_at is None:
            raise RequestNotFinished(request_id)
        used = self.usage(request_id)
        complete = track.completed_at is not None
        price = track.plan.price
        if complete:
            amount = price
        else:
            amount = round_half_up(
                Fraction(price) * Fraction(min(used, track.request.workload_volume),
                                           track.request.workload_volume)
            )
        invoice = Invoice(
            request_id=request_id,
            amount=amount,
            agreed_price=price,
            line_items=tuple((r.start, r.end, r.usage) for r in track.meters),
            usage=used,
            volume=track.request.workload_volume,
            complete=complete,
            finalized_at=at,
        )
        self.invoices[request_id] = invoice
        return invoice

    # -- monitoring ----------------------------------------------------------------

    def progress(self, request_id: str, at: int) -> ProgressReport:
        track = self._track(request_id)
        plan = track.plan
        if track.failed_at is not None and at >= track.failed_at:
            done = Fraction(min(self.usage(request_id), track.request.workload_volume),
                            track.request.workload_volume)
            return ProgressReport(request_id, FAILED, done, None)
        if track.completed_at is not None and at >= track.completed_at:
            return ProgressReport(request_id, COMPLETED, Fraction(1), track.completed_at)
        if track.exec_start is None or at < track.exec_start:
            return ProgressReport(request_id, QUEUED, Fraction(0), plan.completion)
        done = Fraction(
            (at - track.exec_start) * track.request.qos.cpu_need,
            track.request.workload_volume,
        )
        return ProgressReport(request_id, EXECUTING, min(done, Fraction(1)), plan.completion)

    def historical_stats(self, window_start: int, window_end: int) -> dict:
        """Acceptance, utilization, and lateness over [window_start, window_end).

        Each statistic is present only when its underlying data exists in
        the window; an empty window yields an empty mapping, never zeros.
        """
        stats: dict = {}
        examined = [ok for at, ok in self.examinations if window_start <= at < window_end]
        if examined:
            stats["acceptance_rate"] = Fraction(sum(examined), len(examined))
        finished = [late for at, late in self.completions if window_start <= at < window_end]
        if finished:
            stats["mean_lateness"] = Fraction(sum(finished), len(finished))
        if window_end > window_start:
            ticks = range(window_start, window_end)
            total = sum(self.datacenter.utilization_at(t) for t in ticks)
            stats["mean_utilization"] = total / len(ticks)
        return stats
