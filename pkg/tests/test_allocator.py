"""Admission control, pricing quotes, metering, and invoicing."""

import random
from fractions import Fraction

import pytest

from cloudmarket.allocator import (
    Accept,
    AlreadyFinalized,
    Fixed,
    InvalidPolicy,
    OverlappingInterval,
    PeakOffPeak,
    QosSpec,
    Reject,
    RequestNotFinished,
    ServiceRequest,
    SlaAllocator,
    UtilizationLinear,
    pricing_from_config,
    quote,
    REJECT_BUDGET,
    REJECT_CAPACITY,
    REJECT_DEADLINE,
)
from cloudmarket.datacenter import Datacenter, MachineCalendar
from cloudmarket.engine import SimEngine


def make_allocator(specs, rate=1, boot_delay=0, **kwargs):
    engine = SimEngine()
    dc = Datacenter(engine, "prov", specs, boot_delay=boot_delay)
    return SlaAllocator(engine, dc, Fixed(rate=Fraction(rate)), **kwargs)


def request(request_id, submit, volume, cpu, deadline, budget, mem=1, **qos_kwargs):
    return ServiceRequest(
        request_id, "acme", submit, volume,
        QosSpec(deadline, budget, cpu, mem, **qos_kwargs),
    )


# -- pricing ------------------------------------------------------------------------


def test_fixed_quote_is_rate_times_volume():
    assert quote(Fixed(rate=Fraction(100)), 50, submit_time=0) == 5_000


def test_peak_quote_doubles_inside_the_window():
    policy = PeakOffPeak(
        rate=Fraction(100), peak_multiplier=Fraction(2),
        peak_windows=((40, 80),), day_length=100,
    )
    assert quote(policy, 50, submit_time=45) == 10_000
    assert quote(policy, 50, submit_time=10) == 5_000
    # day wraps: tick 145 sits inside the second day's window
    assert quote(policy, 50, submit_time=145) == 10_000
    # boundaries: start is in, end is out
    assert quote(policy, 50, submit_time=40) == 10_000
    assert quote(policy, 50, submit_time=80) == 5_000


def test_idle_utilization_pricing_equals_fixed():
    linear = UtilizationLinear(base_rate=Fraction(100), alpha=Fraction(1, 2))
    fixed = Fixed(rate=Fraction(100))
    for volume in (1, 7, 50):
        assert quote(linear, volume, 0, utilization=Fraction(0)) == quote(
            fixed, volume, 0
        )


def test_utilization_pricing_scales_linearly():
    linear = UtilizationLinear(base_rate=Fraction(100), alpha=Fraction(1, 2))
    assert quote(linear, 10, 0, utilization=Fraction(1)) == 1_500
    assert quote(linear, 10, 0, utilization=Fraction(1, 2)) == 1_250


def test_quote_rounds_half_up_once():
    # 3 * 7 * (1 + 1/3 * 1/2) = 24.5 -> 25
    linear = UtilizationLinear(base_rate=Fraction(3), alpha=Fraction(1, 3))
    assert quote(linear, 7, 0, utilization=Fraction(1, 2)) == 25


def test_overlapping_peak_windows_are_invalid():
    with pytest.raises(InvalidPolicy):
        PeakOffPeak(
            rate=Fraction(1), peak_multiplier=Fraction(2),
            peak_windows=((0, 50), (40, 60)), day_length=100,
        )


def test_pricing_from_config_round_trip():
    fixed = pricing_from_config({"kind": "fixed", "rate": "5/2"})
    assert isinstance(fixed, Fixed) and fixed.rate == Fraction(5, 2)
    peak = pricing_from_config({
        "kind": "peak_off_peak", "rate": 4, "peak_multiplier": 2,
        "peak_windows": [[10, 20]], "day_length": 100,
    })
    assert peak.peak_windows == ((10, 20),)
    with pytest.raises(InvalidPolicy):
        pricing_from_config({"kind": "surge"})


# -- admission ----------------------------------------------------------------------


def test_accepts_exactly_feasible_deadline():
    alloc = make_allocator([("m1", 4, 16)])
    req = request("req000001", 10, volume=100, cpu=4, deadline=35, budget=10_000)
    decision = alloc.examine(req, at=10)
    assert isinstance(decision, Accept)
    assert decision.plan.completion == 35
    assert decision.plan.vm_start == 10


def test_rejects_unmeetable_deadline_first():
    alloc = make_allocator([("m1", 4, 16)])
    req = request("req000001", 10, volume=100, cpu=4, deadline=20, budget=10_000)
    decision = alloc.examine(req, at=10)
    assert isinstance(decision, Reject)
    assert decision.reason == REJECT_DEADLINE


def test_rejects_over_budget_quote():
    alloc = make_allocator([("m1", 4, 16)], rate=100)
    req = request("req000001", 0, volume=50, cpu=1, deadline=100, budget=4_999)
    decision = alloc.examine(req, at=0)
    assert isinstance(decision, Reject)
    assert decision.reason == REJECT_BUDGET


def test_rejects_when_no_slot_exists():
    alloc = make_allocator([("m1", 4, 16)])
    first = request("req000001", 0, volume=40, cpu=4, deadline=10, budget=10_000)
    assert isinstance(alloc.examine(first, at=0), Accept)
    second = request("req000002", 0, volume=40, cpu=4, deadline=10, budget=10_000)
    decision = alloc.examine(second, at=0)
    assert isinstance(decision, Reject)
    assert decision.reason == REJECT_CAPACITY


def test_grade_mismatch_reads_as_missing_capacity():
    alloc = make_allocator([("m1", 4, 16)], reliability_class=1, security_class=0)
    req = request(
        "req000001", 0, volume=4, cpu=1, deadline=100, budget=1_000,
        reliability_class=2,
    )
    decision = alloc.examine(req, at=0)
    assert isinstance(decision, Reject)
    assert decision.reason == REJECT_CAPACITY


def test_deadline_precedes_budget_in_rejection_order():
    alloc = make_allocator([("m1", 4, 16)], rate=100)
    # both infeasible: deadline must win
    req = request("req000001", 0, volume=100, cpu=4, deadline=5, budget=1)
    assert alloc.examine(req, at=0).reason == REJECT_DEADLINE


def test_boot_delay_counts_against_the_deadline():
    alloc = make_allocator([("m1", 4, 16)], boot_delay=5)
    req = request("req000001", 0, volume=40, cpu=4, deadline=14, budget=10_000)
    assert alloc.examine(req, at=0).reason == REJECT_DEADLINE
    req2 = request("req000002", 0, volume=40, cpu=4, deadline=15, budget=10_000)
    decision = alloc.examine(req2, at=0)
    assert isinstance(decision, Accept)
    assert decision.plan.exec_start == 5
    assert decision.plan.completion == 15


def test_queued_start_inside_the_deadline():
    # second identical request runs after the first, still in time
    alloc = make_allocator([("m1", 4, 16)])
    a = request("req000001", 0, volume=40, cpu=4, deadline=30, budget=10_000)
    b = request("req000002", 0, volume=40, cpu=4, deadline=30, budget=10_000)
    plan_a = alloc.examine(a, at=0).plan
    plan_b = alloc.examine(b, at=0).plan
    assert plan_a.completion == 10
    assert plan_b.vm_start == 10
    assert plan_b.completion == 20


def test_backed_admission_sits_inside_the_reservation():
    # a reservation occupies the calendar; an open search must steer
    # around it, while a backed examine lands inside it
    from cloudmarket.datacenter import Block

    alloc = make_allocator([("m1", 4, 16)])
    alloc.datacenter.calendars["m1"].add(Block(5, 30, 4, 4, owner="rsv000001"))
    open_search = alloc.examine(
        request("req000001", 0, volume=8, cpu=4, deadline=100, budget=10_000),
        at=5,
    )
    assert isinstance(open_search, Accept)
    assert open_search.plan.vm_start == 30  # pushed past the hold
    backed = alloc.examine(
        request("req000002", 0, volume=8, cpu=4, deadline=100, budget=10_000),
        at=5, backing=("m1", 5, 30),
    )
    assert isinstance(backed, Accept)
    assert backed.plan.vm_start == 5
    assert backed.plan.completion == 7


def test_agreed_price_overrides_the_quote():
    alloc = make_allocator([("m1", 4, 16)], rate=100)
    req = request("req000001", 0, volume=50, cpu=1, deadline=100, budget=4_999)
    decision = alloc.examine(req, at=0, agreed_price=4_000)
    assert isinstance(decision, Accept)
    assert decision.plan.price == 4_000


def test_relaxed_deadline_mode_queues_late_work():
    alloc = make_allocator([("m1", 4, 16)])
    a = request("req000001", 0, volume=120, cpu=4, deadline=30, budget=10_000)
    b = request("req000002", 0, volume=120, cpu=4, deadline=30, budget=10_000)
    assert alloc.examine(a, at=0).plan.completion == 30
    relaxed = alloc.examine(b, at=0, enforce_deadline=False, horizon=400)
    assert isinstance(relaxed, Accept)
    assert relaxed.plan.completion == 60  # late, penalties handle it


def _replay_schedulable(accepted_plans, cpu_capacity):
    """Per-tick recomputation of machine load from the accepted plans."""
    load = {}
    for plan, cpu in accepted_plans:
        for t in range(plan.vm_start, plan.completion):
            load[t] = load.get(t, 0) + cpu
    return all(v <= cpu_capacity for v in load.values())


def test_oversubscribed_burst_admits_only_the_schedulable_subset():
    # 30 identical requests, room for 10 by the shared deadline
    alloc = make_allocator([("m1", 4, 16)])
    accepted = []
    rejected = 0
    for i in range(30):
        req = request(f"req{i:06d}", 0, volume=40, cpu=4, deadline=100, budget=9_999)
        decision = alloc.examine(req, at=0)
        if isinstance(decision, Accept):
            accepted.append((decision.plan, 4))
        else:
            rejected += 1
            assert decision.reason in (REJECT_DEADLINE, REJECT_CAPACITY)
    assert len(accepted) == 10
    assert rejected == 20
    assert _replay_schedulable(accepted, cpu_capacity=4)


def test_randomized_admissions_never_overload():
    # oracle: replay every accepted plan against per-tick capacity
    rng = random.Random(99)
    for case in range(60):
        cap = rng.randint(2, 6)
        alloc = make_allocator(
            [("m1", cap, 64), ("m2", cap, 64)], boot_delay=rng.randint(0, 2)
        )
        plans = {"m1": [], "m2": []}
        for i in range(rng.randint(5, 25)):
            at = rng.randint(0, 30)
            cpu = rng.randint(1, cap)
            req = request(
                f"req{i:06d}", at,
                volume=rng.randint(1, 60), cpu=cpu,
                deadline=at + rng.randint(1, 50), budget=10_000,
            )
            decision = alloc.examine(req, at=at)
            if isinstance(decision, Accept):
                plans[decision.plan.machine_id].append((decision.plan, cpu))
                assert decision.plan.completion <= req.qos.deadline
                assert decision.plan.vm_start >= at
        for machine_id, accepted in plans.items():
            assert _replay_schedulable(accepted, cap), (case, machine_id)


# -- metering and invoicing -----------------------------------------------------------


def _tracked(alloc, volume=40, cpu=4, price_budget=10_000):
    req = request("req000001", 0, volume=volume, cpu=cpu, deadline=100,
                  budget=price_budget)
    decision = alloc.examine(req, at=0)
    assert isinstance(decision, Accept)
    return req, decision.plan


def test_single_meter_record_covers_the_volume():
    alloc = make_allocator([("m1", 4, 16)])
    req, plan = _tracked(alloc)
    total = alloc.meter("req000001", plan.exec_start, plan.completion, 4)
    assert total == req.workload_volume


def test_duplicate_meter_interval_is_refused():
    alloc = make_allocator([("m1", 4, 16)])
    _, plan = _tracked(alloc)
    alloc.meter("req000001", 0, 5, 4)
    with pytest.raises(OverlappingInterval):
        alloc.meter("req000001", 4, 6, 4)


def test_split_metering_accumulates_identically():
    # oracle: one covering record vs k contiguous pieces
    one = make_allocator([("m1", 4, 16)])
    _tracked(one)
    single = one.meter("req000001", 0, 10, 4)

    pieces = make_allocator([("m1", 4, 16)])
    _tracked(pieces)
    split_points = [0, 3, 4, 7, 10]
    total = 0
    for lo, hi in zip(split_points, split_points[1:]):
        total = pieces.meter("req000001", lo, hi, 4)
    assert total == single == 40


def test_completed_invoice_charges_the_quote():
    alloc = make_allocator([("m1", 4, 16)], rate=125)
    _, plan = _tracked(alloc)
    assert plan.price == 5_000
    alloc.meter("req000001", plan.exec_start, plan.completion, 4)
    alloc.mark_completed("req000001", plan.completion)
    invoice = alloc.finalize_charge("req000001", at=plan.completion)
    assert invoice.amount == 5_000
    assert invoice.complete


def test_failed_run_pays_pro_rata():
    alloc = make_allocator([("m1", 4, 16)], rate=125)
    _, plan = _tracked(alloc)
    # half the work done before the failure
    alloc.meter("req000001", 0, 5, 4)
    alloc.mark_failed("req000001", 5)
    invoice = alloc.finalize_charge("req000001", at=5)
    assert invoice.amount == 2_500
    assert not invoice.complete


def test_invoice_matches_independent_recomputation():
    # oracle: amount recomputed from the raw line items
    rng = random.Random(5)
    for _ in range(50):
        volume = rng.randint(10, 80)
        cpu = rng.randint(1, 4)
        rate = rng.randint(1, 200)
        alloc = make_allocator([("m1", 4, 64)], rate=rate)
        req = request("req000001", 0, volume=volume, cpu=cpu,
                      deadline=1_000, budget=10**9)
        plan = alloc.examine(req, at=0).plan
        ticks = req.runtime
        cut = rng.randint(0, ticks)
        for t in range(cut):
            alloc.meter("req000001", t, t + 1, cpu)
        finished = cut == ticks
        if finished:
            alloc.mark_completed("req000001", ticks)
        else:
            alloc.mark_failed("req000001", cut)
        invoice = alloc.finalize_charge("req000001", at=ticks)

        usage = sum(cu for _, _, cu in invoice.line_items)
        assert usage == cut * cpu
        if finished:
            expected = plan.price
        else:
            frac = Fraction(min(usage, volume), volume)
            num = plan.price * frac
            expected = (2 * num.numerator + num.denominator) // (2 * num.denominator)
        assert invoice.amount == expected


def test_finalize_requires_a_terminal_state():
    alloc = make_allocator([("m1", 4, 16)])
    _tracked(alloc)
    with pytest.raises(RequestNotFinished):
        alloc.finalize_charge("req000001", at=1)


def test_finalize_happens_once():
    alloc = make_allocator([("m1", 4, 16)])
    _, plan = _tracked(alloc)
    alloc.mark_completed("req000001", plan.completion)
    alloc.finalize_charge("req000001", at=plan.completion)
    with pytest.raises(AlreadyFinalized):
        alloc.finalize_charge("req000001", at=plan.completion)


# -- progress and stats ----------------------------------------------------------------


def test_progress_before_dispatch_is_queued():
    alloc = make_allocator([("m1", 4, 16)])
    _tracked(alloc)
    report = alloc.progress("req000001", at=0)
    assert report.state == "Queued"
    assert report.fraction_done == 0


def test_progress_halfway_through_execution():
    alloc = make_allocator([("m1", 4, 16)])
    _, plan = _tracked(alloc, volume=80)  # 20 ticks at 4 cu
    alloc.mark_dispatched("req000001", plan.exec_start)
    report = alloc.progress("req000001", at=plan.exec_start + 10)
    assert report.state == "Executing"
    assert report.fraction_done == Fraction(1, 2)


def test_progress_after_completion():
    alloc = make_allocator([("m1", 4, 16)])
    _, plan = _tracked(alloc)
    alloc.mark_dispatched("req000001", plan.exec_start)
    alloc.mark_completed("req000001", plan.completion)
    report = alloc.progress("req000001", at=plan.completion)
    assert report.state == "Completed"
    assert report.fraction_done == 1


def test_empty_stats_window_reports_nothing():
    alloc = make_allocator([("m1", 4, 16)])
    stats = alloc.historical_stats(0, 0)
    assert "acceptance_rate" not in stats
    assert "mean_lateness" not in stats


def test_acceptance_rate_counts_examinations():
    alloc = make_allocator([("m1", 4, 16)])
    ok = request("req000001", 0, volume=4, cpu=4, deadline=50, budget=10_000)
    bad = request("req000002", 0, volume=400, cpu=4, deadline=5, budget=10_000)
    alloc.examine(ok, at=0)
    alloc.examine(bad, at=0)
    stats = alloc.historical_stats(0, 10)
    assert stats["acceptance_rate"] == Fraction(1, 2)
