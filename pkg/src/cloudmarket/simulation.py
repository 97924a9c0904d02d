"""End-to-end simulation drivers: the market run and the queue baseline.

Both drivers consume the same generated request trace and the same
provider fleets, so paired runs differ only in how work is admitted and
priced.  The market run trades through periodic call auctions with
bilateral negotiation as fallback; the baseline admits first-come
first-served at posted prices and pays lateness penalties when the
backlog pushes completions past deadlines.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .allocator import (
    Accept,
    ServiceRequest,
    SlaAllocator,
    pricing_from_config,
)
from .datacenter import Datacenter, fleet_specs
from .engine import SimEngine, TraceRecorder
from .exchange import (
    ASK,
    BID,
    BrokerAction,
    BrokerRequestView,
    Ledger,
    Listing,
    MarketDirectory,
    MarketView,
    OrderBook,
    ReservationBook,
    ROLE_BROKER,
    ROLE_CONSUMER,
    ROLE_PROVIDER,
    VariablePrice,
    broker_decide,
    provider_set_price,
    settle_sla,
)
from .metrics import MetricsCollector, RunSummary
from .money import Money, round_half_up
from .negotiation import (
    Agreement,
    BUYER,
    ConcessionSchedule,
    NegotiationTerms,
    PenaltySchedule,
    SELLER,
    Sla,
    negotiate_price,
)
from .workload import (
    ConsumerProxy,
    MODE_MARKET,
    MODE_SYSTEM_CENTRIC,
    Scenario,
    dump_scenario,
    generate_requests,
)

UNSERVED_DEADLINE_EXPIRED = "DeadlineExpired"
UNSERVED_NEGOTIATION_FAILED = "NegotiationFailed"
UNSERVED_HORIZON = "HorizonExhausted"


def scenario_digest(scenario: Scenario) -> str:
    return hashlib.sha256(dump_scenario(scenario).encode("utf-8")).hexdigest()


def request_trace_digest(requests: list[ServiceRequest]) -> str:
    rows = []
    for r in requests:
        rows.append("\t".join(str(x) for x in (
            r.request_id, r.consumer_id, r.submit_time, r.workload_volume,
            r.qos.cpu_need, r.qos.mem_need, r.qos.deadline, r.qos.budget,
        )))
    return hashlib.sha256("\n".join(rows).encode("utf-8")).hexdigest()


@dataclass
class _Provider:
    spec: object
    datacenter: Datacenter
    allocator: SlaAllocator
    price_policy: VariablePrice
    posted_price: Money


@dataclass
class _Commitment:
    request: ServiceRequest
    provider_id: str
    broker_id: str | None
    sla_consumer: Sla
    sla_procure: Sla | None
    machine_id: str
    vm_start: int
    vm_id: str | None = None
    exec_start: int | None = None


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    mode: str
    summary: RunSummary
    collector: MetricsCollector
    ledger: Ledger
    trace: TraceRecorder
    requests: list[ServiceRequest]
    request_digest: str


class _Run:
    """Shared state and handlers for one simulation run."""

    def __init__(self, scenario: Scenario, seed: int, mode: str):
        self.scenario = scenario
        self.seed = seed
        self.mode = mode
        self.engine = SimEngine(master_seed=seed)
        self.trace = TraceRecorder()
        self.collector = MetricsCollector()
        self.engine.add_observer(self.trace)
        self.engine.add_observer(self.collector.observer)
        self.ledger = Ledger()
        self.funded: dict[str, Money] = {}

        self.providers: dict[str, _Provider] = {}
        for p in scenario.providers:
            dc = Datacenter(
                self.engine, p.provider_id,
                fleet_specs(p.provider_id, [
                    {"count": g.count, "cpu_capacity": g.cpu_capacity,
                     "mem_capacity": g.mem_capacity}
                    for g in p.fleet
                ]),
                boot_delay=p.boot_delay,
            )
            allocator = SlaAllocator(
                self.engine, dc, pricing_from_config(p.pricing),
                reliability_class=p.reliability_class,
                security_class=p.security_class,
            )
            policy = VariablePrice(
                base_rate=p.market.base_rate,
                utilization_coefficient=p.market.utilization_coefficient,
                demand_coefficient=p.market.demand_coefficient,
                cost_floor=p.market.cost_floor,
            )
            posted = provider_set_price(policy, Fraction(0), Fraction(1))
            self.providers[p.provider_id] = _Provider(p, dc, allocator, policy, posted)
            self.ledger.open_account(p.provider_id)
            self.funded[p.provider_id] = 0

        self.proxies = {
            c.consumer_id: ConsumerProxy(c.consumer_id) for c in scenario.consumers
        }
        self.consumer_specs = {c.consumer_id: c for c in scenario.consumers}
        for c in scenario.consumers:
            self._fund(c.consumer_id, c.initial_funds, 0, "initial funding")
        for b in scenario.brokers:
            self._fund(b.broker_id, b.initial_funds, 0, "initial funding")
        self.broker_specs = {b.broker_id: b for b in scenario.brokers}
        self.broker_committed: dict[str, Money] = {
            b.broker_id: 0 for b in scenario.brokers
        }

        self.penalty = PenaltySchedule(scenario.penalty.rate, scenario.penalty.cap)
        self.requests_by_id: dict[str, ServiceRequest] = {}
        self.pending: dict[str, str] = {}  # request_id -> assigned broker
        self.committed: dict[str, _Commitment] = {}
        self.delivered_cu: dict[str, int] = {p: 0 for p in self.providers}
        self._sla_counter = 0

        self.directory = MarketDirectory()
        self.book = OrderBook()
        self.reservations = ReservationBook()
        self.demand_index = Fraction(1)
        self.last_clearing_price: Money | None = None
        for provider_id, prov in self.providers.items():
            self.directory.register(Listing(
                participant_id=provider_id,
                role=ROLE_PROVIDER,
                capacity=prov.datacenter.total_cpu_capacity,
                price_hint=prov.posted_price,
                reliability_class=prov.spec.reliability_class,
                security_class=prov.spec.security_class,
            ))
        for b in scenario.brokers:
            self.directory.register(Listing(
                participant_id=b.broker_id, role=ROLE_BROKER,
                capacity=0, price_hint=0,
            ))
        for c in scenario.consumers:
            self.directory.register(Listing(
                participant_id=c.consumer_id, role=ROLE_CONSUMER,
                capacity=0, price_hint=0,
            ))

    # -- money helpers -----------------------------------------------------------

    def _fund(self, account: str, amount: Money, at: int, memo: str) -> None:
        self.ledger.fund(account, amount, at, memo)
        self.funded[account] = self.funded.get(account, 0) + amount

    def _top_up_consumer(self, consumer_id: str, at: int) -> None:
        proxy = self.proxies[consumer_id]
        shortfall = proxy.committed - self.ledger.balance(consumer_id)
        if shortfall > 0:
            self._fund(consumer_id, shortfall, at, "budget top-up")

    def _next_sla_id(self, suffix: str) -> str:
        self._sla_counter += 1
        return f"sla{self._sla_counter:06d}-{suffix}"

    def _settle(self, sla: Sla, actual_completion: int, at: int, kind: str):
        settlement = settle_sla(self.ledger, sla, actual_completion, at)
        self.engine.emit("settlement", {
            "sla_id": sla.sla_id, "buyer": sla.buyer, "seller": sla.seller,
            "kind": kind, "base": settlement.base_amount,
            "penalty": settlement.penalty, "net": settlement.net_paid,
            "late": max(0, actual_completion - sla.promised_completion),
            "prepaid": sla.paid,
        })
        return settlement

    # -- request intake ---------------------------------------------------------

    def schedule_requests(self, requests: list[ServiceRequest]) -> None:
        for r in requests:
            self.requests_by_id[r.request_id] = r
            self.engine.schedule("request_submitted", {
                "request_id": r.request_id,
                "consumer": r.consumer_id,
                "volume": r.workload_volume,
                "cpu_need": r.qos.cpu_need,
                "mem_need": r.qos.mem_need,
                "deadline": r.qos.deadline,
                "budget": r.qos.budget,
            }, fire_at=r.submit_time)

    def assign_broker(self, request: ServiceRequest) -> str:
        """Cheapest-margin brokers first, spread round-robin among the top k."""
        spec = self.consumer_specs[request.consumer_id]
        hints = [
            (b.broker_id, round_half_up(b.margin_rate * 10**6))
            for b in self.scenario.brokers
        ]
        proxy = self.proxies[request.consumer_id]
        chosen = proxy.select_brokers(hints, spec.top_k)
        index = int(request.request_id[3:])
        return chosen[index % len(chosen)]

    # -- completion path (shared by both modes) -----------------------------------

    def on_completion(self, event) -> None:
        p = event.payload
        request_id = p["request_id"]
        commit = self.committed.pop(request_id)
        now = self.engine.clock
        prov = self.providers[commit.provider_id]
        request = commit.request

        prov.allocator.meter(request_id, p["start"], now, request.qos.cpu_need)
        prov.allocator.mark_completed(request_id, now)
        invoice = prov.allocator.finalize_charge(request_id, now)
        self.delivered_cu[commit.provider_id] += invoice.usage

        consumer_settlement = self._settle(
            commit.sla_consumer, now, now, kind="consumer",
        )
        if commit.sla_procure is not None:
            self._settle(commit.sla_procure, now, now, kind="procurement")
            if not commit.sla_procure.paid and commit.broker_id is not None:
                self.broker_committed[commit.broker_id] -= commit.sla_procure.price

        prov.datacenter.finish_execution(p["vm_id"])
        prov.datacenter.release_vm(p["vm_id"], now)
        self.proxies[request.consumer_id].resolve(request_id)

        lateness = max(0, now - request.qos.deadline)
        self.engine.emit("request_served", {
            "request_id": request_id,
            "provider": commit.provider_id,
            "broker": commit.broker_id,
            "completed_at": now,
            "lateness": lateness,
            "consumer_paid": consumer_settlement.net_paid,
            "penalty_received": consumer_settlement.penalty,
        })

    def on_provision_due(self, event) -> None:
        p = event.payload
        commit = self.committed[p["request_id"]]
        now = self.engine.clock
        prov = self.providers[commit.provider_id]
        request = commit.request
        machine = prov.datacenter.machines[commit.machine_id]
        if (machine.free_cpu < request.qos.cpu_need
                or machine.free_mem < request.qos.mem_need):
            # a same-tick completion still holds the machine; its release
            # event is already queued, so one deferral lands after it
            retries = p.get("retries", 0)
            if retries < 16:
                self.engine.emit("provision_due", {**p, "retries": retries + 1})
                return
        vm_id = prov.datacenter.provision_vm(
            request.qos.cpu_need, request.qos.mem_need, now,
            machine_id=commit.machine_id,
        )
        commit.vm_id = vm_id
        prov.datacenter.dispatch(
            request.request_id, vm_id, now, request.workload_volume,
        )
        exec_start = max(now, prov.datacenter.vms[vm_id].ready_at)
        commit.exec_start = exec_start
        prov.allocator.mark_dispatched(request.request_id, exec_start)
        commit.sla_consumer.dispatched = True
        if commit.sla_procure is not None:
            commit.sla_procure.dispatched = True

    def mark_unserved(self, request_id: str, reason: str) -> None:
        request = self.requests_by_id[request_id]
        self.proxies[request.consumer_id].resolve(request_id)
        self.engine.emit("request_unserved", {
            "request_id": request_id, "reason": reason,
        })

    # -- wrap-up ------------------------------------------------------------------

    def finish(self) -> RunSummary:
        self.engine.run_until(self.scenario.horizon)
        self.engine.drain()
        for request_id in sorted(self.pending):
            self.mark_unserved(request_id, UNSERVED_HORIZON)
        self.pending.clear()
        self.engine.drain()

        utilization = {}
        for provider_id, prov in self.providers.items():
            denom = prov.datacenter.total_cpu_capacity * self.scenario.horizon
            utilization[provider_id] = (
                float(Fraction(self.delivered_cu[provider_id], denom)) if denom else 0.0
            )
        summary = self.collector.summary(
            scenario=self.scenario.name,
            scenario_digest=scenario_digest(self.scenario),
            mode=self.mode,
            seed=self.seed,
            horizon=self.scenario.horizon,
            events_fired=len(self.trace.events),
            trace_digest=self.trace.digest(),
            ledger=self.ledger,
            initial_funds=self.funded,
            provider_ids=sorted(self.providers),
            broker_ids=sorted(self.broker_specs),
            consumer_ids=sorted(self.proxies),
            utilization=utilization,
        )
        self.collector.cross_check(
            summary, self.ledger, self.funded, sorted(self.proxies),
        )
        return summary


# -- queue baseline ---------------------------------------------------------------

class _BaselineRun(_Run):
    """First-come first-served at posted prices; deadlines are not enforced
    at admission, so an overloaded system serves late and pays penalties."""

    def start(self) -> None:
        self.engine.on("request_submitted", self.on_request_submitted)
        self.engine.on("provision_due", self.on_provision_due)
        self.engine.on("completion", self.on_completion)

    def on_request_submitted(self, event) -> None:
        p = event.payload
        request = self.requests_by_id[p["request_id"]]
        now = self.engine.clock
        proxy = self.proxies[request.consumer_id]
        proxy.commit(request.request_id, request.qos.budget)
        self._top_up_consumer(request.consumer_id, now)

        first_reason: str | None = None
        for provider_id in sorted(self.providers):
            prov = self.providers[provider_id]
            for cal in prov.datacenter.calendars.values():
                cal.prune(now)
            decision = prov.allocator.examine(
                request, now,
                enforce_deadline=False,
                horizon=self.scenario.horizon * 4,
            )
            if isinstance(decision, Accept):
                plan = decision.plan
                sla = Sla(
                    sla_id=self._next_sla_id("fifo"),
                    buyer=request.consumer_id,
                    seller=provider_id,
                    request_id=request.request_id,
                    price=plan.price,
                    promised_completion=request.qos.deadline,
                    penalty=self.penalty,
                    capacity=request.qos.cpu_need,
                    window=(plan.vm_start, plan.completion),
                )
                self.committed[request.request_id] = _Commitment(
                    request, provider_id, None, sla, None,
                    plan.machine_id, plan.vm_start,
                )
                self.engine.schedule("provision_due", {
                    "request_id": request.request_id, "provider": provider_id,
                }, fire_at=plan.vm_start)
                return
            if first_reason is None:
                first_reason = decision.reason
        self.mark_unserved(request.request_id, first_reason or "CapacityUnavailable")


# -- market run --------------------------------------------------------------------

class _MarketRun(_Run):
    """Periodic call auctions with negotiation fallback and reservations."""

    def start(self) -> None:
        self.engine.on("request_submitted", self.on_request_submitted)
        self.engine.on("market_cycle", self.on_market_cycle)
        self.engine.on("provision_due", self.on_provision_due)
        self.engine.on("completion", self.on_completion)
        period = self.scenario.auction_period
        for t in range(period, self.scenario.horizon + 1, period):
            self.engine.schedule("market_cycle", {"cycle_at": t}, fire_at=t)

    def on_request_submitted(self, event) -> None:
        p = event.payload
        request = self.requests_by_id[p["request_id"]]
        now = self.engine.clock
        proxy = self.proxies[request.consumer_id]
        proxy.commit(request.request_id, request.qos.budget)
        self._top_up_consumer(request.consumer_id, now)
        self.pending[request.request_id] = self.assign_broker(request)

    # -- one trading cycle ---------------------------------------------------

    def _needed_quantity(self, request: ServiceRequest, boot: int) -> int:
        return request.qos.cpu_need * (boot + request.runtime)

    def on_market_cycle(self, event) -> None:
        now = self.engine.clock
        window = (now + 1, now + 1 + self.scenario.auction_period)
        for prov in self.providers.values():
            for cal in prov.datacenter.calendars.values():
                cal.prune(now)

        self._expire_hopeless(now)
        self._post_provider_prices(now)
        ask_capacity = self._submit_asks(now, window)
        actions = self._submit_bids(now, window, ask_capacity)
        result = self.book.clear(now, self.ledger)
        if result.trades:
            self.last_clearing_price = result.trades[-1].unit_price
        if result.ask_quantity > 0 or result.bid_quantity > 0:
            self.demand_index = result.demand_index
        for trade in result.trades:
            self.engine.emit("trade", {
                "trade_id": trade.trade_id, "buyer": trade.buyer,
                "seller": trade.seller, "quantity": trade.quantity,
                "unit_price": trade.unit_price, "request_id": trade.request_id,
                "window_start": trade.window_start, "window_end": trade.window_end,
            })
        self._place_fills(now, result)
        self._negotiate_leftovers(now, actions)

    def _expire_hopeless(self, now: int) -> None:
        min_boot = min(p.spec.boot_delay for p in self.providers.values())
        for request_id in sorted(self.pending):
            request = self.requests_by_id[request_id]
            if now + 1 + min_boot + request.runtime > request.qos.deadline:
                self.mark_unserved(request_id, UNSERVED_DEADLINE_EXPIRED)
                del self.pending[request_id]

    def _post_provider_prices(self, now: int) -> None:
        for provider_id in sorted(self.providers):
            prov = self.providers[provider_id]
            prov.posted_price = provider_set_price(
                prov.price_policy,
                prov.datacenter.utilization_at(now),
                self.demand_index,
            )
            self.directory.update_price_hint(provider_id, prov.posted_price)
            self.engine.emit("posted_price", {
                "provider": provider_id, "price": prov.posted_price,
                "demand_index": str(self.demand_index),
            })

    def _submit_asks(self, now: int, window: tuple[int, int]) -> int:
        total = 0
        for provider_id in sorted(self.providers):
            prov = self.providers[provider_id]
            free = prov.datacenter.free_cu_ticks(window[0], window[1])
            if free <= 0:
                continue
            total += free
            self.book.submit(
                ASK, provider_id, free, prov.spec.market.cost_floor,
                window[0], window[1], now, expiry=now + 1,
            )
        return total

    def _submit_bids(
        self, now: int, window: tuple[int, int], ask_capacity: int,
    ) -> dict[str, BrokerAction]:
        max_boot = self.scenario.max_boot_delay()
        by_broker: dict[str, list[BrokerRequestView]] = {}
        for request_id in sorted(self.pending):
            request = self.requests_by_id[request_id]
            broker_id = self.pending[request_id]
            spec = self.broker_specs[broker_id]
            margin = round_half_up(spec.margin_rate * request.qos.budget)
            by_broker.setdefault(broker_id, []).append(BrokerRequestView(
                request_id=request_id,
                willingness=request.qos.budget,
                quantity=self._needed_quantity(request, max_boot),
                expected_penalty=0,
                margin=margin,
            ))
        listings = self.directory.query(now, role=ROLE_PROVIDER)
        chosen: dict[str, BrokerAction] = {}
        for broker_id in sorted(by_broker):
            view = MarketView(
                listings=listings,
                last_clearing_price=self.last_clearing_price,
                procurable_quantity=ask_capacity,
                available_funds=(
                    self.ledger.balance(broker_id)
                    - self.broker_committed[broker_id]
                ),
                window=window,
            )
            for action in broker_decide(by_broker[broker_id], view):
                chosen[action.request_id] = action
                if action.kind == "bid":
                    self.book.submit(
                        BID, broker_id, action.quantity, action.limit_unit_price,
                        window[0], window[1], now, expiry=now + 1,
                        request_id=action.request_id,
                    )
        return chosen

    def _place_fills(self, now: int, result) -> None:
        fills: dict[str, dict[str, list]] = {}
        for trade in result.trades:
            if trade.request_id is None:
                continue
            fills.setdefault(trade.request_id, {}).setdefault(
                trade.seller, []
            ).append(trade)

        for request_id in sorted(fills):
            if request_id not in self.pending:
                # stale fill for an already-resolved request; hand it back
                self._refund_fills(now, request_id, fills[request_id], None)
                continue
            request = self.requests_by_id[request_id]
            broker_id = self.pending[request_id]
            per_provider = {
                provider_id: sum(t.quantity for t in trades)
                for provider_id, trades in fills[request_id].items()
            }
            best_provider = min(
                per_provider, key=lambda pid: (-per_provider[pid], pid),
            )
            prov = self.providers[best_provider]
            boot = prov.spec.boot_delay
            needed = self._needed_quantity(request, boot)
            placed = False
            if per_provider[best_provider] >= needed:
                placed = self._commit_reservation(
                    now, request, broker_id, best_provider,
                    paid_amount=sum(
                        t.quantity * t.unit_price
                        for t in fills[request_id][best_provider]
                    ),
                    prepaid=True,
                )
            if placed:
                self._refund_fills(now, request_id, fills[request_id], keep=best_provider)
                del self.pending[request_id]
            else:
                self._refund_fills(now, request_id, fills[request_id], keep=None)

    def _refund_fills(
        self, now: int, request_id: str, by_provider: dict, keep: str | None,
    ) -> None:
        """Return payments for fills that did not become a reservation."""
        for provider_id in sorted(by_provider):
            if provider_id == keep:
                continue
            for trade in by_provider[provider_id]:
                amount = trade.quantity * trade.unit_price
                if amount > 0:
                    self.ledger.transfer(
                        provider_id, trade.buyer, amount, now,
                        memo=f"refund trade {trade.trade_id} ({request_id})",
                    )

    def _commit_reservation(
        self,
        now: int,
        request: ServiceRequest,
        broker_id: str,
        provider_id: str,
        paid_amount: Money,
        prepaid: bool,
    ) -> bool:
        """Reserve a machine slot and cut the two SLAs; False if no slot fits."""
        prov = self.providers[provider_id]
        boot = prov.spec.boot_delay
        duration = boot + request.runtime
        latest_start = request.qos.deadline - duration
        if latest_start < now + 1:
            return False
        slot = self.reservations.find_slot(
            prov.datacenter, now + 1, latest_start, duration,
            request.qos.cpu_need, request.qos.mem_need,
        )
        if slot is None:
            return False
        machine_id, start = slot
        end = start + duration
        procure_id = self._next_sla_id("bp")
        reservation = self.reservations.reserve(
            prov.datacenter, broker_id, start, end,
            request.qos.cpu_need, request.qos.mem_need,
            backing_sla=procure_id, machine_id=machine_id,
        )
        self.engine.emit("reservation", {
            "reservation_id": reservation.reservation_id,
            "provider": provider_id, "machine": machine_id,
            "start": start, "end": end,
            "cpu": request.qos.cpu_need, "mem": request.qos.mem_need,
            "request_id": request.request_id, "holder": broker_id,
        })
        sla_procure = Sla(
            sla_id=procure_id,
            buyer=broker_id,
            seller=provider_id,
            request_id=request.request_id,
            price=paid_amount,
            promised_completion=end,
            penalty=self.penalty,
            capacity=request.qos.cpu_need,
            window=(start, end),
            paid=prepaid,
            reservation_id=reservation.reservation_id,
        )
        if not prepaid:
            self.broker_committed[broker_id] += paid_amount
        spec = self.broker_specs[broker_id]
        margin = round_half_up(spec.margin_rate * request.qos.budget)
        consumer_price = min(request.qos.budget, paid_amount + margin)
        sla_consumer = Sla(
            sla_id=self._next_sla_id("cb"),
            buyer=request.consumer_id,
            seller=broker_id,
            request_id=request.request_id,
            price=consumer_price,
            promised_completion=request.qos.deadline,
            penalty=self.penalty,
            capacity=request.qos.cpu_need,
            window=(start, end),
        )
        decision = prov.allocator.examine(
            request, now,
            backing=(machine_id, start, end),
            agreed_price=consumer_price,
        )
        assert isinstance(decision, Accept)
        self.committed[request.request_id] = _Commitment(
            request, provider_id, broker_id, sla_consumer, sla_procure,
            machine_id, start,
        )
        self.engine.schedule("provision_due", {
            "request_id": request.request_id, "provider": provider_id,
        }, fire_at=start)
        return True

    def _negotiate_leftovers(self, now: int, actions: dict[str, BrokerAction]) -> None:
        for request_id in sorted(actions):
            if request_id not in self.pending:
                continue
            request = self.requests_by_id[request_id]
            broker_id = self.pending[request_id]
            spec = self.broker_specs[broker_id]
            margin = round_half_up(spec.margin_rate * request.qos.budget)
            ceiling = request.qos.budget - margin
            spendable = min(
                ceiling,
                self.ledger.balance(broker_id) - self.broker_committed[broker_id],
            )
            if spendable <= 0:
                continue
            provider_id = min(
                self.providers,
                key=lambda pid: (self.providers[pid].posted_price, pid),
            )
            prov = self.providers[provider_id]
            needed = self._needed_quantity(request, prov.spec.boot_delay)
            neg = self.scenario.negotiation
            buyer = NegotiationTerms(
                role=BUYER,
                opening=(spendable + 1) // 2,
                reservation=spendable,
                max_rounds=neg.max_rounds,
                schedule=ConcessionSchedule(**neg.buyer_schedule),
                party_id=broker_id,
            )
            seller = NegotiationTerms(
                role=SELLER,
                opening=max(prov.posted_price * needed,
                            prov.spec.market.cost_floor * needed),
                reservation=prov.spec.market.cost_floor * needed,
                max_rounds=neg.max_rounds,
                schedule=ConcessionSchedule(**neg.seller_schedule),
                party_id=provider_id,
            )
            outcome = negotiate_price(
                buyer, seller, engine=self.engine, session_id=request_id,
            )
            if isinstance(outcome, Agreement):
                placed = self._commit_reservation(
                    now, request, broker_id, provider_id,
                    paid_amount=outcome.price, prepaid=False,
                )
                if placed:
                    del self.pending[request_id]
                else:
                    self.mark_unserved(request_id, "CapacityUnavailable")
                    del self.pending[request_id]
            else:
                self.mark_unserved(request_id, UNSERVED_NEGOTIATION_FAILED)
                del self.pending[request_id]


# -- entry points -------------------------------------------------------------------

def run_scenario(
    scenario: Scenario,
    seed: int | None = None,
    mode: str | None = None,
) -> RunResult:
    """Simulate one scenario and return the full result bundle."""
    if seed is None:
        seed = scenario.master_seed if scenario.master_seed is not None else 0
    if mode is None:
        mode = scenario.mode
    requests = generate_requests(scenario, seed)
    if mode == MODE_SYSTEM_CENTRIC:
        run: _Run = _BaselineRun(scenario, seed, mode)
    elif mode == MODE_MARKET:
        run = _MarketRun(scenario, seed, mode)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    run.start()
    run.schedule_requests(requests)
    summary = run.finish()
    return RunResult(
        scenario=scenario,
        seed=seed,
        mode=mode,
        summary=summary,
        collector=run.collector,
        ledger=run.ledger,
        trace=run.trace,
        requests=requests,
        request_digest=request_trace_digest(requests),
    )


def compare_modes(scenario: Scenario, seed: int | None = None) -> tuple[RunResult, RunResult]:
    """Run market and baseline over the identical request trace."""
    market = run_scenario(replace(scenario, mode=MODE_MARKET), seed)
    baseline = run_scenario(replace(scenario, mode=MODE_SYSTEM_CENTRIC), seed)
    if market.request_digest != baseline.request_digest:
        raise RuntimeError("paired runs diverged on the generated request trace")
    return market, baseline
