"""Market infrastructure: directory, double auction, bank ledger, reservations.

Money only moves through the double-entry ledger, whose balances sum to
zero at every instant (the designated world account absorbs funding).
The call auction clears each window group at one uniform price, so every
matched bid pays no more than its limit and every matched ask receives
no less than its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

from .datacenter import Block, Datacenter
from .money import Money, round_half_up
from .negotiation import Sla

BID = "bid"
ASK = "ask"

ROLE_PROVIDER = "provider"
ROLE_CONSUMER = "consumer"
ROLE_BROKER = "broker"


class InvalidListing(Exception):
    pass


class UnknownAccount(Exception):
    pass


class InsufficientFunds(Exception):
    pass


class InvalidOrder(Exception):
    pass


class UnknownOrder(Exception):
    pass


class InvalidPolicy(Exception):
    pass


class ReservationConflict(Exception):
    """The requested window would exceed committed capacity."""


class AlreadySettled(Exception):
    pass


class ConservationError(Exception):
    """Ledger balances stopped summing to zero; a simulator bug."""


# -- directory ---------------------------------------------------------------

@dataclass
class Listing:
    participant_id: str
    role: str
    capacity: int  # offered capacity (providers) or demand profile proxy
    price_hint: Money  # advisory price per cpu-tick
    reliability_class: int = 0
    security_class: int = 0
    valid_until: int | None = None  # listing expires after this tick


class MarketDirectory:
    """Registry participants consult to find each other.

    One live listing per participant; re-registering replaces it.
    Queries never return expired listings and sort by participant_id.
    """

    def __init__(self) -> None:
        self.listings: dict[str, Listing] = {}
        self._seq = 0

    def register(self, listing: Listing) -> str:
        if listing.role not in (ROLE_PROVIDER, ROLE_CONSUMER, ROLE_BROKER):
            raise InvalidListing(f"unknown role {listing.role!r}")
        if listing.capacity < 0 or listing.price_hint < 0:
            raise InvalidListing("capacity and price_hint must be >= 0")
        self._seq += 1
        self.listings[listing.participant_id] = listing
        return f"lst{self._seq:06d}"

    def update_price_hint(self, participant_id: str, price_hint: Money) -> None:
        if participant_id not in self.listings:
            raise InvalidListing(f"no listing for {participant_id}")
        self.listings[participant_id].price_hint = price_hint

    def deregister(self, participant_id: str) -> None:
        if participant_id not in self.listings:
            raise InvalidListing(f"no listing for {participant_id}")
        del self.listings[participant_id]

    def query(
        self,
        at: int,
        role: str | None = None,
        min_reliability: int | None = None,
        min_security: int | None = None,
        max_price_hint: Money | None = None,
    ) -> list[Listing]:
        hits = []
        for participant_id in sorted(self.listings):
            l = self.listings[participant_id]
            if l.valid_until is not None and at > l.valid_until:
                continue
            if role is not None and l.role != role:
                continue
            if min_reliability is not None and l.reliability_class < min_reliability:
                continue
            if min_security is not None and l.security_class < min_security:
                continue
            if max_price_hint is not None and l.price_hint > max_price_hint:
                continue
            hits.append(l)
        return hits


# -- bank ledger --------------------------------------------------------------

WORLD = "world"


@dataclass(frozen=True)
class JournalEntry:
    seq: int
    at: int
    debit: str
    credit: str
    amount: Money
    memo: str


class Ledger:
    """Double-entry book.  Only the world account may run negative."""

    def __init__(self) -> None:
        self.balances: dict[str, Money] = {WORLD: 0}
        self.journal: list[JournalEntry] = []

    def open_account(self, account_id: str) -> None:
        if account_id != WORLD:
            self.balances.setdefault(account_id, 0)

    def balance(self, account_id: str) -> Money:
        if account_id not in self.balances:
            raise UnknownAccount(account_id)
        return self.balances[account_id]

    def transfer(self, debit: str, credit: str, amount: Money, at: int, memo: str = "") -> JournalEntry:
        if debit not in self.balances:
            raise UnknownAccount(debit)
        if credit not in self.balances:
            raise UnknownAccount(credit)
        if amount <= 0:
            raise ValueError(f"transfer amount must be positive, got {amount}")
        if debit != WORLD and self.balances[debit] < amount:
            raise InsufficientFunds(
                f"{debit} holds {self.balances[debit]}, needs {amount}"
            )
        self.balances[debit] -= amount
        self.balances[credit] += amount
        entry = JournalEntry(len(self.journal), at, debit, credit, amount, memo)
        self.journal.append(entry)
        self.assert_conservation()
        return entry

    def fund(self, account_id: str, amount: Money, at: int, memo: str = "initial funding") -> JournalEntry | None:
        self.open_account(account_id)
        if amount == 0:
            return None
        return self.transfer(WORLD, account_id, amount, at, memo)

    def assert_conservation(self) -> None:
        total = sum(self.balances.values())
        if total != 0:
            raise ConservationError(f"balances sum to {total}, not 0")

    def replay(self) -> dict[str, Money]:
        """Recompute balances from the journal alone (audit oracle)."""
        balances: dict[str, Money] = {account: 0 for account in self.balances}
        for entry in self.journal:
            balances[entry.debit] -= entry.amount
            balances[entry.credit] += entry.amount
        return balances


# -- call auction ---------------------------------------------------------------

@dataclass
class Order:
    order_id: int
    side: str
    actor: str
    quantity: int  # cpu-ticks
    unit_price: Money  # limit price per cpu-tick
    window_start: int
    window_end: int
    expiry: int  # order leaves the book after this tick
    request_id: str | None = None
    filled: int = 0
    cancelled: bool = False

    @property
    def remaining(self) -> int:
        return self.quantity - self.filled


@dataclass(frozen=True)
class Trade:
    trade_id: int
    window_start: int
    window_end: int
    buyer: str
    seller: str
    bid_order: int
    ask_order: int
    quantity: int
    unit_price: Money
    request_id: str | None


@dataclass
class ClearingResult:
    at: int
    trades: list[Trade]
    clearing_prices: dict[tuple[int, int], Money]
    bid_quantity: int
    ask_quantity: int
    unmatched_order_ids: list[int]

    @property
    def demand_index(self) -> Fraction:
        if self.ask_quantity == 0:
            return Fraction(0) if self.bid_quantity == 0 else Fraction(self.bid_quantity, 1)
        return Fraction(self.bid_quantity, self.ask_quantity)


class OrderBook:
    """Collects limit orders; a clearing matches them per delivery window.

    Unfilled remainders rest in the book until their expiry passes or
    they are cancelled.
    """

    def __init__(self) -> None:
        self.orders: dict[int, Order] = {}
        self._order_seq = 0
        self._trade_seq = 0

    def submit(
        self,
        side: str,
        actor: str,
        quantity: int,
        unit_price: Money,
        window_start: int,
        window_end: int,
        at: int,
        expiry: int | None = None,
        request_id: str | None = None,
    ) -> int:
        if side not in (BID, ASK):
            raise InvalidOrder(f"side must be bid or ask, got {side!r}")
        if quantity <= 0:
            raise InvalidOrder(f"quantity must be positive, got {quantity}")
        if unit_price < 0:
            raise InvalidOrder(f"unit price must be >= 0, got {unit_price}")
        if window_end <= window_start:
            raise InvalidOrder(f"empty window [{window_start}, {window_end})")
        if window_start <= at:
            raise InvalidOrder(f"window [{window_start}, ...) must lie in the future of {at}")
        if expiry is None:
            expiry = window_start
        if expiry <= at:
            raise InvalidOrder(f"order expired on arrival (expiry {expiry} at {at})")
        self._order_seq += 1
        order = Order(
            self._order_seq, side, actor, quantity, unit_price,
            window_start, window_end, expiry, request_id,
        )
        self.orders[order.order_id] = order
        return order.order_id

    def cancel(self, order_id: int) -> None:
        order = self.orders.get(order_id)
        if order is None:
            raise UnknownOrder(order_id)
        order.cancelled = True

    def open_orders(self, at: int) -> list[Order]:
        return [
            o for o in self.orders.values()
            if not o.cancelled and o.remaining > 0 and o.expiry > at
        ]

    def clear(self, at: int, ledger: Ledger | None = None) -> ClearingResult:
        """Uniform-price call double auction over each delivery window.

        Bids sort by price descending, asks ascending (ties by arrival);
        units match greedily up to the breakeven index and everything
        trades at the midpoint of the marginal matched bid and ask,
        rounded down.  Payments move buyer to seller through the ledger
        at the clearing price.
        """
        live = [
            o for o in self.orders.values()
            if not o.cancelled and o.remaining > 0 and o.expiry >= at
        ]
        trades: list[Trade] = []
        prices: dict[tuple[int, int], Money] = {}
        bid_quantity = sum(o.remaining for o in live if o.side == BID)
        ask_quantity = sum(o.remaining for o in live if o.side == ASK)
        windows = sorted({(o.window_start, o.window_end) for o in live})
        for window in windows:
            group = [o for o in live if (o.window_start, o.window_end) == window]
            bids = sorted((o for o in group if o.side == BID),
                          key=lambda o: (-o.unit_price, o.order_id))
            asks = sorted((o for o in group if o.side == ASK),
                          key=lambda o: (o.unit_price, o.order_id))
            matched: list[tuple[Order, Order, int]] = []
            i = j = 0
            while i < len(bids) and j < len(asks):
                bid, ask = bids[i], asks[j]
                if bid.unit_price < ask.unit_price:
                    break
                qty = min(bid.remaining, ask.remaining)
                if qty > 0:
                    matched.append((bid, ask, qty))
                    bid.filled += qty
                    ask.filled += qty
                if bid.remaining == 0:
                    i += 1
                if ask.remaining == 0:
                    j += 1
            if not matched:
                continue
            marginal_bid = matched[-1][0].unit_price
            marginal_ask = matched[-1][1].unit_price
            clearing_price = (marginal_bid + marginal_ask) // 2
            prices[window] = clearing_price
            for bid, ask, qty in matched:
                self._trade_seq += 1
                trade = Trade(
                    self._trade_seq, window[0], window[1],
                    buyer=bid.actor, seller=ask.actor,
                    bid_order=bid.order_id, ask_order=ask.order_id,
                    quantity=qty, unit_price=clearing_price,
                    request_id=bid.request_id,
                )
                trades.append(trade)
                if ledger is not None and qty * clearing_price > 0:
                    ledger.transfer(
                        bid.actor, ask.actor, qty * clearing_price, at,
                        memo=f"trade {trade.trade_id}",
                    )
        unmatched = sorted(
            o.order_id for o in live if o.remaining > 0
        )
        # expired and fully-filled orders no longer occupy the book
        self.orders = {
            oid: o for oid, o in self.orders.items()
            if not o.cancelled and o.remaining > 0 and o.expiry > at
        }
        return ClearingResult(at, trades, prices, bid_quantity, ask_quantity, unmatched)


# -- provider-side market policy ---------------------------------------------------

@dataclass(frozen=True)
class FixedPrice:
    base_rate: Money
    cost_floor: Money = 0
    kind: str = "fixed"


@dataclass(frozen=True)
class VariablePrice:
    """base × (1 + a·utilization + b·excess demand), never below cost."""

    base_rate: Money
    utilization_coefficient: Fraction
    demand_coefficient: Fraction
    cost_floor: Money = 0
    kind: str = "variable"


ProviderPricePolicy = FixedPrice | VariablePrice


def provider_set_price(
    policy: ProviderPricePolicy,
    utilization: Fraction,
    demand_index: Fraction,
) -> Money:
    """Posted price per cpu-tick under current market conditions.

    The demand term only kicks in when bids outnumber asks (index above
    one); slack markets fall back toward the base rate, never below the
    cost floor.
    """
    if not 0 <= utilization <= 1:
        raise InvalidPolicy(f"utilization {utilization} outside [0, 1]")
    if demand_index < 0:
        raise InvalidPolicy(f"demand_index {demand_index} must be >= 0")
    if isinstance(policy, FixedPrice):
        return max(policy.cost_floor, policy.base_rate)
    if isinstance(policy, VariablePrice):
        excess = max(Fraction(0), demand_index - 1)
        exact = policy.base_rate * (
            1
            + policy.utilization_coefficient * utilization
            + policy.demand_coefficient * excess
        )
        return max(policy.cost_floor, round_half_up(exact))
    raise InvalidPolicy(f"unknown provider price policy {policy!r}")


def provider_select_venues(
    estimates: list[tuple[str, Money]],
    max_venues: int | None = None,
) -> list[str]:
    """Venues worth attending: positive estimated utility, best first.

    `max_venues` caps participation by the provider's uncommitted
    capacity (one slot per venue).  Ties break by venue id.
    """
    profitable = [(utility, venue) for venue, utility in estimates if utility > 0]
    profitable.sort(key=lambda pair: (-pair[0], pair[1]))
    chosen = [venue for _, venue in profitable]
    if max_venues is not None:
        chosen = chosen[:max(0, max_venues)]
    return chosen


# -- broker policy -----------------------------------------------------------------

@dataclass(frozen=True)
class BrokerRequestView:
    request_id: str
    willingness: Money  # what the consumer side will bear, total
    quantity: int  # cpu-ticks to procure
    expected_penalty: Money = 0
    margin: Money = 0


@dataclass(frozen=True)
class MarketView:
    listings: list[Listing]
    last_clearing_price: Money | None
    procurable_quantity: int
    available_funds: Money
    window: tuple[int, int]


@dataclass(frozen=True)
class BrokerAction:
    kind: str  # "bid" or "negotiate"
    request_id: str
    quantity: int
    limit_unit_price: Money
    window: tuple[int, int]
    provider_id: str | None = None


_ENUMERATION_LIMIT = 12


def _select_requests(
    candidates: list[tuple[Money, BrokerRequestView]],
    capacity: int,
) -> list[BrokerRequestView]:
    """Utility-maximal subset under the capacity cap.

    Exact by enumeration on small inputs; greedy by utility (then id)
    beyond that, which stays deterministic if not provably optimal.
    """
    if len(candidates) <= _ENUMERATION_LIMIT:
        best_utility = 0
        best: tuple[str, ...] | None = None
        best_views: list[BrokerRequestView] = []
        for size in range(len(candidates), 0, -1):
            for combo in combinations(candidates, size):
                if sum(v.quantity for _, v in combo) > capacity:
                    continue
                utility = sum(u for u, _ in combo)
                key = tuple(v.request_id for _, v in combo)
                if utility > best_utility or (utility == best_utility and best is not None and key < best):
                    best_utility = utility
                    best = key
                    best_views = [v for _, v in combo]
        return best_views
    chosen: list[BrokerRequestView] = []
    used = 0
    for utility, view in sorted(candidates, key=lambda c: (-c[0], c[1].request_id)):
        if used + view.quantity <= capacity:
            chosen.append(view)
            used += view.quantity
    return chosen


def broker_decide(
    requests: list[BrokerRequestView],
    market: MarketView,
) -> list[BrokerAction]:
    """Pick the consumer subset worth serving and how to procure for it.

    Estimated utility per request is willingness minus estimated
    procurement cost (last clearing price, falling back to the cheapest
    directory hint) minus expected penalty.  The chosen subset maximizes
    summed utility within procurable capacity; each pick becomes an
    auction bid when some posted hint is inside its price ceiling, and a
    negotiation opening with the cheapest provider otherwise.
    """
    providers = [l for l in market.listings if l.role == ROLE_PROVIDER]
    if not providers or not requests:
        return []
    cheapest = min(providers, key=lambda l: (l.price_hint, l.participant_id))
    unit_estimate = (
        market.last_clearing_price
        if market.last_clearing_price is not None
        else cheapest.price_hint
    )
    candidates: list[tuple[Money, BrokerRequestView]] = []
    for view in requests:
        utility = view.willingness - unit_estimate * view.quantity - view.expected_penalty
        if utility > 0 and view.quantity > 0:
            candidates.append((utility, view))
    chosen = _select_requests(candidates, market.procurable_quantity)
    chosen.sort(key=lambda v: v.request_id)

    actions: list[BrokerAction] = []
    funds_left = market.available_funds
    for view in chosen:
        ceiling = view.willingness - view.expected_penalty - view.margin
        spendable = min(ceiling, funds_left)
        limit = spendable // view.quantity
        if limit <= 0:
            continue
        if any(l.price_hint <= limit for l in providers):
            actions.append(BrokerAction(
                "bid", view.request_id, view.quantity, limit, market.window,
            ))
            funds_left -= limit * view.quantity
        else:
            actions.append(BrokerAction(
                "negotiate", view.request_id, view.quantity, limit, market.window,
                provider_id=cheapest.participant_id,
            ))
    return actions


# -- advance reservations ------------------------------------------------------------

@dataclass(frozen=True)
class Reservation:
    reservation_id: str
    provider_id: str
    holder_id: str
    machine_id: str
    start: int
    end: int
    cpu: int
    mem: int
    backing_sla: str


class ReservationBook:
    """Advance capacity holds, pinned to a specific machine's calendar.

    Granted reservations are never revoked; per-tick reserved capacity
    can never exceed the provider's, because every hold occupies a
    machine calendar that enforces it.
    """

    def __init__(self) -> None:
        self.reservations: dict[str, Reservation] = {}
        self._seq = 0

    def find_slot(
        self,
        datacenter: Datacenter,
        earliest: int,
        latest_start: int,
        duration: int,
        cpu: int,
        mem: int,
    ) -> tuple[str, int] | None:
        """Earliest (machine, start) able to host the block, ties by machine id."""
        best: tuple[int, str] | None = None
        for machine_id in sorted(datacenter.machines):
            cal = datacenter.calendars[machine_id]
            start = cal.earliest_fit(earliest, latest_start, duration, cpu, mem)
            if start is not None and (best is None or start < best[0]):
                best = (start, machine_id)
        if best is None:
            return None
        return best[1], best[0]

    def reserve(
        self,
        datacenter: Datacenter,
        holder_id: str,
        start: int,
        end: int,
        cpu: int,
        mem: int,
        backing_sla: str,
        machine_id: str | None = None,
    ) -> Reservation:
        if not backing_sla:
            raise ReservationConflict("a reservation must name its backing SLA")
        if machine_id is None:
            slot = self.find_slot(datacenter, start, start, end - start, cpu, mem)
            if slot is None:
                raise ReservationConflict(
                    f"{datacenter.provider_id}: no machine free for "
                    f"[{start}, {end}) x {cpu} cu"
                )
            machine_id = slot[0]
        cal = datacenter.calendars[machine_id]
        if not cal.fits(start, end - start, cpu, mem):
            raise ReservationConflict(f"{machine_id} cannot hold [{start}, {end})")
        self._seq += 1
        reservation = Reservation(
            f"rsv{self._seq:06d}", datacenter.provider_id, holder_id, machine_id,
            start, end, cpu, mem, backing_sla,
        )
        cal.add(Block(start, end, cpu, mem, owner=reservation.reservation_id))
        self.reservations[reservation.reservation_id] = reservation
        return reservation


# -- SLA settlement ------------------------------------------------------------------

@dataclass(frozen=True)
class Settlement:
    sla_id: str
    base_amount: Money
    penalty: Money
    net_paid: Money
    at: int


def settle_sla(
    ledger: Ledger,
    sla: Sla,
    actual_completion: int,
    at: int,
    amount_override: Money | None = None,
) -> Settlement:
    """Move money for a finished (or abandoned) SLA, once.

    The buyer pays the full price; lateness then refunds the penalty
    schedule back, capped so the seller never pays out more than it was
    paid.  Pre-paid SLAs (auction trades) only settle the penalty leg.
    Both movements are separate journal entries tagged with the sla_id.
    """
    if sla.settled:
        raise AlreadySettled(sla.sla_id)
    base = sla.price if amount_override is None else amount_override
    ticks_late = max(0, actual_completion - sla.promised_completion)
    penalty = min(sla.penalty.penalty_for(ticks_late), base)
    if not sla.paid and base > 0:
        ledger.transfer(sla.buyer, sla.seller, base, at, memo=f"sla {sla.sla_id} price")
    if penalty > 0:
        ledger.transfer(sla.seller, sla.buyer, penalty, at, memo=f"sla {sla.sla_id} penalty")
    sla.settled = True
    ledger.assert_conservation()
    net = (0 if sla.paid else base) - penalty
    return Settlement(sla.sla_id, base, penalty, net, at)
