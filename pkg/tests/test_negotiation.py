"""Alternating-offers bargaining and SLA terms."""

from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from cloudmarket.negotiation import (
    Agreement,
    AlreadyDispatched,
    BrokeOff,
    BUYER,
    ConcessionSchedule,
    InvalidTerms,
    NegotiationSession,
    NegotiationTerms,
    PenaltySchedule,
    SELLER,
    SessionTerminated,
    Sla,
    negotiate_price,
    open_session,
    renegotiate,
)


def buyer_terms(opening, reservation, rounds, schedule=None, **kwargs):
    return NegotiationTerms(
        BUYER, opening, reservation, rounds,
        schedule or ConcessionSchedule(), party_id="broker-a", **kwargs,
    )


def seller_terms(opening, reservation, rounds, schedule=None, **kwargs):
    return NegotiationTerms(
        SELLER, opening, reservation, rounds,
        schedule or ConcessionSchedule(), party_id="alpine", **kwargs,
    )


def test_fresh_session_has_no_rounds_played():
    session = open_session(
        buyer_terms(5_000, 9_000, 4), seller_terms(12_000, 8_000, 4)
    )
    assert not session.terminated
    assert session.transcript == []
    assert session.effective_rounds == 4


def test_buyer_opening_above_reservation_is_invalid():
    with pytest.raises(InvalidTerms):
        buyer_terms(10_000, 9_000, 4)


def test_seller_opening_below_reservation_is_invalid():
    with pytest.raises(InvalidTerms):
        seller_terms(7_000, 8_000, 4)


def test_mismatched_windows_are_invalid():
    with pytest.raises(InvalidTerms):
        open_session(
            buyer_terms(5_000, 9_000, 4, window=(10, 20)),
            seller_terms(12_000, 8_000, 4, window=(10, 30)),
        )


def test_zero_rounds_breaks_off_immediately():
    session = open_session(
        buyer_terms(5_000, 9_000, 0), seller_terms(12_000, 8_000, 3)
    )
    assert session.terminated
    assert isinstance(session.outcome, BrokeOff)
    assert session.outcome.reason == "RoundsExhausted"
    assert session.outcome.proposals_used == 0


def test_overlapping_zone_agrees_inside_it():
    outcome = negotiate_price(
        buyer_terms(6_000, 12_000, 4), seller_terms(14_000, 8_000, 4)
    )
    assert isinstance(outcome, Agreement)
    assert 8_000 <= outcome.price <= 12_000


def test_disjoint_zone_breaks_off_within_max_rounds():
    outcome = negotiate_price(
        buyer_terms(5_000, 9_000, 6), seller_terms(15_000, 12_000, 6)
    )
    assert isinstance(outcome, BrokeOff)
    assert outcome.reason == "NoZoneOfAgreement"
    assert outcome.proposals_used <= 6


def test_step_after_termination_is_an_error():
    session = open_session(
        buyer_terms(10_000, 10_000, 1), seller_terms(10_000, 10_000, 1)
    )
    session.run_to_completion()
    with pytest.raises(SessionTerminated):
        session.step()


def test_symmetric_terms_meet_at_the_midpoint():
    # mirrored openings and linear schedules converge on 10_000
    buyer = buyer_terms(8_000, 12_000, 5)
    seller = seller_terms(12_000, 8_000, 5)
    outcome = negotiate_price(buyer, seller, first_mover=BUYER)
    assert isinstance(outcome, Agreement)
    assert outcome.price == 10_000
    assert outcome.round_index == 3


def test_first_mover_does_not_move_the_symmetric_price():
    price_by_mover = {}
    for mover in (BUYER, SELLER):
        outcome = negotiate_price(
            buyer_terms(8_000, 12_000, 5),
            seller_terms(12_000, 8_000, 5),
            first_mover=mover,
        )
        price_by_mover[mover] = outcome.price
    assert price_by_mover[BUYER] == price_by_mover[SELLER] == 10_000


def test_offer_sequence_follows_the_concession_formula():
    # closed-form recomputation of each offer
    buyer = buyer_terms(6_000, 12_000, 4)
    seller = seller_terms(14_000, 8_000, 4)
    session = open_session(buyer, seller)
    session.run_to_completion()
    for offer in session.transcript:
        terms = buyer if offer.actor == BUYER else seller
        progress = Fraction(offer.round_index - 1, 3)
        expected = terms.opening + progress * (terms.reservation - terms.opening)
        n, d = expected.numerator, expected.denominator
        assert offer.price == (2 * n + d) // (2 * d)


def test_polynomial_concession_holds_back_early():
    linear = buyer_terms(0, 10_000, 5)
    shy = buyer_terms(0, 10_000, 5, schedule=ConcessionSchedule("poly", 2))
    for round_index in (2, 3, 4):
        assert shy.offer_at(round_index, 5) < linear.offer_at(round_index, 5)
    assert shy.offer_at(5, 5) == linear.offer_at(5, 5) == 10_000


def test_single_round_jumps_to_reservations():
    outcome = negotiate_price(
        buyer_terms(1_000, 10_000, 1), seller_terms(20_000, 9_000, 1)
    )
    assert isinstance(outcome, Agreement)
    assert outcome.price == 10_000  # buyer leads with its reservation
    assert outcome.proposals_used == 1


def test_effective_rounds_is_the_smaller_side():
    session = open_session(
        buyer_terms(5_000, 9_000, 3), seller_terms(12_000, 8_000, 9)
    )
    assert session.effective_rounds == 3


price = st.integers(min_value=0, max_value=50_000)
rounds = st.integers(min_value=1, max_value=9)
schedule = st.sampled_from([
    ConcessionSchedule(),
    ConcessionSchedule("poly", 2),
    ConcessionSchedule("poly", 3),
])


@settings(max_examples=400)
@given(
    data=st.data(),
    buyer_res=price, seller_res=price,
    buyer_rounds=rounds, seller_rounds=rounds,
    buyer_schedule=schedule, seller_schedule=schedule,
    mover=st.sampled_from([BUYER, SELLER]),
)
def test_zone_decides_the_outcome(
    data, buyer_res, seller_res, buyer_rounds, seller_rounds,
    buyer_schedule, seller_schedule, mover,
):
    buyer_open = data.draw(st.integers(min_value=0, max_value=buyer_res))
    seller_open = data.draw(st.integers(min_value=seller_res, max_value=60_000))
    buyer = buyer_terms(buyer_open, buyer_res, buyer_rounds, schedule=buyer_schedule)
    seller = seller_terms(seller_open, seller_res, seller_rounds, schedule=seller_schedule)
    outcome = negotiate_price(buyer, seller, first_mover=mover)
    effective = min(buyer_rounds, seller_rounds)
    if buyer_res >= seller_res:
        assert isinstance(outcome, Agreement)
        assert seller_res <= outcome.price <= buyer_res
        assert outcome.proposals_used <= effective + 1
    else:
        assert isinstance(outcome, BrokeOff)
        assert outcome.proposals_used <= effective


# -- penalties and SLA paperwork ------------------------------------------------------


def test_penalty_schedule_is_linear_in_lateness():
    schedule = PenaltySchedule(rate=Fraction(20))
    assert schedule.penalty_for(0) == 0
    assert schedule.penalty_for(10) == 200


def test_penalty_cap_binds():
    schedule = PenaltySchedule(rate=Fraction(20), cap=1_000)
    assert schedule.penalty_for(500) == 1_000


def test_early_completion_carries_no_penalty():
    schedule = PenaltySchedule(rate=Fraction(20))
    assert schedule.penalty_for(-3) == 0


def make_sla(**overrides):
    fields = dict(
        sla_id="sla000001", buyer="broker-a", seller="alpine",
        request_id="req000001", price=9_000, promised_completion=50,
        penalty=PenaltySchedule(rate=Fraction(10)),
    )
    fields.update(overrides)
    return Sla(**fields)


def test_identity_renegotiation_keeps_the_price():
    sla = make_sla()
    outcome, replacement = renegotiate(
        sla,
        buyer_terms(9_000, 9_000, 3),
        seller_terms(9_000, 9_000, 3),
        sla_id="sla000002",
    )
    assert isinstance(outcome, Agreement)
    assert replacement is not None
    assert replacement.price == sla.price == 9_000
    assert replacement.sla_id == "sla000002"
    assert sla.superseded


def test_failed_renegotiation_keeps_the_old_sla():
    sla = make_sla()
    outcome, replacement = renegotiate(
        sla,
        buyer_terms(1_000, 5_000, 3),  # now below the seller's floor
        seller_terms(12_000, 8_000, 3),
        sla_id="sla000002",
    )
    assert isinstance(outcome, BrokeOff)
    assert replacement is None
    assert not sla.superseded
    assert not sla.settled


def test_renegotiation_closes_at_dispatch():
    sla = make_sla(dispatched=True)
    with pytest.raises(AlreadyDispatched):
        renegotiate(
            sla,
            buyer_terms(9_000, 9_000, 3),
            seller_terms(9_000, 9_000, 3),
            sla_id="sla000002",
        )
