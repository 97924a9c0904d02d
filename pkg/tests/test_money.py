"""Integer currency helpers."""

from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from cloudmarket.money import as_fraction, ceil_div, frac_str, round_half_up


def test_round_half_up_at_the_boundary():
    assert round_half_up(Fraction(5, 2)) == 3
    assert round_half_up(Fraction(-5, 2)) == -2
    assert round_half_up(Fraction(7, 2)) == 4


def test_round_half_up_passes_integers_through():
    assert round_half_up(17) == 17
    assert round_half_up(Fraction(12)) == 12


@given(st.fractions(min_value=-10**9, max_value=10**9))
def test_round_half_up_within_half(value):
    rounded = round_half_up(value)
    assert abs(Fraction(rounded) - value) <= Fraction(1, 2)
    # exact halves go up, never down
    if value - Fraction(rounded) == Fraction(1, 2):
        pytest.fail("half was rounded down")


@given(st.integers(min_value=0, max_value=10**6), st.integers(min_value=1, max_value=10**4))
def test_ceil_div_matches_float_ceiling(num, den):
    assert ceil_div(num, den) == -(-num // den)
    assert ceil_div(num, den) * den >= num
    assert (ceil_div(num, den) - 1) * den < num


def test_as_fraction_parses_ratio_strings():
    assert as_fraction("3/4") == Fraction(3, 4)
    assert as_fraction(2) == Fraction(2)
    assert as_fraction(Fraction(1, 3)) == Fraction(1, 3)


def test_frac_str_round_trips():
    for f in (Fraction(1, 2), Fraction(5), Fraction(-7, 3)):
        assert as_fraction(frac_str(f)) == f
