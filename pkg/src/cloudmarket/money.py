"""Exact integer money and rational arithmetic helpers.

All monetary amounts are integers in micro-currency units. Intermediate
ratios are kept as Fractions; rounding (half-up) happens once, at final
aggregation, so conservation checks can demand exact equality.
"""

from __future__ import annotations

from decimal import Decimal, InvalidOperation
from fractions import Fraction

Money = int


def round_half_up(value: Fraction | int) -> int:
    """Round a rational to the nearest integer, halves away from floor."""
    if isinstance(value, int):
        return value
    n, d = value.numerator, value.denominator
    return (2 * n + d) // (2 * d)


def as_fraction(value: int | float | str | Fraction) -> Fraction:
    """Parse a rational from config input.

    Accepts ints, "p/q" strings, and decimal notation. Floats are
    interpreted by their decimal repr ("0.1" means exactly 1/10, not the
    nearest binary float), so scenario files stay exact.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError(f"not a rational: {value!r}")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        value = repr(value)
    if isinstance(value, str):
        text = value.strip()
        if "/" in text:
            num, _, den = text.partition("/")
            return Fraction(int(num.strip()), int(den.strip()))
        try:
            return Fraction(Decimal(text))
        except InvalidOperation as exc:
            raise ValueError(f"not a rational: {value!r}") from exc
    raise ValueError(f"not a rational: {value!r}")


def frac_str(value: Fraction) -> str:
    """Canonical "p/q" rendering used in reports (stable across runs)."""
    return f"{value.numerator}/{value.denominator}"


def ceil_div(num: int, den: int) -> int:
    if den <= 0:
        raise ValueError("denominator must be positive")
    return -(-num // den)
