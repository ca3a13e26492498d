"""Security economics of signer collusion and the double-spend race.

Everything is exact rational arithmetic; floats given as inputs are read by
their decimal repr so that 0.1 means 1/10.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator

Number = int | float | str | Fraction

SWEEP_HEADER = "e,f,R,S_bar,TA,colluder_share,honest_share,f_prime,bounty_min"


class EconError(ValueError):
    pass


def as_fraction(x: Number) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class EconParams:
    e: Fraction  # largest share of a block's amount one forged tx may carry
    TA: int  # max total amount per block, minor units
    f: Fraction  # fee fraction
    R: int  # finalization depth
    S_bar: Fraction  # mean signers per block
    q: Fraction = Fraction(0)  # attacker's share of signers
    z: int = 0  # blocks behind

    @classmethod
    def of(cls, e: Number, TA: int, f: Number, R: int, S_bar: Number, q: Number = 0, z: int = 0) -> "EconParams":
        p = cls(as_fraction(e), int(TA), as_fraction(f), int(R), as_fraction(S_bar), as_fraction(q), int(z))
        p.validate()
        return p

    def validate(self) -> None:
        if not 0 < self.e < 1:
            raise EconError("need 0 < e < 1")
        if not 0 <= self.f <= 1:
            raise EconError("need 0 <= f <= 1")
        if self.TA < 0:
            raise EconError("TA must be >= 0")
        if self.R < 1:
            raise EconError("R must be >= 1")
        if self.S_bar <= 0:
            raise EconError("S_bar must be > 0")
        if not 0 <= self.q <= 1:
            raise EconError("need 0 <= q <= 1")
        if self.z < 0:
            raise EconError("z must be >= 0")

    @property
    def p(self) -> Fraction:
        return 1 - self.q

    def colluder_share(self) -> Fraction:
        return colluder_share(self.e, self.TA, self.f, self.R, self.S_bar)

    def honest_fee_share(self) -> Fraction:
        return honest_fee_share(self.f, self.TA, self.S_bar)

    def min_fee_fraction(self) -> Fraction:
        return min_fee_fraction(self.e, self.R)

    def min_bounty_penalty(self) -> Fraction:
        return min_bounty_penalty(self.e, self.TA, self.f, self.R, self.S_bar)


def colluder_share(e: Number, TA: Number, f: Number, R: Number, S_bar: Number) -> Fraction:
    """Gain per colluding signer from forging ``e`` of a block's amount.

    The forged amount net of its fee is split over every signer of the R
    blocks the forgery has to outrun.
    """
    e, TA, f, R, S_bar = map(as_fraction, (e, TA, f, R, S_bar))
    _positive(R=R, S_bar=S_bar)
    return (e * TA - e * f * TA) / (R * S_bar)


def honest_fee_share(f: Number, TA: Number, S_bar: Number) -> Fraction:
    """Fee income per signer of one full block."""
    f, TA, S_bar = map(as_fraction, (f, TA, S_bar))
    _positive(S_bar=S_bar)
    return f * TA / S_bar


def min_fee_fraction(e: Number, R: Number) -> Fraction:
    """Smallest fee fraction at which honest signing pays at least as much as colluding."""
    e, R = as_fraction(e), as_fraction(R)
    if e <= 0:
        raise EconError("e must be > 0")
    if R < 1:
        raise EconError("R must be >= 1")
    return e / (R + e)


def min_bounty_penalty(e: Number, TA: Number, f: Number, R: Number, S_bar: Number) -> Fraction:
    """Lower bound on the bounty (and penalty) that makes reporting beat colluding."""
    e, TA, f, R, S_bar = map(as_fraction, (e, TA, f, R, S_bar))
    _positive(R=R, S_bar=S_bar)
    return (1 - f) * e * TA / (R * S_bar)


def _positive(**values: Fraction) -> None:
    for name, v in values.items():
        if v <= 0:
            raise EconError(f"{name} must be > 0")


# -- double-spend race -------------------------------------------------------------


def catchup_probability(q: Number, z: int, mode: str = "race") -> Fraction | float:
    """Chance that an attacker holding ``q`` of the signers ever overtakes from ``z`` blocks behind.

    ``race`` is the gambler's-ruin answer, exact. ``poisson`` also averages
    over the attacker's progress while the honest chain grew those z blocks,
    and returns a float.
    """
    q = as_fraction(q)
    if not 0 <= q <= 1:
        raise EconError("need 0 <= q <= 1")
    if z < 0:
        raise EconError("z must be >= 0")
    p = 1 - q
    if mode == "race":
        if q >= p or z == 0:
            return Fraction(1)
        return (q / p) ** z
    if mode == "poisson":
        if q >= p:
            return 1.0
        lam = z * float(q / p)
        ratio = float(q / p)
        total = 1.0
        term = math.exp(-lam)
        for k in range(z + 1):
            total -= term * (1 - ratio ** (z - k))
            term *= lam / (k + 1)
        return total
    raise EconError(f"unknown mode {mode!r}")


# -- sweeps -----------------------------------------------------------------------


def sweep(grid: Iterable[tuple[Number, Number, Number, Number, Number]]) -> Iterator[str]:
    """CSV lines (header first) for (e, f, R, S_bar, TA) tuples.

    Rationals are printed as exact ``p/q`` strings when they are not integers.
    """
    yield SWEEP_HEADER
    for e, f, R, S_bar, TA in grid:
        p = EconParams.of(e, TA, f, R, S_bar)
        row = (
            p.e, p.f, p.R, p.S_bar, p.TA,
            p.colluder_share(), p.honest_fee_share(), p.min_fee_fraction(), p.min_bounty_penalty(),
        )
        yield ",".join(fmt(v) for v in row)


def fmt(v) -> str:
    if isinstance(v, Fraction):
        return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
    return str(v)
