"""Exact interval arithmetic over the rationals.

The dynamics layer manipulates finite unions of intervals with rational
endpoints, so every set operation here is exact.  ``RationalInterval`` is a
single (possibly degenerate) interval with endpoint flags; ``IntervalSet``
keeps a canonical sorted, merged tuple of them, which makes equality of set
descriptions a plain tuple comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Union

from .errors import ValidationError

Rationalish = Union[Fraction, int, str]


def frac(value: Rationalish) -> Fraction:
    """Coerce ints, Fractions and ``"p/q"`` strings to an exact Fraction.

    Floats are rejected on purpose: they would silently break exactness.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValidationError("bool is not a rational value")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValidationError(f"cannot parse rational {value!r}: {exc}") from exc
    raise ValidationError(f"expected a rational value, got {value!r}")


def frac_str(value: Fraction) -> str:
    """Canonical text form: reduced ``p/q``, plain ``p`` for integers."""
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


@dataclass(frozen=True)
class RationalInterval:
    """One interval with rational endpoints and open/closed flags.

    A degenerate interval (``lo == hi``) must be closed on both sides and
    stands for a single point.
    """

    lo: Fraction
    hi: Fraction
    lo_closed: bool = True
    hi_closed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lo", frac(self.lo))
        object.__setattr__(self, "hi", frac(self.hi))
        if self.lo > self.hi:
            raise ValidationError(f"interval endpoints out of order: {self}")
        if self.lo == self.hi and not (self.lo_closed and self.hi_closed):
            raise ValidationError(f"degenerate interval must be closed: {self}")

    # -- queries ---------------------------------------------------------

    @property
    def is_point(self) -> bool:
        return self.lo == self.hi

    @property
    def length(self) -> Fraction:
        return self.hi - self.lo

    def contains(self, x: Rationalish) -> bool:
        x = frac(x)
        if x < self.lo or x > self.hi:
            return False
        if x == self.lo and not self.lo_closed:
            return False
        if x == self.hi and not self.hi_closed:
            return False
        return True

    def midpoint(self) -> Fraction:
        return (self.lo + self.hi) / 2

    # -- constructions ---------------------------------------------------

    @staticmethod
    def point(x: Rationalish) -> "RationalInterval":
        x = frac(x)
        return RationalInterval(x, x, True, True)

    def closure(self) -> "RationalInterval":
        return RationalInterval(self.lo, self.hi, True, True)

    def intersection(self, other: "RationalInterval") -> "RationalInterval | None":
        lo = max(self.lo, other.lo)
        hi = min(self.hi, other.hi)
        if lo > hi:
            return None
        lo_closed = self.contains(lo) and other.contains(lo)
        hi_closed = self.contains(hi) and other.contains(hi)
        if lo == hi:
            return RationalInterval.point(lo) if lo_closed and hi_closed else None
        return RationalInterval(lo, hi, lo_closed, hi_closed)

    def affine_image(self, slope: Rationalish, intercept: Rationalish) -> "RationalInterval":
        """Image under ``x -> slope*x + intercept`` with ``slope != 0``."""
        m, c = frac(slope), frac(intercept)
        if m == 0:
            raise ValidationError("affine image requires nonzero slope")
        a = m * self.lo + c
        b = m * self.hi + c
        if m > 0:
            return RationalInterval(a, b, self.lo_closed, self.hi_closed)
        return RationalInterval(b, a, self.hi_closed, self.lo_closed)

    def __str__(self) -> str:
        lb = "[" if self.lo_closed else "("
        rb = "]" if self.hi_closed else ")"
        return f"{lb}{frac_str(self.lo)}, {frac_str(self.hi)}{rb}"


def _mergeable(a: RationalInterval, b: RationalInterval) -> bool:
    # assumes a.lo <= b.lo after sorting
    if b.lo > a.hi:
        return False
    if b.lo == a.hi:
        return a.hi_closed or b.lo_closed
    return True


def _merge(a: RationalInterval, b: RationalInterval) -> RationalInterval:
    if a.lo < b.lo:
        lo, lo_closed = a.lo, a.lo_closed
    elif b.lo < a.lo:
        lo, lo_closed = b.lo, b.lo_closed
    else:
        lo, lo_closed = a.lo, a.lo_closed or b.lo_closed
    if a.hi > b.hi:
        hi, hi_closed = a.hi, a.hi_closed
    elif b.hi > a.hi:
        hi, hi_closed = b.hi, b.hi_closed
    else:
        hi, hi_closed = a.hi, a.hi_closed or b.hi_closed
    return RationalInterval(lo, hi, lo_closed, hi_closed)


class IntervalSet:
    """Canonical finite union of :class:`RationalInterval`.

    Instances are immutable; two sets describing the same subset of the line
    compare equal.
    """

    __slots__ = ("intervals",)

    def __init__(self, intervals: Iterable[RationalInterval] = ()):
        items = sorted(
            (iv for iv in intervals if iv is not None),
            key=lambda iv: (iv.lo, not iv.lo_closed, iv.hi, not iv.hi_closed),
        )
        merged: list[RationalInterval] = []
        for iv in items:
            if merged and _mergeable(merged[-1], iv):
                merged[-1] = _merge(merged[-1], iv)
            else:
                merged.append(iv)
        object.__setattr__(self, "intervals", tuple(merged))

    def __setattr__(self, name, value):
        raise AttributeError("IntervalSet is immutable")

    # -- constructors ----------------------------------------------------

    @staticmethod
    def empty() -> "IntervalSet":
        return IntervalSet(())

    @staticmethod
    def of(*intervals: RationalInterval) -> "IntervalSet":
        return IntervalSet(intervals)

    @staticmethod
    def point(x: Rationalish) -> "IntervalSet":
        return IntervalSet((RationalInterval.point(x),))

    @staticmethod
    def points(xs: Iterable[Rationalish]) -> "IntervalSet":
        return IntervalSet(RationalInterval.point(x) for x in xs)

    @staticmethod
    def closed(lo: Rationalish, hi: Rationalish) -> "IntervalSet":
        return IntervalSet((RationalInterval(frac(lo), frac(hi)),))

    # -- basic protocol --------------------------------------------------

    def __eq__(self, other) -> bool:
        return isinstance(other, IntervalSet) and self.intervals == other.intervals

    def __hash__(self) -> int:
        return hash(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def __bool__(self) -> bool:
        return bool(self.intervals)

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    def __str__(self) -> str:
        if not self.intervals:
            return "{}"
        return " u ".join(str(iv) for iv in self.intervals)

    __repr__ = __str__

    # -- queries ---------------------------------------------------------

    def contains(self, x: Rationalish) -> bool:
        x = frac(x)
        return any(iv.contains(x) for iv in self.intervals)

    def measure(self) -> Fraction:
        return sum((iv.length for iv in self.intervals), Fraction(0))

    def component_containing(self, x: Rationalish) -> RationalInterval | None:
        x = frac(x)
        for iv in self.intervals:
            if iv.contains(x):
                return iv
        return None

    def isolated_points(self) -> tuple[Fraction, ...]:
        return tuple(iv.lo for iv in self.intervals if iv.is_point)

    def endpoints(self) -> tuple[Fraction, ...]:
        out: list[Fraction] = []
        for iv in self.intervals:
            out.append(iv.lo)
            if iv.hi != iv.lo:
                out.append(iv.hi)
        return tuple(out)

    def min(self) -> Fraction:
        if self.is_empty:
            raise ValidationError("empty set has no minimum")
        return self.intervals[0].lo

    def max(self) -> Fraction:
        if self.is_empty:
            raise ValidationError("empty set has no maximum")
        return self.intervals[-1].hi

    # -- set algebra ------------------------------------------------------

    def union(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet(self.intervals + other.intervals)

    def intersection(self, other: "IntervalSet") -> "IntervalSet":
        out = []
        for a in self.intervals:
            for b in other.intervals:
                if b.lo > a.hi:
                    break
                piece = a.intersection(b)
                if piece is not None:
                    out.append(piece)
        return IntervalSet(out)

    def difference(self, other: "IntervalSet") -> "IntervalSet":
        pieces = list(self.intervals)
        for cut in other.intervals:
            nxt: list[RationalInterval] = []
            for p in pieces:
                nxt.extend(_interval_minus(p, cut))
            pieces = nxt
        return IntervalSet(pieces)

    def issubset(self, other: "IntervalSet") -> bool:
        return self.difference(other).is_empty

    def intersects(self, other: "IntervalSet") -> bool:
        return not self.intersection(other).is_empty

    # -- topology (relative to an ambient finite union) -------------------

    def closure(self) -> "IntervalSet":
        return IntervalSet(iv.closure() for iv in self.intervals)

    def interior_in(self, space: "IntervalSet") -> "IntervalSet":
        """Interior of self relative to ``space`` (self need not be inside)."""
        inside = self.intersection(space)
        return space.difference(space.difference(inside).closure())

    def is_open_in(self, space: "IntervalSet") -> bool:
        inside = self.intersection(space)
        return inside == inside.interior_in(space)

    def boundary_in(self, space: "IntervalSet") -> "IntervalSet":
        inside = self.intersection(space)
        return inside.closure().intersection(space.difference(inside).closure()).intersection(space)

    def interior_radius_at(self, x: Rationalish, space: "IntervalSet") -> Fraction | None:
        """A rational r > 0 with ``(x-r, x+r) & space`` inside self.

        Returns None if x is not in the interior of self relative to ``space``.
        A component endpoint that coincides with x means space has no points
        on that side, so that side puts no constraint on r.
        """
        x = frac(x)
        comp = self.interior_in(space).component_containing(x)
        if comp is None:
            return None
        dists = [d for d in (x - comp.lo, comp.hi - x) if d > 0]
        return min(dists) if dists else Fraction(1)

    def nondegenerate(self) -> "IntervalSet":
        return IntervalSet(iv for iv in self.intervals if not iv.is_point)

    def sample_points(self, per_component: int = 3) -> tuple[Fraction, ...]:
        """Deterministic rational samples: endpoints when closed, midpoints."""
        out: list[Fraction] = []
        for iv in self.intervals:
            if iv.is_point:
                out.append(iv.lo)
                continue
            if iv.lo_closed:
                out.append(iv.lo)
            if iv.hi_closed:
                out.append(iv.hi)
            step = iv.length / (per_component + 1)
            for k in range(1, per_component + 1):
                out.append(iv.lo + step * k)
        seen = set()
        uniq = []
        for p in out:
            if p not in seen:
                seen.add(p)
                uniq.append(p)
        return tuple(uniq)


def _interval_minus(a: RationalInterval, cut: RationalInterval) -> list[RationalInterval]:
    inter = a.intersection(cut)
    if inter is None:
        return [a]
    out: list[RationalInterval] = []
    if a.lo < inter.lo or (a.lo == inter.lo and a.lo_closed and not inter.lo_closed):
        out.append(RationalInterval(a.lo, inter.lo, a.lo_closed, not inter.lo_closed))
    if inter.hi < a.hi or (inter.hi == a.hi and a.hi_closed and not inter.hi_closed):
        out.append(RationalInterval(inter.hi, a.hi, not inter.hi_closed, a.hi_closed))
    return out


def accumulates_at(s: IntervalSet, x: Rationalish, *, side: int) -> bool:
    """True when ``s`` has points arbitrarily close to x strictly on one side.

    ``side`` is +1 for the right, -1 for the left.
    """
    x = frac(x)
    for iv in s.intervals:
        if iv.is_point:
            continue
        if side > 0 and iv.lo <= x < iv.hi:
            return True
        if side < 0 and iv.lo < x <= iv.hi:
            return True
    return False
