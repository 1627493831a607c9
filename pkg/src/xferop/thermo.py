"""Time-evolution twists, eigen-measure residuals, and the temperature solver.

The one-parameter family fixes functions and multiplies the shift generator
by an exponential phase built from an energy function; on spanning monomials
it acts through explicit multipliers that stay evaluable at complex
parameters.  The dual side asks when a probability measure reproduces itself
under weighted fiber sums: the strong form tests every compactly supported
function with the weight included, the weak form only functions supported in
the regular region with the weight dropped.  A bisection solver recovers the
inverse temperature from the Perron root of the discretized fiber-sum
operator, and the state-level checks evaluate both sides of the exchange
identity through the diagonal expectation.
"""

from __future__ import annotations

import cmath
import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import dynamics as dyn
from . import rep
from . import transfer as tr
from .dynamics import PartialSystem, PathPoint, Potential
from .errors import (
    NoSolution,
    OutOfDomain,
    SupportViolation,
    UnsupportedPotential,
    ValidationError,
)
from .intervals import IntervalSet, RationalInterval, accumulates_at, frac, frac_str
from .verdicts import Verdict

__all__ = [
    "PotentialFunction",
    "TwistedMonomial",
    "sigma_action",
    "EnergyWitness",
    "EnergyScan",
    "check_positive_energy",
    "GridFunction",
    "CascadeMeasure",
    "inverse_orbit_measure",
    "ResidualRow",
    "ResidualReport",
    "conformal_residual",
    "weakly_conformal_residual",
    "KMSCandidate",
    "solve_conformal",
    "kms_residual",
    "kms_battery",
    "core_kms_check",
    "uniform_ulam",
    "tv_distance",
    "irregular_hat",
    "hat_battery",
]


# ---------------------------------------------------------------------------
# energy functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialFunction:
    """A continuous real energy on the domain of the map.

    Wraps a signed :class:`Potential`: affine pieces on the interval
    backend, one value per edge on the graph backend.  Construction checks
    that the pieces cover the domain and glue continuously; point overrides
    are rejected because they would be invisible to limits.
    """

    system: PartialSystem
    carrier: Potential

    def __post_init__(self):
        if self.carrier.backend != self.system.backend:
            raise ValidationError("energy backend does not match the system")
        if self.system.backend == "graph":
            for e in self.system.gph.edges:
                self.carrier.edge_weight(e.name)  # raises when missing
            return
        if self.carrier.overrides:
            raise ValidationError("energy functions take no point overrides")
        delta = self.system.ival.delta
        if not delta.issubset(self.carrier.coverage()):
            raise ValidationError("energy pieces must cover the domain")
        for iv, _, _ in self.carrier.pieces:
            for p in (iv.lo, iv.hi):
                if not delta.contains(p):
                    continue
                v = self.carrier.value(p)
                for side in (-1, +1):
                    if not accumulates_at(delta, p, side=side):
                        continue
                    lim = self.carrier.one_sided_limit(p, side)
                    if lim is not None and lim != v:
                        raise ValidationError(
                            f"energy jumps at {frac_str(p)}: {frac_str(lim)} vs {frac_str(v)}"
                        )

    # -- constructors --------------------------------------------------------

    @staticmethod
    def const(system: PartialSystem, value) -> "PotentialFunction":
        v = frac(value)
        if system.backend == "interval":
            pieces = tuple((iv, Fraction(0), v) for iv in system.ival.space.intervals)
            return PotentialFunction(
                system, Potential("interval", pieces=pieces, allow_negative=True)
            )
        weights = tuple((e.name, v) for e in system.gph.edges)
        return PotentialFunction(
            system, Potential("graph", weights=weights, allow_negative=True)
        )

    @staticmethod
    def of(system: PartialSystem, carrier: Potential) -> "PotentialFunction":
        return PotentialFunction(system, carrier)

    # -- evaluation ------------------------------------------------------------

    def value(self, x) -> Fraction:
        if self.system.backend == "interval":
            return self.carrier.value(frac(x))
        p: PathPoint = x
        if not p.word:
            raise OutOfDomain(p, 0)
        return self.carrier.edge_weight(p.word[0])

    def birkhoff(self, x, n: int) -> Fraction:
        """Sum of the energy along the first n forward steps."""
        if n < 0:
            raise ValidationError("n must be nonnegative")
        if n == 0:
            return Fraction(0)
        pts = dyn.orbit(self.system, x, n - 1)
        return sum((self.value(z) for z in pts), Fraction(0))

    def constant_value(self) -> Optional[Fraction]:
        """The single value when the energy is constant, else None."""
        if self.system.backend == "graph":
            vals = {w for _, w in self.carrier.weights}
            return vals.pop() if len(vals) == 1 else None
        vals = set()
        for _, m, c in self.carrier.pieces:
            if m != 0:
                return None
            vals.add(c)
        return vals.pop() if len(vals) == 1 else None


# ---------------------------------------------------------------------------
# the one-parameter twist on monomials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwistedMonomial:
    """A spanning monomial with exponential multipliers attached.

    The left coefficient picks up exp(i lam * S_up) and the right one
    exp(-i lam * S_down), where S_k is the k-step energy sum.  Both sides
    stay pointwise evaluable for any complex parameter.
    """

    mon: rep.Monomial
    lam: complex
    psi: PotentialFunction

    def left_value(self, x) -> complex:
        base = complex(self.mon.left.value(x)) if self.mon.left is not None else 1.0 + 0j
        try:
            s = self.psi.birkhoff(x, self.mon.up)
        except (OutOfDomain, ValidationError):
            return 0j  # the power's coefficient lives on the n-step domain
        return cmath.exp(1j * self.lam * float(s)) * base

    def right_value(self, x) -> complex:
        base = complex(self.mon.right.value(x)) if self.mon.right is not None else 1.0 + 0j
        try:
            s = self.psi.birkhoff(x, self.mon.down)
        except (OutOfDomain, ValidationError):
            return 0j
        return base * cmath.exp(-1j * self.lam * float(s))


def sigma_action(
    mon: Union[rep.Monomial, TwistedMonomial], lam, psi: PotentialFunction
) -> TwistedMonomial:
    """Apply the twist at parameter lam; twists at the same energy compose."""
    lam = complex(lam)
    if isinstance(mon, TwistedMonomial):
        if mon.psi.carrier != psi.carrier:
            raise ValidationError("cannot compose twists over different energies")
        return TwistedMonomial(mon.mon, mon.lam + lam, psi)
    return TwistedMonomial(mon, lam, psi)


# ---------------------------------------------------------------------------
# positive energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyWitness:
    """A point (or window) where some n-step energy sum vanishes exactly."""

    n: int
    point: object
    window: Optional[RationalInterval] = None
    chain: tuple = ()


@dataclass(frozen=True)
class EnergyScan:
    depth: int
    windows: int


def _birkhoff_windows(sys_, psi: PotentialFunction, comp) -> list:
    """Affine pieces of the n-step energy sum on one composite domain."""
    windows = [(comp.domain, Fraction(0), Fraction(0))]
    mk, bk = Fraction(1), Fraction(0)  # prefix map phi^k on the composite domain
    for k, idx in enumerate(comp.chain):
        nxt = []
        for win, A, B in windows:
            for ivp, mp, cp in psi.carrier.pieces:
                if mk == 0:
                    if ivp.contains(bk):
                        nxt.append((win, A, B + mp * bk + cp))
                    continue
                pull = ivp.affine_image(1 / mk, -bk / mk).intersection(win)
                if pull is None:
                    continue
                nxt.append((pull, A + mp * mk, B + mp * bk + cp))
        windows = nxt
        br = sys_.branches[idx]
        mk, bk = br.slope * mk, br.slope * bk + br.intercept
    return windows


def check_positive_energy(system: PartialSystem, psi: PotentialFunction, depth: int = 8) -> Verdict:
    """Decide whether every n-step energy sum avoids zero, up to the depth.

    Interval backend: the sum is affine on refined composite windows, so
    zeros are found by exact root isolation.  Graph backend: the sum along a
    path depends only on its first n edges, so all n-words are scanned.
    """
    if psi.system is not system:
        psi = PotentialFunction(system, psi.carrier)
    scanned = 0
    if system.backend == "graph":
        wmap = psi.carrier.weight_map()
        for n in range(1, depth + 1):
            for p in system.gph.words(n):
                scanned += 1
                s = sum((wmap[e] for e in p.word), Fraction(0))
                if s == 0:
                    return Verdict(
                        "PositiveEnergy",
                        "Fails",
                        EnergyWitness(n, p, chain=p.word),
                        depth=depth,
                    )
        return Verdict("PositiveEnergy", "Holds", EnergyScan(depth, scanned), depth=depth)

    sys_ = system.ival
    for n in range(1, depth + 1):
        for comp in dyn.composite_branches(sys_, n):
            for win, A, B in _birkhoff_windows(sys_, psi, comp):
                scanned += 1
                if A == 0:
                    if B == 0:
                        pt = win.midpoint()
                        return Verdict(
                            "PositiveEnergy",
                            "Fails",
                            EnergyWitness(n, pt, window=win, chain=comp.chain),
                            depth=depth,
                        )
                    continue
                root = -B / A
                if win.contains(root):
                    return Verdict(
                        "PositiveEnergy",
                        "Fails",
                        EnergyWitness(n, root, window=win, chain=comp.chain),
                        depth=depth,
                    )
    return Verdict("PositiveEnergy", "Holds", EnergyScan(depth, scanned), depth=depth)


# ---------------------------------------------------------------------------
# piecewise-quadratic grid functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridFunction:
    """Piecewise quadratic with exact values pinned at the grid nodes.

    Open cells between consecutive nodes carry (c0, c1, c2); outside the
    node range the function is zero.  Node values live in their own table,
    so overrides, fiber collisions at shared branch endpoints, and jump
    points never leak into a cell.
    """

    nodes: tuple[Fraction, ...]
    cells: tuple[tuple[Fraction, Fraction, Fraction], ...]
    node_values: tuple[Fraction, ...]

    def __post_init__(self):
        if len(self.nodes) < 2 or len(self.cells) != len(self.nodes) - 1:
            raise ValidationError("grid shape mismatch")
        if len(self.node_values) != len(self.nodes):
            raise ValidationError("one value per node required")
        if any(a >= b for a, b in zip(self.nodes, self.nodes[1:])):
            raise ValidationError("nodes must increase strictly")

    def value(self, x) -> Fraction:
        x = frac(x)
        for p, v in zip(self.nodes, self.node_values):
            if p == x:
                return v
        if x < self.nodes[0] or x > self.nodes[-1]:
            return Fraction(0)
        for (u, v_), (c0, c1, c2) in zip(zip(self.nodes, self.nodes[1:]), self.cells):
            if u < x < v_:
                return c0 + c1 * x + c2 * x * x
        return Fraction(0)

    def sup_bound(self) -> Fraction:
        best = max((abs(v) for v in self.node_values), default=Fraction(0))
        for (u, v_), (c0, c1, c2) in zip(zip(self.nodes, self.nodes[1:]), self.cells):
            for x in (u, v_):
                best = max(best, abs(c0 + c1 * x + c2 * x * x))
            if c2 != 0:
                top = -c1 / (2 * c2)
                if u < top < v_:
                    best = max(best, abs(c0 + c1 * top + c2 * top * top))
        return best


def _piece_at(pieces, x: Fraction):
    for iv, m, c in pieces:
        if iv.contains(x):
            return m, c
    return None


def _fn_grid(a: tr.TestFunction, carrier: RationalInterval) -> GridFunction:
    cuts = {carrier.lo, carrier.hi}
    for iv, _, _ in a.pieces:
        for p in (iv.lo, iv.hi):
            if carrier.lo <= p <= carrier.hi:
                cuts.add(p)
    nodes = tuple(sorted(cuts))
    cells = []
    for u, v in zip(nodes, nodes[1:]):
        hit = _piece_at(a.pieces, (u + v) / 2)
        cells.append((hit[1], hit[0], Fraction(0)) if hit else (Fraction(0),) * 3)
    return GridFunction(nodes, tuple(cells), tuple(a.value(p) for p in nodes))


def _pot_grid(pot: Potential, carrier: RationalInterval) -> GridFunction:
    cuts = {carrier.lo, carrier.hi}
    for iv, _, _ in pot.pieces:
        for p in (iv.lo, iv.hi):
            if carrier.lo <= p <= carrier.hi:
                cuts.add(p)
    for x, _ in pot.overrides:
        if carrier.lo <= x <= carrier.hi:
            cuts.add(x)
    nodes = tuple(sorted(cuts))
    cells = []
    for u, v in zip(nodes, nodes[1:]):
        hit = _piece_at(pot.pieces, (u + v) / 2)
        cells.append((hit[1], hit[0], Fraction(0)) if hit else (Fraction(0),) * 3)
    vals = []
    for p in nodes:
        try:
            vals.append(pot.value(p))
        except ValidationError:
            vals.append(Fraction(0))
    return GridFunction(nodes, tuple(cells), tuple(vals))


def _grid_product(f: GridFunction, g: GridFunction) -> GridFunction:
    nodes = tuple(sorted(set(f.nodes) | set(g.nodes)))
    cells = []
    for u, v in zip(nodes, nodes[1:]):
        mid = (u + v) / 2

        def coeffs(h: GridFunction):
            if mid < h.nodes[0] or mid > h.nodes[-1]:
                return (Fraction(0),) * 3
            for (a_, b_), c in zip(zip(h.nodes, h.nodes[1:]), h.cells):
                if a_ < mid < b_:
                    return c
            return (Fraction(0),) * 3

        f0, f1, f2 = coeffs(f)
        g0, g1, g2 = coeffs(g)
        if (f2 != 0 and (g1 != 0 or g2 != 0)) or (g2 != 0 and f1 != 0):
            raise UnsupportedPotential("product leaves the quadratic class")
        cells.append(
            (f0 * g0, f0 * g1 + f1 * g0, f0 * g2 + f1 * g1 + f2 * g0)
        )
    vals = tuple(f.value(p) * g.value(p) for p in nodes)
    return GridFunction(nodes, tuple(cells), vals)


def _single_component(system: PartialSystem) -> RationalInterval:
    comps = system.ival.space.intervals
    if len(comps) != 1:
        raise UnsupportedPotential("closed-form grids need a single-component space")
    return comps[0]


def _transfer_grid(handle: tr.TransferHandle, a: tr.TestFunction) -> GridFunction:
    """The weighted fiber sum of a, as an exact grid function of the target."""
    sys_ = handle.system.ival
    pot = handle.potential
    carrier = _single_component(handle.system)
    xcuts = set()
    for br in sys_.branches:
        xcuts.update((br.domain.lo, br.domain.hi))
    for iv, _, _ in a.pieces:
        xcuts.update((iv.lo, iv.hi))
    for iv, _, _ in pot.pieces:
        xcuts.update((iv.lo, iv.hi))
    xcuts.update(x for x, _ in pot.overrides)
    ycuts = {carrier.lo, carrier.hi}
    for br in sys_.branches:
        for x in xcuts:
            if br.domain.contains(x):
                ycuts.add(br.value(x))
    nodes = tuple(sorted(ycuts))
    cells = []
    for u, v in zip(nodes, nodes[1:]):
        ym = (u + v) / 2
        c0, c1, c2 = Fraction(0), Fraction(0), Fraction(0)
        for br in sys_.branches:
            if br.slope == 0:
                continue  # constant branch: fiber is a set, not a point family
            xm = (ym - br.intercept) / br.slope
            if not br.domain.contains(xm):
                continue
            fa = _piece_at(a.pieces, xm)
            if fa is None:
                continue
            fr = _piece_at(pot.pieces, xm)
            if fr is None:
                continue
            ma, ca = fa
            mr, cr = fr
            u1 = 1 / br.slope
            u0 = -br.intercept / br.slope
            q2 = ma * mr
            q1 = ma * cr + ca * mr
            q0 = ca * cr
            c2 += q2 * u1 * u1
            c1 += 2 * q2 * u1 * u0 + q1 * u1
            c0 += q2 * u0 * u0 + q1 * u0 + q0
        cells.append((c0, c1, c2))
    vals = tuple(tr.apply(handle, a, p) for p in nodes)
    return GridFunction(nodes, tuple(cells), vals)


def _fiber_sum_grid(handle: tr.TransferHandle, a: tr.TestFunction) -> GridFunction:
    """The unweighted fiber sum of a, as an exact grid function."""
    sys_ = handle.system.ival
    carrier = _single_component(handle.system)
    xcuts = set()
    for br in sys_.branches:
        xcuts.update((br.domain.lo, br.domain.hi))
    for iv, _, _ in a.pieces:
        xcuts.update((iv.lo, iv.hi))
    ycuts = {carrier.lo, carrier.hi}
    for br in sys_.branches:
        for x in xcuts:
            if br.domain.contains(x):
                ycuts.add(br.value(x))
    nodes = tuple(sorted(ycuts))
    cells = []
    for u, v in zip(nodes, nodes[1:]):
        ym = (u + v) / 2
        c0, c1 = Fraction(0), Fraction(0)
        for br in sys_.branches:
            if br.slope == 0:
                continue
            xm = (ym - br.intercept) / br.slope
            if not br.domain.contains(xm):
                continue
            fa = _piece_at(a.pieces, xm)
            if fa is None:
                continue
            ma, ca = fa
            c1 += ma / br.slope
            c0 += ca - ma * br.intercept / br.slope
        cells.append((c0, c1, Fraction(0)))
    vals = []
    for p in nodes:
        vals.append(sum((a.value(x) for x in sys_.fiber(p)), Fraction(0)))
    return GridFunction(nodes, tuple(cells), tuple(vals))


# ---------------------------------------------------------------------------
# cascade measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CascadeMeasure:
    """Inverse-orbit atom cascade with geometric level weights.

    Level n carries the n-step preimages of the center, each atom weighted
    base * exp(-beta * n); the truncation at the stored depth is
    renormalized to unit mass and the dropped relative tail is recorded.
    When the level sets coincide with the dyadic midpoint grids of the
    carrier interval (verified level by level, not assumed), level sums of
    grid functions run in closed form, so deep truncations stay cheap.
    """

    center: Fraction
    beta: float
    depth: int
    lo: Fraction
    hi: Fraction
    level_counts: tuple[int, ...]
    base: float
    dyadic: bool
    levels: Optional[tuple[tuple[Fraction, ...], ...]]
    tail_bound: Optional[float]
    growth: Optional[int]

    def level_weight(self, n: int) -> float:
        return self.base * math.exp(-self.beta * n)

    def total_mass(self) -> float:
        return math.fsum(
            self.level_counts[n] * self.level_weight(n) for n in range(self.depth + 1)
        )

    def level_sum(self, g: GridFunction, n: int) -> Fraction:
        if self.dyadic:
            return _dyadic_level_sum(g, self.lo, self.hi, n)
        return sum((g.value(x) for x in self.levels[n]), Fraction(0))

    def integrate_grid(self, g: GridFunction) -> float:
        return math.fsum(
            self.level_weight(n) * float(self.level_sum(g, n))
            for n in range(self.depth + 1)
        )

    def integrate_fn(self, a: tr.TestFunction) -> float:
        return self.integrate_grid(_fn_grid(a, RationalInterval(self.lo, self.hi)))

    def integrate_callable(self, f: Callable[[object], float]) -> float:
        if self.levels is None:
            raise UnsupportedPotential(
                "closed-form cascade holds no explicit atoms; only grid functions integrate"
            )
        return math.fsum(
            self.level_weight(n) * math.fsum(f(x) for x in self.levels[n])
            for n in range(self.depth + 1)
        )

    def atoms(self):
        if self.levels is None:
            raise UnsupportedPotential("closed-form cascade holds no explicit atoms")
        for n, level in enumerate(self.levels):
            w = self.level_weight(n)
            for x in level:
                yield x, w


def _dyadic_level_sum(g: GridFunction, lo: Fraction, hi: Fraction, n: int) -> Fraction:
    # atoms x_j = lo + (2j+1) step, step = (hi-lo)/2^(n+1), j = 0..2^n-1
    step = (hi - lo) / (1 << (n + 1))
    jmax = (1 << n) - 1
    total = Fraction(0)
    for (u, v), (c0, c1, c2) in zip(zip(g.nodes, g.nodes[1:]), g.cells):
        if c0 == 0 and c1 == 0 and c2 == 0:
            continue
        tu = ((u - lo) / step - 1) / 2
        tv = ((v - lo) / step - 1) / 2
        j0 = max(math.floor(tu) + 1, 0)
        j1 = min(math.ceil(tv) - 1, jmax)
        if j1 < j0:
            continue
        count = j1 - j0 + 1
        s1 = Fraction((j0 + j1) * count, 2)
        s2 = Fraction(j1 * (j1 + 1) * (2 * j1 + 1) - (j0 - 1) * j0 * (2 * j0 - 1), 6)
        p = lo + step
        q = 2 * step
        sx = count * p + q * s1
        sxx = count * p * p + 2 * p * q * s1 + q * q * s2
        total += c0 * count + c1 * sx + c2 * sxx
    for p, val in zip(g.nodes, g.node_values):
        if val == 0:
            continue
        t = ((p - lo) / step - 1) / 2
        if t.denominator == 1 and 0 <= t <= jmax:
            total += val
    return total


def inverse_orbit_measure(
    handle: tr.TransferHandle,
    beta: float,
    depth: int,
    center=None,
    probe: int = 10,
    max_atoms: int = 200_000,
    force_explicit: bool = False,
) -> CascadeMeasure:
    """Build the renormalized geometric cascade over the preimages of a point.

    The center defaults to the unique irregular point of the system.  When
    the enumerated levels match the dyadic midpoint grids on every probed
    level, the measure switches to closed-form sums and the depth can be
    large; otherwise atoms are enumerated explicitly and capped.
    """
    system, pot = handle.system, handle.potential
    if system.backend != "interval":
        raise ValidationError("cascade measures are an interval-backend construction")
    if depth < 0:
        raise ValidationError("depth must be nonnegative")
    comp = _single_component(system)
    lo, hi = comp.lo, comp.hi
    if center is None:
        irr = dyn.regular_set(system, pot).irregular_points
        if len(irr) != 1:
            raise ValidationError(
                f"need a unique irregular point to anchor the cascade, found {len(irr)}"
            )
        center = irr[0].point
    center = frac(center)

    sys_ = system.ival
    levels: list[tuple[Fraction, ...]] = [(center,)]
    dyadic_ok = (not force_explicit) and center == (lo + hi) / 2
    probe_n = min(depth, probe)
    seen = 1
    for n in range(1, probe_n + 1):
        nxt = sorted({x for y in levels[-1] for x in sys_.fiber(y)})
        levels.append(tuple(nxt))
        seen += len(nxt)
        if seen > max_atoms:
            raise UnsupportedPotential(
                "level growth exceeds the explicit atom budget and no grid structure was found"
            )
        if dyadic_ok:
            step = (hi - lo) / (1 << (n + 1))
            expected = [lo + (2 * j + 1) * step for j in range(1 << n)]
            if nxt != expected:
                dyadic_ok = False

    if dyadic_ok:
        counts = tuple(1 << n for n in range(depth + 1))
        stored = None
        growth = 2
    else:
        total = seen
        for n in range(probe_n + 1, depth + 1):
            nxt = sorted({x for y in levels[-1] for x in sys_.fiber(y)})
            levels.append(tuple(nxt))
            total += len(nxt)
            if total > max_atoms:
                raise UnsupportedPotential(
                    "level growth exceeds the explicit atom budget and no grid structure was found"
                )
        counts = tuple(len(lv) for lv in levels)
        stored = tuple(levels)
        # a dead branch (some count hits zero) never has uniform growth
        growth = None
        if depth and all(counts):
            g = counts[1] // counts[0]
            if all(counts[n + 1] == counts[n] * g for n in range(depth)):
                growth = g

    raw = math.fsum(counts[n] * math.exp(-beta * n) for n in range(depth + 1))
    if raw <= 0:
        raise ValidationError("cascade has no mass")
    base = 1.0 / raw
    tail = None
    if growth is not None:
        q = growth * math.exp(-beta)
        if q < 1:
            tail = q ** (depth + 1) / (1 - q)
    return CascadeMeasure(
        center, float(beta), depth, lo, hi, counts, base, dyadic_ok, stored, tail, growth
    )


# ---------------------------------------------------------------------------
# residual reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualRow:
    label: str
    lhs: float
    rhs: float
    residual: float
    bound: Optional[float] = None


@dataclass(frozen=True)
class ResidualReport:
    kind: str
    rows: tuple[ResidualRow, ...]
    notes: tuple[str, ...] = ()

    @property
    def max_residual(self) -> float:
        return max((r.residual for r in self.rows), default=0.0)

    def __float__(self) -> float:
        return self.max_residual

    def within_bounds(self) -> bool:
        """Every row that carries a bound stays under it."""
        return all(r.residual <= r.bound for r in self.rows if r.bound is not None)


def _rho_or_zero(pot: Potential, x: Fraction) -> Fraction:
    try:
        return pot.value(x)
    except ValidationError:
        return Fraction(0)


def _psi_exp(psi: PotentialFunction, beta: float, x) -> float:
    return math.exp(beta * float(psi.value(x)))


def _int_ulam_grid(mu: tr.UlamMeasure, g: GridFunction) -> Fraction:
    """Exact integral of a grid function against a bin-density measure."""
    w = (mu.hi - mu.lo) / mu.bins
    total = Fraction(0)
    for (u, v), (c0, c1, c2) in zip(zip(g.nodes, g.nodes[1:]), g.cells):
        if c0 == 0 and c1 == 0 and c2 == 0:
            continue
        u_ = max(u, mu.lo)
        v_ = min(v, mu.hi)
        if v_ <= u_:
            continue
        k0 = max(int((u_ - mu.lo) // w), 0)
        k1 = min(int(-((mu.lo - v_) // w)) - 1, mu.bins - 1)
        for k in range(k0, k1 + 1):
            a_ = max(u_, mu.lo + k * w)
            b_ = min(v_, mu.lo + (k + 1) * w)
            if b_ <= a_:
                continue

            def anti(x: Fraction) -> Fraction:
                return c0 * x + c1 * x * x / 2 + c2 * x * x * x / 3

            total += mu.densities[k] * (anti(b_) - anti(a_))
    return total


def _ulam_quad_points(mu: tr.UlamMeasure, pts: int):
    w = (mu.hi - mu.lo) / mu.bins
    for k in range(mu.bins):
        d = mu.densities[k]
        if d == 0:
            continue
        for i in range(pts):
            x = mu.lo + k * w + w * (2 * i + 1) / (2 * pts)
            yield x, d * w / pts


def _int_ulam_callable(mu: tr.UlamMeasure, f: Callable, pts: int = 1) -> float:
    return math.fsum(float(m) * float(f(x)) for x, m in _ulam_quad_points(mu, pts))


def _int_atomic(mu: tr.AtomicMeasure, f: Callable) -> float:
    return math.fsum(float(m) * float(f(x)) for x, m in mu.atoms)


Measure = Union[tr.AtomicMeasure, tr.UlamMeasure, CascadeMeasure]


def total_mass_of(mu: Measure) -> float:
    return float(mu.total_mass())


# ---------------------------------------------------------------------------
# eigen-measure residuals
# ---------------------------------------------------------------------------


def _strong_pair(handle, psi, beta, mu, a) -> tuple[float, float]:
    system, pot = handle.system, handle.potential
    if system.backend == "graph":
        if not isinstance(mu, tr.AtomicMeasure):
            raise ValidationError("graph residuals need atomic measures")
        lhs = _int_atomic(mu, lambda p: tr.apply(handle, a, p))
        rhs = _int_atomic(
            mu,
            lambda p: float(a.value(p)) * _psi_exp(psi, beta, p) * float(dyn.rho(system, pot, p)),
        )
        return lhs, rhs
    cval = psi.constant_value()
    if isinstance(mu, tr.UlamMeasure):
        lhs = float(_int_ulam_grid(mu, _transfer_grid(handle, a)))
        if cval is not None:
            carrier = _single_component(system)
            prod = _grid_product(_fn_grid(a, carrier), _pot_grid(pot, carrier))
            rhs = math.exp(beta * float(cval)) * float(_int_ulam_grid(mu, prod))
        else:
            rhs = _int_ulam_callable(
                mu,
                lambda x: float(a.value(x)) * _psi_exp(psi, beta, x) * float(_rho_or_zero(pot, x)),
                pts=4,
            )
        return lhs, rhs
    if isinstance(mu, CascadeMeasure):
        lhs = mu.integrate_grid(_transfer_grid(handle, a))
        if cval is None:
            raise UnsupportedPotential("cascade fast path needs a constant energy")
        carrier = _single_component(system)
        prod = _grid_product(_fn_grid(a, carrier), _pot_grid(pot, carrier))
        rhs = math.exp(beta * float(cval)) * mu.integrate_grid(prod)
        return lhs, rhs
    lhs = _int_atomic(mu, lambda y: tr.apply(handle, a, y))
    rhs = _int_atomic(
        mu,
        lambda x: float(a.value(x)) * _psi_exp(psi, beta, x) * float(_rho_or_zero(pot, x)),
    )
    return lhs, rhs


def conformal_residual(
    handle: tr.TransferHandle,
    psi: PotentialFunction,
    beta: float,
    mu: Measure,
    fns: Sequence[tr.TestFunction],
) -> ResidualReport:
    """Max residual of the weighted eigen-measure identity over a family.

    Row k compares the measure of the weighted fiber sum of fns[k] with the
    measure of fns[k] * exp(beta * energy) * weight.
    """
    rows = []
    for i, a in enumerate(fns):
        lhs, rhs = _strong_pair(handle, psi, beta, mu, a)
        rows.append(ResidualRow(f"f{i}", lhs, rhs, abs(lhs - rhs)))
    return ResidualReport("conformal", tuple(rows))


def _check_weak_support(handle, a: tr.TestFunction):
    system, pot = handle.system, handle.potential
    report = dyn.regular_set(system, pot)
    if system.backend == "interval":
        supp = a.support()
        reg: IntervalSet = report.delta_reg
        stray = supp.difference(reg)
        if not stray.is_empty:
            raise SupportViolation(
                f"support leaves the regular region on {stray}"
            )
        return
    reg_cyls = report.delta_reg.cylinders if hasattr(report.delta_reg, "cylinders") else ()
    for cyl, wgt in a.cylinders:
        if wgt == 0:
            continue
        covered = any(
            len(rc.word) <= len(cyl.word)
            and cyl.word[: len(rc.word)] == rc.word
            and (rc.word or cyl.rng == rc.rng)
            for rc in reg_cyls
        )
        if not covered:
            raise SupportViolation(f"cylinder {cyl} leaves the regular region")


def _bare_sum(handle, a: tr.TestFunction, y) -> Fraction:
    system = handle.system
    if system.backend == "interval":
        return sum((a.value(x) for x in system.ival.fiber(frac(y))), Fraction(0))
    return sum((a.value(x) for x in system.gph.fiber(y)), Fraction(0))


def _weak_pair(handle, psi, beta, mu, a) -> tuple[float, float, Optional[float]]:
    system = handle.system
    bound = None
    if isinstance(mu, CascadeMeasure):
        # the telescoping tail estimate holds when each level refines the
        # last at the detected rate and one unit of energy is paid per step
        if mu.growth is not None and psi.constant_value() == 1:
            q = mu.growth * math.exp(-mu.beta)
            if q < 1:
                bound = mu.growth * q**mu.depth * float(a.sup_norm_bound())
        cval = psi.constant_value()
        if mu.dyadic:
            if cval is None:
                raise UnsupportedPotential("cascade fast path needs a constant energy")
            carrier = RationalInterval(mu.lo, mu.hi)
            lhs = mu.integrate_grid(_fiber_sum_grid(handle, a))
            rhs = math.exp(beta * float(cval)) * mu.integrate_grid(_fn_grid(a, carrier))
        else:
            lhs = mu.integrate_callable(lambda y: float(_bare_sum(handle, a, y)))
            rhs = mu.integrate_callable(
                lambda x: float(a.value(x)) * _psi_exp(psi, beta, x)
            )
        return lhs, rhs, bound
    if isinstance(mu, tr.UlamMeasure):
        lhs = float(_int_ulam_grid(mu, _fiber_sum_grid(handle, a)))
        cval = psi.constant_value()
        if cval is not None:
            carrier = _single_component(system)
            rhs = math.exp(beta * float(cval)) * float(
                _int_ulam_grid(mu, _fn_grid(a, carrier))
            )
        else:
            rhs = _int_ulam_callable(
                mu, lambda x: float(a.value(x)) * _psi_exp(psi, beta, x), pts=4
            )
        return lhs, rhs, bound
    lhs = _int_atomic(mu, lambda y: _bare_sum(handle, a, y))
    rhs = _int_atomic(mu, lambda x: float(a.value(x)) * _psi_exp(psi, beta, x))
    return lhs, rhs, bound


def weakly_conformal_residual(
    handle: tr.TransferHandle,
    psi: PotentialFunction,
    beta: float,
    mu: Measure,
    fns: Sequence[tr.TestFunction],
) -> ResidualReport:
    """Residuals of the unweighted eigen-measure identity on regular supports.

    Every test function must be compactly supported inside the regular
    region; SupportViolation names the first offender.  For truncated
    cascades each row reports the geometric tail bound next to its residual.
    """
    rows = []
    for i, a in enumerate(fns):
        _check_weak_support(handle, a)
        lhs, rhs, bound = _weak_pair(handle, psi, beta, mu, a)
        rows.append(ResidualRow(f"f{i}", lhs, rhs, abs(lhs - rhs), bound))
    return ResidualReport("weakly_conformal", tuple(rows))


# ---------------------------------------------------------------------------
# the temperature solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KMSCandidate:
    """An inverse temperature with its candidate eigen-measure."""

    beta: float
    mu: Measure
    kind: str
    note: str = ""

    def __post_init__(self):
        if self.kind not in ("conformal", "weakly_conformal"):
            raise ValidationError(f"unknown candidate kind {self.kind!r}")
        mass = total_mass_of(self.mu)
        if abs(mass - 1.0) > 1e-9:
            raise ValidationError(f"candidate measure has mass {mass!r}, not 1")


def _exp_integral(psi: PotentialFunction, beta: float, iv: RationalInterval) -> float:
    """Exact-closed-form integral of exp(-beta * energy) over an interval."""
    if iv.is_point:
        return 0.0
    total = 0.0
    for piv, m, c in psi.carrier.pieces:
        seg = iv.intersection(piv)
        if seg is None or seg.is_point:
            continue
        u, v = float(seg.lo), float(seg.hi)
        if beta == 0.0 or m == 0:
            total += (v - u) * math.exp(-beta * float(c))
            continue
        bm = beta * float(m)
        total += (math.exp(-beta * (float(m) * u + float(c))) - math.exp(-beta * (float(m) * v + float(c)))) / bm
    return total


def _ruelle_ulam(handle, psi: PotentialFunction, beta: float, bins: int) -> np.ndarray:
    """Bin matrix of the bare fiber-sum operator with weight exp(-beta*energy)."""
    sys_ = handle.system.ival
    comp = _single_component(handle.system)
    lo, hi = comp.lo, comp.hi
    w = (hi - lo) / bins
    k = np.zeros((bins, bins))
    fw = float(w)
    for br in sys_.branches:
        if br.slope == 0:
            continue
        for j in range(bins):
            binj = RationalInterval(lo + j * w, lo + (j + 1) * w, True, j == bins - 1)
            cell = binj.intersection(br.domain)
            if cell is None or cell.is_point:
                continue
            img = cell.affine_image(br.slope, br.intercept)
            i0 = max(int((img.lo - lo) // w), 0)
            i1 = min(int(-((lo - img.hi) // w)), bins - 1)
            for i in range(i0, i1 + 1):
                bini = RationalInterval(lo + i * w, lo + (i + 1) * w, True, i == bins - 1)
                ycell = img.intersection(bini)
                if ycell is None or ycell.is_point:
                    continue
                xcell = ycell.affine_image(1 / br.slope, -br.intercept / br.slope)
                val = _exp_integral(psi, beta, xcell)
                k[i, j] += abs(float(br.slope)) * val / fw
    return k


def _ruelle_graph(system: PartialSystem, psi: PotentialFunction, beta: float) -> np.ndarray:
    verts = system.gph.vertices
    idx = {v: i for i, v in enumerate(verts)}
    k = np.zeros((len(verts), len(verts)))
    wmap = psi.carrier.weight_map()
    for e in system.gph.edges:
        k[idx[e.src], idx[e.rng]] += math.exp(-beta * float(wmap[e.name]))
    return k


def _perron(k: np.ndarray, tol: float = 1e-13, iters: int = 20_000) -> tuple[float, np.ndarray]:
    """Perron root and left eigenvector by shifted power iteration."""
    n = k.shape[0]
    kt = k.T + np.eye(n)  # shift keeps oscillating spectra convergent
    u = np.full(n, 1.0 / n)
    r = 1.0
    for _ in range(iters):
        w = kt @ u
        s = float(w.sum())
        if s <= 0:
            return 0.0, u
        w /= s
        if float(np.abs(w - u).max()) <= tol and abs(s - r) <= tol * max(1.0, s):
            u, r = w, s
            break
        u, r = w, s
    return r - 1.0, u


def solve_conformal(
    handle: tr.TransferHandle,
    psi: PotentialFunction,
    bins: int = 256,
    bracket: tuple[float, float] = (0.1, 3.0),
    root_tol: float = 1e-10,
    max_iter: int = 200,
) -> KMSCandidate:
    """Find the inverse temperature where the Perron root crosses one.

    The discretized operator sends a to the fiber sum of exp(-beta*energy)*a,
    so an eigen-measure of the identity is a left Perron vector at eigenvalue
    one.  Bisection runs on the bracket; a flat root pegged at one returns a
    degenerate candidate, any other one-sided bracket raises NoSolution with
    the endpoint data.
    """
    system = handle.system
    if system.backend == "graph":
        def spectral(beta: float):
            return _perron(_ruelle_graph(system, psi, beta))
    else:
        cval = psi.constant_value()
        if cval is not None:
            k0 = _ruelle_ulam(handle, psi, 0.0, bins)
            r0, v0 = _perron(k0)
            c = float(cval)

            def spectral(beta: float):
                return r0 * math.exp(-beta * c), v0
        else:
            def spectral(beta: float):
                return _perron(_ruelle_ulam(handle, psi, beta, bins))

    b_lo, b_hi = float(bracket[0]), float(bracket[1])
    if b_hi <= b_lo:
        raise ValidationError("bracket must be increasing")
    r_lo, _ = spectral(b_lo)
    r_hi, _ = spectral(b_hi)
    flat = abs(r_lo - r_hi) <= 1e-10 * max(1.0, abs(r_lo))
    data = {"beta_lo": b_lo, "beta_hi": b_hi, "r_lo": r_lo, "r_hi": r_hi, "flat": flat}
    if flat:
        if abs(r_lo - 1.0) <= 1e-8:
            beta = 0.5 * (b_lo + b_hi)
            _, vec = spectral(beta)
            mu = _vector_measure(handle, vec, bins, psi, beta)
            return KMSCandidate(
                beta, mu, "conformal",
                note="degenerate: Perron root is one across the whole bracket",
            )
        raise NoSolution(
            f"Perron root is flat at {r_lo:.6g} across [{b_lo}, {b_hi}]", data
        )
    if (r_lo - 1.0) * (r_hi - 1.0) > 0:
        raise NoSolution(
            f"Perron root stays on one side of one: r({b_lo})={r_lo:.6g}, r({b_hi})={r_hi:.6g}",
            data,
        )
    lo_, hi_ = b_lo, b_hi
    f_lo = r_lo - 1.0
    beta = 0.5 * (lo_ + hi_)
    for _ in range(max_iter):
        beta = 0.5 * (lo_ + hi_)
        r_mid, _ = spectral(beta)
        f_mid = r_mid - 1.0
        if abs(f_mid) <= root_tol or (hi_ - lo_) <= 5e-15 * max(1.0, abs(beta)):
            break
        if f_lo * f_mid <= 0:
            hi_ = beta
        else:
            lo_, f_lo = beta, f_mid
    _, vec = spectral(beta)
    mu = _vector_measure(handle, vec, bins, psi, beta)
    return KMSCandidate(beta, mu, "conformal")


def _vector_measure(handle, vec: np.ndarray, bins: int, psi=None, beta: float = 0.0) -> Measure:
    """Exactly renormalized measure out of a nonnegative eigenvector.

    Graph vectors live on vertices; the atoms are pushed onto the length-one
    cylinders Z(e), whose masses the eigen-measure identity itself dictates:
    mass(Z(e)) is proportional to exp(-beta * energy(e)) times the weight of
    the source vertex.  That keeps every atom inside the shift domain.
    """
    system = handle.system
    if system.backend == "graph":
        gph = system.gph
        idx = {v: i for i, v in enumerate(gph.vertices)}
        wmap = psi.carrier.weight_map()
        raw = []
        for e in sorted(gph.edges, key=lambda e: e.name):
            m = Fraction(abs(float(vec[idx[e.src]]))) * Fraction(
                math.exp(-beta * float(wmap[e.name]))
            )
            raw.append((gph.path_point((e.name,)), m))
        total = sum((m for _, m in raw), Fraction(0))
        if total == 0:
            raise NoSolution("eigenvector collapsed to zero", {})
        return tr.AtomicMeasure("graph", tuple((p, m / total) for p, m in raw))
    weights = [Fraction(abs(float(x))) for x in vec]
    total = sum(weights, Fraction(0))
    if total == 0:
        raise NoSolution("eigenvector collapsed to zero", {})
    weights = [x / total for x in weights]
    comp = _single_component(system)
    w = (comp.hi - comp.lo) / bins
    return tr.UlamMeasure(comp.lo, comp.hi, tuple(m / w for m in weights))


def uniform_ulam(handle: tr.TransferHandle, bins: int) -> tr.UlamMeasure:
    comp = _single_component(handle.system)
    d = 1 / (comp.hi - comp.lo)
    return tr.UlamMeasure(comp.lo, comp.hi, (d,) * bins)


def tv_distance(mu1: tr.UlamMeasure, mu2: tr.UlamMeasure) -> Fraction:
    if (mu1.lo, mu1.hi, mu1.bins) != (mu2.lo, mu2.hi, mu2.bins):
        raise ValidationError("total variation needs matching bin grids")
    w = (mu1.hi - mu1.lo) / mu1.bins
    return sum(
        (abs(a - b) * w for a, b in zip(mu1.densities, mu2.densities)), Fraction(0)
    ) / 2


# ---------------------------------------------------------------------------
# state-level checks through the diagonal expectation
# ---------------------------------------------------------------------------


def _fn_call(f: Optional[tr.TestFunction]) -> Callable[[object], float]:
    if f is None:
        return lambda x: 1.0
    return lambda x: float(f.value(x))


def _lk(system, pot, g: Callable, k: int) -> Callable:
    if k == 0:
        return g

    def val(y):
        total = 0.0
        for x, w in dyn.preimages(system, pot, y, k):
            if w == 0:
                continue
            total += float(w) * g(x)
        return total

    return val


def _alphak(system, g: Callable, l: int) -> Callable:
    if l == 0:
        return g

    def val(x):
        try:
            z = dyn.orbit(system, x, l)[-1]
        except OutOfDomain:
            return 0.0
        return g(z)

    return val


def _as_parts(m) -> tuple[Callable, int, int, Callable]:
    if isinstance(m, TwistedMonomial):
        return (
            lambda x: m.left_value(x).real,
            m.mon.up,
            m.mon.down,
            lambda x: m.right_value(x).real,
        )
    return _fn_call(m.left), m.up, m.down, _fn_call(m.right)


def _g_diag_product(system, pot, p1, p2) -> Optional[Callable]:
    """Diagonal-expectation values of a monomial product, or None off balance."""
    a, n, m, b = p1
    c, k, l, d = p2

    def bc(x):
        return b(x) * c(x)

    if m >= k:
        up, down = n, m - k + l
        mid = _alphak(system, _lk(system, pot, bc, k), l)
    else:
        up, down = n + k - m, l
        mid = _alphak(system, _lk(system, pot, bc, m), n)
    if up != down:
        return None

    def g(x):
        try:
            w = dyn.cocycle(system, pot, up, x)
        except OutOfDomain:
            return 0.0
        if w == 0:
            return 0.0
        return float(w) * a(x) * mid(x) * d(x)

    return g


def _integrate_state(handle, mu: Measure, f: Callable, pts: int) -> float:
    if isinstance(mu, tr.AtomicMeasure):
        return _int_atomic(mu, f)
    if isinstance(mu, tr.UlamMeasure):
        return _int_ulam_callable(mu, f, pts)
    if isinstance(mu, CascadeMeasure):
        return mu.integrate_callable(f)
    raise ValidationError(f"cannot integrate against {type(mu).__name__}")


def _phi_pair(handle, mu, m1, m2, pts: int) -> float:
    g = _g_diag_product(handle.system, handle.potential, _as_parts(m1), _as_parts(m2))
    if g is None:
        return 0.0
    return _integrate_state(handle, mu, g, pts)


def kms_residual(
    handle: tr.TransferHandle,
    mu: Measure,
    beta: float,
    psi: PotentialFunction,
    m1: rep.Monomial,
    m2: rep.Monomial,
    pts: int = 1,
) -> float:
    """Gap in the exchange identity for one monomial pair.

    Both sides are states of monomial products: the product is folded to a
    single monomial, its diagonal expectation is evaluated pointwise with
    the exact cocycle weight, and the result is integrated against mu.
    """
    twisted = sigma_action(m2, complex(0.0, beta), psi)
    lhs = _phi_pair(handle, mu, m1, twisted, pts)
    rhs = _phi_pair(handle, mu, m2, m1, pts)
    return abs(lhs - rhs)


def kms_pair_values(
    handle: tr.TransferHandle,
    mu: Measure,
    beta: float,
    psi: PotentialFunction,
    m1: rep.Monomial,
    m2: rep.Monomial,
    pts: int = 1,
) -> tuple[float, float]:
    """Both sides of the exchange identity, for reporting."""
    twisted = sigma_action(m2, complex(0.0, beta), psi)
    lhs = _phi_pair(handle, mu, m1, twisted, pts)
    rhs = _phi_pair(handle, mu, m2, m1, pts)
    return lhs, rhs


def _battery_functions(handle, rng: random.Random, size: int) -> list[tr.TestFunction]:
    # wide supports on purpose: narrow bumps make almost every monomial
    # product vanish and the battery stops checking anything
    comp = _single_component(handle.system)
    lo, hi = comp.lo, comp.hi
    width = hi - lo
    out = [
        tr.TestFunction.const_on(comp, 1),
        tr.TestFunction.hat(comp.midpoint(), width / 2, 1),
        tr.TestFunction.affine_on(comp, 1 / width, -lo / width),
        tr.TestFunction.hat(lo + width / 4, width / 4, 1),
        tr.TestFunction.hat(lo + 3 * width / 4, width / 4, 1),
    ]
    while len(out) < size:
        r = width * Fraction(1, rng.choice((3, 4, 6)))
        c = lo + width * Fraction(rng.randrange(2, 15), 16)
        c = min(max(c, lo + r), hi - r)
        out.append(tr.TestFunction.hat(c, r, 1))
    return out


def kms_battery(
    handle: tr.TransferHandle,
    mu: Measure,
    beta: float,
    psi: PotentialFunction,
    count: int = 20,
    seed: int = 7,
    pts: int = 1,
) -> ResidualReport:
    """Exchange-identity residuals over a deterministic monomial battery.

    Roughly a third of the pairs are unbalanced so the report also witnesses
    that states kill off-diagonal terms; their rows carry both sides, which
    should individually vanish under a positive energy.
    """
    if handle.system.backend != "interval":
        raise ValidationError("the monomial battery is an interval-backend helper")
    rng = random.Random(seed)
    fns = _battery_functions(handle, rng, max(6, count // 2))
    maybe = fns + [None, None]
    powers_diag = ((1, 1), (2, 2), (0, 0), (1, 1))
    powers_off = ((1, 0), (0, 1), (2, 1))
    rows = []
    for i in range(count):
        mode = i % 4
        if mode == 2:
            # unbalanced product: the state must kill both sides outright
            up1, dn1 = powers_off[(i // 4) % 3]
            up2, dn2 = up1, dn1
        elif mode == 3:
            # transposed powers: balanced product with nontrivial sides
            up1, dn1 = powers_off[(i // 4) % 3]
            up2, dn2 = dn1, up1
        else:
            up1, dn1 = powers_diag[i % 4]
            up2, dn2 = powers_diag[(i + 1) % 4]
        m1 = rep.Monomial(rng.choice(fns), up1, dn1, rng.choice(maybe))
        m2 = rep.Monomial(rng.choice(fns), up2, dn2, rng.choice(maybe))
        lhs, rhs = kms_pair_values(handle, mu, beta, psi, m1, m2, pts)
        tag = "off" if (up1 + up2) != (dn1 + dn2) else "diag"
        rows.append(ResidualRow(f"pair{i}:{tag}", lhs, rhs, abs(lhs - rhs)))
    notes = ()
    if beta == 0 and psi.constant_value() == 0:
        notes = (
            "trivial twist at beta zero: the identity holds for any trace and certifies nothing",
        )
    return ResidualReport("kms", tuple(rows), notes)


def core_kms_check(
    handle: tr.TransferHandle,
    mu: Measure,
    beta: float,
    psi: PotentialFunction,
    a: tr.TestFunction,
    b: tr.TestFunction,
    n: int,
    pts: int = 1,
) -> float:
    """Residual of the balanced-monomial state formula at one level.

    Left side: the diagonal expectation of a T^n T*^n b integrated against
    mu.  Right side: mu of the n-fold fiber sum with the energy-damped
    weight exp(-beta * S_n) folded in.
    """
    system, pot = handle.system, handle.potential

    def lhs_fn(x):
        try:
            w = dyn.cocycle(system, pot, n, x)
        except OutOfDomain:
            return 0.0
        return float(w) * float(a.value(x)) * float(b.value(x))

    def rhs_fn(y):
        total = 0.0
        for x, w in dyn.preimages(system, pot, y, n):
            if w == 0:
                continue
            damp = math.exp(-beta * float(psi.birkhoff(x, n)))
            total += float(w) * damp * float(a.value(x)) * float(b.value(x))
        return total

    lhs = _integrate_state(handle, mu, lhs_fn, pts)
    rhs = _integrate_state(handle, mu, rhs_fn, pts)
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# designed test functions
# ---------------------------------------------------------------------------


def irregular_hat(handle: tr.TransferHandle, radius=Fraction(1, 4)) -> tr.TestFunction:
    """Hat of height one peaked at the unique irregular point.

    Strong and weak eigen-measure identities see atoms at that point very
    differently, so this is the canonical separating function.
    """
    irr = dyn.regular_set(handle.system, handle.potential).irregular_points
    if len(irr) != 1:
        raise ValidationError(f"need a unique irregular point, found {len(irr)}")
    return tr.TestFunction.hat(irr[0].point, radius, 1)


def hat_battery(region: IntervalSet, count: int) -> list[tr.TestFunction]:
    """Hats compactly supported inside a region, spread over its components."""
    out: list[tr.TestFunction] = []
    comps = [iv for iv in region.intervals if not iv.is_point]
    if not comps:
        return out
    i = 0
    while len(out) < count:
        iv = comps[i % len(comps)]
        k = i // len(comps) + 2
        width = iv.hi - iv.lo
        c = iv.lo + width * Fraction(2 * (i % (k + 1)) + 1, 2 * (k + 1))
        r = width / (2 * (k + 1))
        c, r = frac(c), frac(r)
        # keep the closed support strictly inside the open component
        if iv.lo < c - r and c + r < iv.hi:
            out.append(tr.TestFunction.hat(c, r, 1))
        elif iv.lo_closed and iv.hi_closed:
            out.append(tr.TestFunction.hat(iv.midpoint(), width / 4, 1))
        i += 1
        if i > 20 * count:
            break
    return out
