"""The weighted fiber-sum operator: validation, norm, application, duals.

``L(a)(y) = sum over phi(x) = y of rho(x) a(x)``.  Everything pointwise is
exact rational arithmetic.  Validation decides whether L maps functions
vanishing at infinity on the domain back into functions on the space, by
checking finitely many one-sided arrival conditions; the norm is the exact
supremum of the fiber sums.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

from . import dynamics as dyn
from .dynamics import PartialSystem, PathPoint, Potential
from .errors import NotValidated, SupportViolation, ValidationError
from .intervals import IntervalSet, RationalInterval, Rationalish, accumulates_at, frac, frac_str

# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """A finitely described function the operator can hit exactly.

    Interval backend: piecewise affine with implicit zero outside its
    pieces.  Graph backend: a finite combination of cylinder indicators.
    """

    backend: str
    pieces: tuple[tuple[RationalInterval, Fraction, Fraction], ...] = ()
    cylinders: tuple[tuple[PathPoint, Fraction], ...] = ()

    def __post_init__(self):
        if self.backend == "interval":
            pieces = tuple((iv, frac(m), frac(c)) for iv, m, c in self.pieces)
            object.__setattr__(self, "pieces", pieces)
            for (iva, ma, ca), (ivb, mb, cb) in itertools.combinations(pieces, 2):
                inter = iva.intersection(ivb)
                if inter is None:
                    continue
                if not inter.is_point:
                    raise ValidationError(f"function pieces overlap on {inter}")
                x0 = inter.lo
                if ma * x0 + ca != mb * x0 + cb:
                    raise ValidationError(f"function pieces disagree at {frac_str(x0)}")
        elif self.backend == "graph":
            cyls = tuple((p, frac(w)) for p, w in self.cylinders)
            object.__setattr__(self, "cylinders", cyls)
        else:
            raise ValidationError(f"unknown backend {self.backend!r}")

    # -- constructors --------------------------------------------------------

    @staticmethod
    def const_on(iv: RationalInterval, value: Rationalish) -> "TestFunction":
        return TestFunction("interval", pieces=((iv, Fraction(0), frac(value)),))

    @staticmethod
    def affine_on(iv: RationalInterval, slope, intercept) -> "TestFunction":
        return TestFunction("interval", pieces=((iv, frac(slope), frac(intercept)),))

    @staticmethod
    def hat(center: Rationalish, radius: Rationalish, height: Rationalish = 1) -> "TestFunction":
        """Continuous tent-shaped bump, zero outside (center-r, center+r)."""
        c, r, h = frac(center), frac(radius), frac(height)
        if r <= 0:
            raise ValidationError("hat radius must be positive")
        up = (RationalInterval(c - r, c), h / r, h - h * c / r)
        down = (RationalInterval(c, c + r), -h / r, h + h * c / r)
        return TestFunction("interval", pieces=(up, down))

    @staticmethod
    def indicator(p: PathPoint, coeff: Rationalish = 1) -> "TestFunction":
        return TestFunction("graph", cylinders=((p, frac(coeff)),))

    # -- evaluation ------------------------------------------------------------

    def value(self, x) -> Fraction:
        if self.backend == "interval":
            x = frac(x)
            vals = {m * x + c for iv, m, c in self.pieces if iv.contains(x)}
            if not vals:
                return Fraction(0)
            return vals.pop()
        p: PathPoint = x
        out = Fraction(0)
        for cyl, w in self.cylinders:
            if _cylinder_contains(cyl, p):
                out += w
            elif _is_proper_prefix(p.word, cyl.word):
                raise SupportViolation(
                    f"point {p} is coarser than cylinder {cyl}; cannot evaluate"
                )
        return out

    def support(self) -> IntervalSet:
        """Closure of the nonvanishing set (interval backend)."""
        if self.backend != "interval":
            raise ValidationError("support() is an interval-backend operation")
        out = IntervalSet.empty()
        for iv, m, c in self.pieces:
            if m == 0 and c == 0:
                continue
            out = out.union(IntervalSet.of(iv.closure()))
        return out

    def sup_norm_bound(self) -> Fraction:
        """Exact sup of |values| on pieces (interval), or sum of |coeffs|."""
        if self.backend == "interval":
            best = Fraction(0)
            for iv, m, c in self.pieces:
                for e in (iv.lo, iv.hi):
                    best = max(best, abs(m * e + c))
            return best
        return sum((abs(w) for _, w in self.cylinders), Fraction(0))

    def scaled(self, t: Rationalish) -> "TestFunction":
        t = frac(t)
        if self.backend == "interval":
            return TestFunction(
                "interval", pieces=tuple((iv, m * t, c * t) for iv, m, c in self.pieces)
            )
        return TestFunction(
            "graph", cylinders=tuple((p, w * t) for p, w in self.cylinders)
        )


def _cylinder_contains(cyl: PathPoint, p: PathPoint) -> bool:
    if len(cyl.word) > len(p.word):
        return False
    if p.word[: len(cyl.word)] != cyl.word:
        return False
    if not cyl.word:
        # vertex cylinder: all paths whose range is that vertex
        return p.rng == cyl.end
    return True


def _is_proper_prefix(shorter: tuple, longer: tuple) -> bool:
    return len(shorter) < len(longer) and longer[: len(shorter)] == shorter


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationDefect:
    """One failed arrival condition at (x0, y0, side).

    ``required`` is the one-sided fiber-sum limit; ``found`` is the weight the
    point actually contributes at y0.  ``fatal`` marks the cases where the
    mismatch breaks continuity of the operator output on the space.
    """

    x0: object
    y0: object
    side: int
    required: Fraction
    found: Fraction
    kind: str
    fatal: bool

    def __str__(self) -> str:
        sev = "defect" if self.fatal else "warning"
        sd = "below" if self.side < 0 else "above"
        return (
            f"{sev} [{self.kind}] at y0={frac_str(self.y0)} ({sd}), "
            f"x0={frac_str(self.x0)}: limit sum {frac_str(self.required)} "
            f"vs point value {frac_str(self.found)}"
        )


@dataclass(frozen=True)
class TransferValidation:
    valid: bool
    norm: Fraction
    defects: tuple[ValidationDefect, ...]
    warnings: tuple[str, ...] = ()


def validate(system: PartialSystem, pot: Potential) -> TransferValidation:
    """Exact validity scan: nonnegativity, norm, and arrival continuity.

    Only finitely many points can break continuity of the fiber sums: branch
    endpoints, weight breakpoints, and overrides.  At each such x0 in the
    domain, and for each side of each candidate image value y0, the one-sided
    limit of arriving weight must match the weight x0 actually contributes.
    A mismatch where x0 maps onto y0 is fatal; a mismatch at a value x0 does
    not map to is reported but survivable, because it only affects functions
    supported up against the seam.
    """
    if system.backend == "graph":
        gph = system.gph
        wmap = pot.weight_map()
        for e in gph.edges:
            if e.name not in wmap:
                raise ValidationError(f"edge {e.name} has no weight")
        norm = max(
            sum((wmap[e.name] for e in gph.prependable(v)), Fraction(0))
            for v in gph.vertices
        )
        return TransferValidation(valid=True, norm=norm, defects=())

    sys_ = system.ival
    delta = sys_.delta
    warnings: list[str] = []
    defects: list[ValidationDefect] = []

    cover = pot.coverage()
    if not delta.issubset(cover):
        missing = delta.difference(cover)
        return TransferValidation(
            valid=False,
            norm=Fraction(0),
            defects=(
                ValidationDefect(
                    missing.min(), missing.min(), 0, Fraction(0), Fraction(0), "uncovered", True
                ),
            ),
            warnings=(f"weight pieces do not cover the domain; missing {missing}",),
        )

    neg_pts: set[Fraction] = set()
    for iv, m, c in pot.pieces:
        neg_pts.update((iv.lo, iv.hi))
    neg_pts.update(x for x, _ in pot.overrides)
    for e in sorted(neg_pts):
        if delta.contains(e) and pot.value(e) < 0:
            defects.append(
                ValidationDefect(e, e, 0, Fraction(0), pot.value(e), "negative", True)
            )

    candidates: set[Fraction] = set()
    for x in sys_.critical_points():
        if delta.contains(x):
            candidates.add(x)
    for iv, _, _ in pot.pieces:
        for x in (iv.lo, iv.hi):
            if delta.contains(x):
                candidates.add(x)
    for x, _ in pot.overrides:
        if delta.contains(x):
            candidates.add(x)

    space = sys_.space
    for x0 in sorted(candidates):
        germs = sys_.germs_at(x0)
        own = sys_.phi(x0)
        values = {g.limit for g in germs} | {own}
        for y0 in sorted(values):
            for t in (-1, +1):
                if not accumulates_at(space, y0, side=t):
                    continue
                arriving = []
                for g in germs:
                    if g.limit != y0:
                        continue
                    slope = sys_.branches[g.branch_index].slope
                    t_g = g.side * (1 if slope > 0 else -1)
                    if t_g == t:
                        arriving.append(g)
                s_sum = Fraction(0)
                bad_side = False
                for g in arriving:
                    lim = pot.one_sided_limit(x0, g.side)
                    if lim is None:
                        bad_side = True
                    else:
                        s_sum += lim
                if bad_side:
                    defects.append(
                        ValidationDefect(x0, y0, t, Fraction(0), Fraction(0), "uncovered", True)
                    )
                    continue
                v = pot.value(x0) if own == y0 else Fraction(0)
                if s_sum != v:
                    fatal = own == y0
                    kind = "collision_sum" if len(arriving) >= 2 else (
                        "one_sided_jump" if arriving else "missing_arrival"
                    )
                    defects.append(ValidationDefect(x0, y0, t, s_sum, v, kind, fatal))

    norm = _exact_norm(sys_, pot)
    fatal = any(d.fatal for d in defects)
    for d in defects:
        if not d.fatal:
            warnings.append(str(d))
    return TransferValidation(
        valid=not fatal, norm=norm, defects=tuple(defects), warnings=tuple(warnings)
    )


def _exact_norm(sys_: dyn.IntervalSystem, pot: Potential) -> Fraction:
    """sup over the space of the fiber sums, exact.

    Between consecutive critical values the sum is affine, so two interior
    samples extrapolate exactly to the one-sided limits at the cell ends.
    """
    crit: set[Fraction] = set()
    for comp in sys_.space.intervals:
        crit.add(comp.lo)
        crit.add(comp.hi)
    for b in sys_.branches:
        img = b.image()
        crit.add(img.lo)
        crit.add(img.hi)
        for iv, _, _ in pot.pieces:
            for x in (iv.lo, iv.hi):
                if b.domain.contains(x):
                    crit.add(b.value(x))
        for x, _ in pot.overrides:
            if b.domain.contains(x):
                crit.add(b.value(x))

    def fiber_sum(y: Fraction) -> Fraction:
        return sum((pot.value(x) for x in sys_.fiber(y)), Fraction(0))

    best = Fraction(0)
    pts = sorted(c for c in crit if sys_.space.contains(c))
    for y0 in pts:
        best = max(best, fiber_sum(y0))
    for y0, y1 in zip(pts, pts[1:]):
        if y0 == y1:
            continue
        cell = RationalInterval(y0, y1, False, False)
        if not IntervalSet.of(cell).issubset(sys_.space):
            continue
        p = y0 + (y1 - y0) / 3
        q = y0 + 2 * (y1 - y0) / 3
        sp, sq = fiber_sum(p), fiber_sum(q)
        best = max(best, 2 * sp - sq, 2 * sq - sp)
    return best


# ---------------------------------------------------------------------------
# the operator handle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferHandle:
    system: PartialSystem
    potential: Potential
    validation: TransferValidation

    @staticmethod
    def create(system: PartialSystem, pot: Potential) -> "TransferHandle":
        return TransferHandle(system, pot, validate(system, pot))

    @property
    def norm(self) -> Fraction:
        return self.validation.norm

    def require_valid(self):
        if not self.validation.valid:
            raise NotValidated(
                "operator failed validation: "
                + "; ".join(str(d) for d in self.validation.defects if d.fatal)
            )


def apply(handle: TransferHandle, a: TestFunction, y, n: int = 1) -> Fraction:
    """Exact value of the n-fold weighted fiber sum of a at y."""
    if a.backend != handle.system.backend:
        raise ValidationError("function backend does not match the system")
    total = Fraction(0)
    for x, w in dyn.preimages(handle.system, handle.potential, y, n):
        if w == 0:
            continue
        total += w * a.value(x)
    return total


def compose_apply(handle: TransferHandle, a: TestFunction, y) -> Fraction:
    """a(phi(y)): the other half of the covariance pair."""
    return a.value(dyn.phi(handle.system, y))


def transfer_identity_check(
    handle: TransferHandle,
    a: TestFunction,
    b: TestFunction,
    points: Sequence,
) -> Fraction:
    """Max residual of L(a * (b o phi)) = L(a) * b over sample points."""
    worst = Fraction(0)
    for y in points:
        lhs = Fraction(0)
        for x, w in dyn.preimages(handle.system, handle.potential, y, 1):
            if w == 0:
                continue
            lhs += w * a.value(x) * b.value(dyn.phi(handle.system, x))
        rhs = apply(handle, a, y) * b.value(y)
        worst = max(worst, abs(lhs - rhs))
    return worst


# ---------------------------------------------------------------------------
# dual side: measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite signed combination of point masses."""

    backend: str
    atoms: tuple[tuple[object, Fraction], ...]

    def __post_init__(self):
        atoms = tuple((x, frac(m)) for x, m in self.atoms)
        object.__setattr__(self, "atoms", atoms)

    def total_mass(self) -> Fraction:
        return sum((m for _, m in self.atoms), Fraction(0))

    def integrate(self, a: TestFunction) -> Fraction:
        return sum((m * a.value(x) for x, m in self.atoms), Fraction(0))

    def merged(self) -> "AtomicMeasure":
        acc: dict = {}
        for x, m in self.atoms:
            acc[x] = acc.get(x, Fraction(0)) + m
        if self.backend == "interval":
            items = sorted(acc.items())
        else:
            items = sorted(acc.items(), key=lambda t: t[0].sort_key())
        return AtomicMeasure(self.backend, tuple((x, m) for x, m in items if m != 0))


@dataclass(frozen=True)
class UlamMeasure:
    """Density vector on a uniform bin grid over one space component."""

    lo: Fraction
    hi: Fraction
    densities: tuple[Fraction, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", frac(self.lo))
        object.__setattr__(self, "hi", frac(self.hi))
        object.__setattr__(self, "densities", tuple(frac(d) for d in self.densities))
        if self.hi <= self.lo or not self.densities:
            raise ValidationError("bad bin grid")

    @property
    def bins(self) -> int:
        return len(self.densities)

    def bin_interval(self, i: int) -> RationalInterval:
        k = self.bins
        w = (self.hi - self.lo) / k
        return RationalInterval(self.lo + i * w, self.lo + (i + 1) * w, True, i == k - 1)

    def total_mass(self) -> Fraction:
        w = (self.hi - self.lo) / self.bins
        return sum((d * w for d in self.densities), Fraction(0))


def dual_apply(
    handle: TransferHandle, mu: Union[AtomicMeasure, UlamMeasure]
) -> Union[AtomicMeasure, UlamMeasure]:
    """Push a measure through the dual: (L* mu)(a) = mu(L a), exactly."""
    if isinstance(mu, AtomicMeasure):
        atoms = []
        for y, m in mu.atoms:
            for x, w in dyn.preimages(handle.system, handle.potential, y, 1):
                atoms.append((x, m * w))
        return AtomicMeasure(mu.backend, tuple(atoms)).merged()
    mat = ulam_matrix(handle, mu.bins, mu.lo, mu.hi)
    k = mu.bins
    new = [
        sum((mat[i][j] * mu.densities[i] for i in range(k)), Fraction(0))
        for j in range(k)
    ]
    return UlamMeasure(mu.lo, mu.hi, tuple(new))


def integrate_potential(pot: Potential, s: IntervalSet) -> Fraction:
    """Exact integral of the weight over an interval set (overrides are null)."""
    total = Fraction(0)
    for iv, m, c in pot.pieces:
        cut = s.intersection(IntervalSet.of(iv))
        for piece in cut.intervals:
            a, b = piece.lo, piece.hi
            total += m * (b * b - a * a) / 2 + c * (b - a)
    return total


def ulam_matrix(
    handle: TransferHandle,
    bins: int,
    lo: Optional[Rationalish] = None,
    hi: Optional[Rationalish] = None,
) -> list[list[Fraction]]:
    """Exact bin-averaged matrix of the operator on a uniform grid.

    Entry [i][j] is the average over bin i of the operator applied to the
    indicator of bin j: integrate the weight over the pulled-back overlap,
    with the branch substitution contributing the |slope| factor.
    """
    if handle.system.backend != "interval":
        raise ValidationError("bin matrices are an interval-backend operation")
    sys_ = handle.system.ival
    if len(sys_.space.intervals) != 1:
        raise ValidationError("bin matrices need a single-component space")
    comp = sys_.space.intervals[0]
    lo = frac(lo) if lo is not None else comp.lo
    hi = frac(hi) if hi is not None else comp.hi
    if bins < 1 or hi <= lo:
        raise ValidationError("bad bin grid")
    w = (hi - lo) / bins
    grid = [RationalInterval(lo + i * w, lo + (i + 1) * w, True, i == bins - 1) for i in range(bins)]
    mat = [[Fraction(0)] * bins for _ in range(bins)]
    for b in sys_.branches:
        absm = abs(b.slope)
        for i, bi in enumerate(grid):
            pull = b.preimage_of(IntervalSet.of(bi))
            if pull.is_empty:
                continue
            for j, bj in enumerate(grid):
                cell = pull.intersection(IntervalSet.of(bj))
                if cell.is_empty:
                    continue
                mat[i][j] += integrate_potential(handle.potential, cell) * absm / w
    return mat
