"""Exact dynamics of piecewise-affine interval maps and boundary-path shifts.

Two backends share one operation set.  The interval backend models a partial
map ``phi`` given by finitely many affine branches on a compact union of
rational intervals; the graph backend models the left shift on the boundary
path space of a finite directed graph, truncated to cylinders of a bounded
word length.  Everything here is computed in exact rational arithmetic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

from .errors import (
    DepthExceeded,
    OutOfDomain,
    UnsupportedPotential,
    ValidationError,
)
from .intervals import (
    IntervalSet,
    RationalInterval,
    Rationalish,
    accumulates_at,
    frac,
    frac_str,
)

# ---------------------------------------------------------------------------
# interval backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineBranch:
    """One injective affine branch ``x -> slope*x + intercept`` on ``domain``."""

    domain: RationalInterval
    slope: Fraction
    intercept: Fraction

    def __post_init__(self):
        object.__setattr__(self, "slope", frac(self.slope))
        object.__setattr__(self, "intercept", frac(self.intercept))
        if self.slope == 0:
            raise ValidationError("branch slope must be nonzero")

    def value(self, x: Rationalish) -> Fraction:
        return self.slope * frac(x) + self.intercept

    def inverse_value(self, y: Rationalish) -> Fraction:
        return (frac(y) - self.intercept) / self.slope

    def image(self) -> RationalInterval:
        return self.domain.affine_image(self.slope, self.intercept)

    def image_of(self, s: IntervalSet) -> IntervalSet:
        pieces = []
        for iv in s.intersection(IntervalSet.of(self.domain)).intervals:
            pieces.append(iv.affine_image(self.slope, self.intercept))
        return IntervalSet(pieces)

    def preimage_of(self, s: IntervalSet) -> IntervalSet:
        inv = IntervalSet(iv.affine_image(1 / self.slope, -self.intercept / self.slope) for iv in s.intervals)
        return inv.intersection(IntervalSet.of(self.domain))


@dataclass(frozen=True)
class Germ:
    """A one-sided branch germ accumulating at ``point`` from ``side``."""

    branch_index: int
    point: Fraction
    side: int  # -1: domain points just below, +1: just above
    limit: Fraction  # extended branch value at the point


class IntervalSystem:
    """A partial map on a compact union of rational intervals.

    Construction enforces the structural invariants: branch domains sit in
    the space with pairwise disjoint interiors, overlapping endpoints agree,
    and every branch image lands back in the space.  Openness of the domain
    union is computed and reported, not assumed.
    """

    def __init__(self, space: IntervalSet, branches: Sequence[AffineBranch]):
        if space.is_empty:
            raise ValidationError("space must be nonempty")
        for iv in space.intervals:
            if not (iv.lo_closed and iv.hi_closed):
                raise ValidationError(f"space must be compact, got component {iv}")
        branches = tuple(branches)
        if not branches:
            raise ValidationError("at least one branch is required")
        for i, b in enumerate(branches):
            if not IntervalSet.of(b.domain).issubset(space):
                raise ValidationError(f"branch {i} domain {b.domain} leaves the space")
            if not IntervalSet.of(b.image()).issubset(space):
                raise ValidationError(f"branch {i} image {b.image()} leaves the space")
        for i, j in itertools.combinations(range(len(branches)), 2):
            bi, bj = branches[i], branches[j]
            inter = bi.domain.intersection(bj.domain)
            if inter is None:
                continue
            if not inter.is_point:
                raise ValidationError(f"branches {i} and {j} overlap on {inter}")
            x0 = inter.lo
            if bi.value(x0) != bj.value(x0):
                raise ValidationError(
                    f"branches {i} and {j} disagree at shared point {frac_str(x0)}"
                )
        self.space = space
        self.branches = branches
        self.delta = IntervalSet(b.domain for b in branches)
        self.delta_open = self.delta.is_open_in(space)

    # -- pointwise map -----------------------------------------------------

    def branch_indices_at(self, x: Rationalish) -> tuple[int, ...]:
        x = frac(x)
        return tuple(i for i, b in enumerate(self.branches) if b.domain.contains(x))

    def phi(self, x: Rationalish) -> Fraction:
        x = frac(x)
        for b in self.branches:
            if b.domain.contains(x):
                return b.value(x)
        raise OutOfDomain(x, 0)

    def in_domain(self, x: Rationalish) -> bool:
        return bool(self.branch_indices_at(x))

    def fiber(self, y: Rationalish) -> tuple[Fraction, ...]:
        """All exact solutions of phi(x) = y, deduplicated and sorted."""
        y = frac(y)
        out = set()
        for b in self.branches:
            x = b.inverse_value(y)
            if b.domain.contains(x):
                out.add(x)
        return tuple(sorted(out))

    # -- set dynamics --------------------------------------------------------

    def image_of(self, s: IntervalSet) -> IntervalSet:
        out = IntervalSet.empty()
        for b in self.branches:
            out = out.union(b.image_of(s))
        return out

    def preimage_of(self, s: IntervalSet) -> IntervalSet:
        out = IntervalSet.empty()
        for b in self.branches:
            out = out.union(b.preimage_of(s))
        return out

    # -- germs ---------------------------------------------------------------

    def germs_at(self, x0: Rationalish) -> tuple[Germ, ...]:
        """Branch germs accumulating at x0, at most one per side.

        Accumulation, not membership: the closure of a half-open domain
        still carries a germ at the open end.
        """
        x0 = frac(x0)
        out = []
        for i, b in enumerate(self.branches):
            d = b.domain
            if d.is_point:
                continue
            if d.lo < x0 <= d.hi:
                out.append(Germ(i, x0, -1, b.value(x0)))
            if d.lo <= x0 < d.hi:
                out.append(Germ(i, x0, +1, b.value(x0)))
        return tuple(sorted(out, key=lambda g: (g.side, g.branch_index)))

    def critical_points(self) -> tuple[Fraction, ...]:
        pts = set()
        for b in self.branches:
            pts.add(b.domain.lo)
            pts.add(b.domain.hi)
        return tuple(sorted(pts))


# ---------------------------------------------------------------------------
# graph backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphEdge:
    """Directed edge; paths read ``m1 m2 ...`` with s(m_i) = r(m_{i+1})."""

    name: str
    src: str
    rng: str


@dataclass(frozen=True)
class PathPoint:
    """A truncated point of the boundary path space.

    ``word`` lists the first edges of the path; the point stands for the
    cylinder of all boundary paths extending the word at the far end.  When
    the end vertex admits no continuation the cylinder is a single finite
    boundary path and the point is exact.  ``rng`` caches the range vertex
    (of the first edge, or the vertex itself for the empty word) so points
    are self-describing.
    """

    word: tuple[str, ...]
    end: str  # s(last edge), or the vertex itself for the empty word
    rng: str  # r(first edge), or the vertex itself for the empty word

    def __len__(self) -> int:
        return len(self.word)

    def __str__(self) -> str:
        return ("".join(self.word) or "()") + "@" + self.end

    def sort_key(self):
        return (len(self.word), self.word, self.end)


class GraphSystem:
    """Left shift on the boundary path space of a finite graph."""

    def __init__(self, vertices: Sequence[str], edges: Sequence[GraphEdge], truncation_depth: int = 8):
        vertices = tuple(vertices)
        edges = tuple(edges)
        if not vertices:
            raise ValidationError("graph needs at least one vertex")
        names = [e.name for e in edges]
        if len(set(names)) != len(names):
            raise ValidationError("edge names must be distinct")
        vs = set(vertices)
        for e in edges:
            if e.src not in vs or e.rng not in vs:
                raise ValidationError(f"edge {e.name} touches unknown vertex")
        if truncation_depth < 1:
            raise ValidationError("truncation depth must be positive")
        self.vertices = vertices
        self.edges = edges
        self.truncation_depth = truncation_depth
        self.edge_by_name = {e.name: e for e in edges}

    # continuations extend a path at its far end; prepends grow the fiber
    def continuations(self, v: str) -> tuple[GraphEdge, ...]:
        return tuple(e for e in self.edges if e.rng == v)

    def prependable(self, v: str) -> tuple[GraphEdge, ...]:
        return tuple(e for e in self.edges if e.src == v)

    def is_terminal(self, v: str) -> bool:
        return not self.continuations(v)

    # -- points ------------------------------------------------------------

    def vertex_point(self, v: str) -> PathPoint:
        if v not in self.vertices:
            raise ValidationError(f"unknown vertex {v}")
        return PathPoint((), v, v)

    def path_point(self, word: Sequence[str]) -> PathPoint:
        word = tuple(word)
        if not word:
            raise ValidationError("use vertex_point for the empty word")
        prev = None
        for name in word:
            e = self.edge_by_name.get(name)
            if e is None:
                raise ValidationError(f"unknown edge {name}")
            if prev is not None and prev.src != e.rng:
                raise ValidationError(f"word breaks at {name}: {prev.src} != {e.rng}")
            prev = e
        return PathPoint(word, prev.src, self.edge_by_name[word[0]].rng)

    def range_vertex(self, p: PathPoint) -> str:
        return p.rng

    def is_exact(self, p: PathPoint) -> bool:
        """True when the cylinder of p is a single finite boundary path."""
        return self.is_terminal(p.end)

    def is_singleton(self, p: PathPoint) -> bool:
        """True when exactly one boundary path extends p."""
        v, seen = p.end, set()
        while True:
            cont = self.continuations(v)
            if not cont:
                return True
            if len(cont) > 1:
                return False
            v = cont[0].src
            if v in seen:
                return True
            seen.add(v)

    def shift(self, p: PathPoint) -> PathPoint:
        if not p.word:
            raise OutOfDomain(p, 0)
        rest = p.word[1:]
        rng = self.edge_by_name[rest[0]].rng if rest else p.end
        return PathPoint(rest, p.end, rng)

    def fiber(self, p: PathPoint) -> tuple[PathPoint, ...]:
        v = self.range_vertex(p)
        return tuple(
            PathPoint((e.name,) + p.word, p.end, e.rng)
            for e in sorted(self.prependable(v), key=lambda e: e.name)
        )

    def words(self, n: int) -> tuple[PathPoint, ...]:
        """All admissible words of length exactly n, as cylinder points."""
        if n == 0:
            return tuple(self.vertex_point(v) for v in self.vertices)
        level = [self.path_point((e.name,)) for e in self.edges]
        for _ in range(n - 1):
            nxt = []
            for p in level:
                for e in sorted(self.continuations(p.end), key=lambda e: e.name):
                    nxt.append(PathPoint(p.word + (e.name,), e.src, p.rng))
            level = nxt
        return tuple(sorted(level, key=PathPoint.sort_key))

    def atoms(self, depth: int) -> tuple[PathPoint, ...]:
        """Partition of the boundary space at a word-length resolution.

        Atoms are the admissible length-``depth`` cylinders plus the finite
        boundary paths that stop earlier.
        """
        out = list(self.words(depth))
        for n in range(depth):
            for p in self.words(n):
                if self.is_exact(p):
                    out.append(p)
        return tuple(sorted(out, key=PathPoint.sort_key))

    def source_propagation(self, n: int) -> frozenset[str]:
        """Vertices of the form s(last edge of an admissible n-word)."""
        current = frozenset(self.vertices)
        for _ in range(n):
            current = frozenset(e.src for e in self.edges if e.rng in current)
        return current


# ---------------------------------------------------------------------------
# wrapper, potential, reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartialSystem:
    """Backend union: one partial dynamical system plus its iteration budget."""

    backend: str
    interval: Optional[IntervalSystem] = None
    graph: Optional[GraphSystem] = None
    depth_bound: int = 24
    name: Optional[str] = None

    def __post_init__(self):
        if self.backend not in ("interval", "graph"):
            raise ValidationError(f"unknown backend {self.backend!r}")
        if self.backend == "interval" and self.interval is None:
            raise ValidationError("interval backend needs an IntervalSystem")
        if self.backend == "graph" and self.graph is None:
            raise ValidationError("graph backend needs a GraphSystem")
        if self.depth_bound < 1:
            raise ValidationError("depth bound must be positive")

    @property
    def ival(self) -> IntervalSystem:
        if self.interval is None:
            raise ValidationError("operation needs the interval backend")
        return self.interval

    @property
    def gph(self) -> GraphSystem:
        if self.graph is None:
            raise ValidationError("operation needs the graph backend")
        return self.graph

    def check_depth(self, n: int):
        if n > self.depth_bound:
            raise DepthExceeded(n, self.depth_bound)


Point = Union[Fraction, PathPoint]


@dataclass(frozen=True)
class Potential:
    """Weight function for the preimage sums.

    Interval backend: finitely many affine pieces plus isolated point
    overrides.  Graph backend: one positive weight per edge; the weight of a
    path is the weight of its first edge.  ``allow_negative`` relaxes the
    sign constraints so the same container can carry signed energies.
    """

    backend: str
    pieces: tuple[tuple[RationalInterval, Fraction, Fraction], ...] = ()
    overrides: tuple[tuple[Fraction, Fraction], ...] = ()
    weights: tuple[tuple[str, Fraction], ...] = ()
    allow_negative: bool = False

    def __post_init__(self):
        if self.backend == "interval":
            pieces = tuple(
                (iv, frac(m), frac(c)) for iv, m, c in self.pieces
            )
            object.__setattr__(self, "pieces", pieces)
            if not self.allow_negative:
                for iv, m, c in pieces:
                    for end in (iv.lo, iv.hi):
                        if m * end + c < 0:
                            raise ValidationError(f"piece {iv} takes a negative value")
            for (iva, ma, ca), (ivb, mb, cb) in itertools.combinations(pieces, 2):
                inter = iva.intersection(ivb)
                if inter is None:
                    continue
                if not inter.is_point:
                    raise ValidationError(f"pieces overlap on {inter}")
                x0 = inter.lo
                if ma * x0 + ca != mb * x0 + cb and not self._has_override(x0):
                    raise ValidationError(
                        f"pieces disagree at {frac_str(x0)} without an override"
                    )
            overrides = tuple((frac(x), frac(v)) for x, v in self.overrides)
            object.__setattr__(self, "overrides", overrides)
            xs = [x for x, _ in overrides]
            if len(set(xs)) != len(xs):
                raise ValidationError("duplicate override points")
            for x, v in overrides:
                if v < 0 and not self.allow_negative:
                    raise ValidationError(f"override at {frac_str(x)} is negative")
                if not any(iv.contains(x) for iv, _, _ in pieces):
                    raise ValidationError(f"override at {frac_str(x)} lies outside all pieces")
        elif self.backend == "graph":
            weights = tuple((e, frac(w)) for e, w in self.weights)
            object.__setattr__(self, "weights", weights)
            if not self.allow_negative:
                for e, w in weights:
                    if w <= 0:
                        raise ValidationError(f"edge weight for {e} must be positive")
        else:
            raise ValidationError(f"unknown backend {self.backend!r}")

    def _has_override(self, x: Fraction) -> bool:
        return any(frac(p) == x for p, _ in self.overrides)

    # -- interval evaluation -------------------------------------------------

    def value(self, x: Rationalish) -> Fraction:
        x = frac(x)
        for p, v in self.overrides:
            if p == x:
                return v
        vals = {m * x + c for iv, m, c in self.pieces if iv.contains(x)}
        if not vals:
            raise ValidationError(f"potential undefined at {frac_str(x)}")
        if len(vals) > 1:
            raise ValidationError(f"potential ambiguous at {frac_str(x)}")
        return vals.pop()

    def one_sided_limit(self, x: Rationalish, side: int) -> Optional[Fraction]:
        """Limit of the piece values from one side; overrides do not matter."""
        x = frac(x)
        for iv, m, c in self.pieces:
            if iv.is_point:
                continue
            if side > 0 and iv.lo <= x < iv.hi:
                return m * x + c
            if side < 0 and iv.lo < x <= iv.hi:
                return m * x + c
        return None

    def coverage(self) -> IntervalSet:
        return IntervalSet(iv for iv, _, _ in self.pieces)

    def zero_set(self, within: IntervalSet) -> IntervalSet:
        """Exact set where the potential vanishes, inside ``within``."""
        zero = IntervalSet.empty()
        for iv, m, c in self.pieces:
            if m == 0:
                if c == 0:
                    zero = zero.union(IntervalSet.of(iv))
            else:
                root = -c / m
                if iv.contains(root):
                    zero = zero.union(IntervalSet.point(root))
        override_pts = IntervalSet.points(x for x, _ in self.overrides)
        zero = zero.difference(override_pts)
        zero = zero.union(IntervalSet.points(x for x, v in self.overrides if v == 0))
        return zero.intersection(within)

    # -- graph evaluation ------------------------------------------------------

    def weight_map(self) -> dict[str, Fraction]:
        return dict(self.weights)

    def edge_weight(self, name: str) -> Fraction:
        for e, w in self.weights:
            if e == name:
                return w
        raise ValidationError(f"no weight for edge {name}")


def rho(system: PartialSystem, pot: Potential, x: Point) -> Fraction:
    """Exact weight of one point."""
    if system.backend == "interval":
        return pot.value(x)
    p: PathPoint = x
    if not p.word:
        raise OutOfDomain(p, 0)
    return pot.edge_weight(p.word[0])


def phi(system: PartialSystem, x: Point) -> Point:
    """One forward step of the partial map."""
    if system.backend == "interval":
        return system.ival.phi(x)
    return system.gph.shift(x)


def fiber(system: PartialSystem, y: Point) -> tuple[Point, ...]:
    if system.backend == "interval":
        return system.ival.fiber(y)
    return system.gph.fiber(y)


@dataclass(frozen=True)
class IrregularPoint:
    point: Point
    reason: str  # primary reason
    reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class RegionReport:
    """Where the weight is positive and where the data is regular."""

    backend: str
    delta: object
    delta_pos: object
    delta_reg: object
    irregular_points: tuple[IrregularPoint, ...]
    delta_open: bool
    notes: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphSetDescription:
    """Union of truncated cylinders, used for graph-side set reports."""

    cylinders: tuple[PathPoint, ...]
    note: str = ""

    def __str__(self) -> str:
        body = ", ".join(str(c) for c in self.cylinders)
        return "{" + body + "}" + (f"  ({self.note})" if self.note else "")


def iterate_domain(system: PartialSystem, n: int):
    """Exact n-step domain: all points admitting n forward steps."""
    if n < 0:
        raise ValidationError("n must be nonnegative")
    system.check_depth(n)
    if system.backend == "interval":
        sys_ = system.ival
        current = sys_.space
        for _ in range(n):
            current = sys_.preimage_of(current)
        return current
    gph = system.gph
    return GraphSetDescription(gph.words(n), note=f"paths of length >= {n}")


def preimages(
    system: PartialSystem,
    pot: Potential,
    y: Point,
    n: int,
    drop_zero: bool = False,
) -> tuple[tuple[Point, Fraction], ...]:
    """The n-step fiber of y with exact cocycle weights.

    Weights multiply along the forward orbit: a returned pair ``(x, w)``
    satisfies ``phi^n(x) = y`` and ``w = rho_n(x)``.
    """
    if n < 0:
        raise ValidationError("n must be nonnegative")
    system.check_depth(n)
    level: list[tuple[Point, Fraction]] = [(y if system.backend == "graph" else frac(y), Fraction(1))]
    for _ in range(n):
        nxt = []
        for z, w in level:
            for x in fiber(system, z):
                nxt.append((x, rho(system, pot, x) * w))
        level = nxt
    if drop_zero:
        level = [(x, w) for x, w in level if w != 0]
    key = (lambda t: t[0]) if system.backend == "interval" else (lambda t: t[0].sort_key())
    return tuple(sorted(level, key=key))


def cocycle(system: PartialSystem, pot: Potential, n: int, x: Point) -> Fraction:
    """Product of weights along the first n forward steps of x."""
    if n < 0:
        raise ValidationError("n must be nonnegative")
    system.check_depth(n)
    out = Fraction(1)
    z = x if system.backend == "graph" else frac(x)
    for step in range(n):
        try:
            nxt = phi(system, z)
        except OutOfDomain:
            raise OutOfDomain(x, step) from None
        out *= rho(system, pot, z)
        z = nxt
    return out


def orbit(system: PartialSystem, x: Point, n: int) -> tuple[Point, ...]:
    """x, phi(x), ..., phi^n(x); raises OutOfDomain when the orbit leaves."""
    out = [x if system.backend == "graph" else frac(x)]
    for step in range(n):
        try:
            out.append(phi(system, out[-1]))
        except OutOfDomain:
            raise OutOfDomain(x, step) from None
    return tuple(out)


# -- regular region ---------------------------------------------------------

_REASON_ORDER = ("zero_potential", "not_locally_injective", "rho_discontinuous")


def regular_set(system: PartialSystem, pot: Potential) -> RegionReport:
    """Classify the domain into positive and regular parts.

    A point is regular when its weight is positive, the weight is continuous
    there, and the map is locally injective there.  On the interval backend
    only finitely many candidate points can fail, and each failure is
    reported with its reasons.
    """
    if system.backend == "graph":
        gph = system.gph
        d = GraphSetDescription(gph.words(1), note="all paths of length >= 1")
        return RegionReport(
            backend="graph",
            delta=d,
            delta_pos=d,
            delta_reg=d,
            irregular_points=(),
            delta_open=True,
            notes=("shift on cylinders is everywhere locally injective",),
        )

    sys_ = system.ival
    space = sys_.space
    delta = sys_.delta
    notes: list[str] = []
    if not sys_.delta_open:
        notes.append("domain union is not open in the space; regular set restricted to its interior")
    cover = pot.coverage()
    if not delta.issubset(cover):
        raise ValidationError(
            f"potential pieces do not cover the domain; missing {delta.difference(cover)}"
        )

    zero = pot.zero_set(delta)
    delta_pos = delta.difference(zero)
    for comp in zero.nondegenerate().intervals:
        notes.append(f"weight vanishes on {comp}")

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
    for x in zero.isolated_points():
        candidates.add(x)

    irregular: list[IrregularPoint] = []
    bad_points: list[Fraction] = []
    for x in sorted(candidates):
        reasons = []
        if pot.value(x) == 0:
            reasons.append("zero_potential")
        if not _locally_injective(sys_, x):
            reasons.append("not_locally_injective")
        if not _rho_continuous_at(sys_, pot, x):
            reasons.append("rho_discontinuous")
        if reasons:
            reasons.sort(key=_REASON_ORDER.index)
            irregular.append(IrregularPoint(x, reasons[0], tuple(reasons)))
            bad_points.append(x)

    delta_reg = delta_pos.difference(IntervalSet.points(bad_points))
    delta_reg = delta_reg.intersection(delta.interior_in(space))
    if not delta_reg.is_open_in(space):
        # conditions are pointwise-open, so this would indicate a missed candidate
        raise ValidationError("internal: computed regular set is not open")
    return RegionReport(
        backend="interval",
        delta=delta,
        delta_pos=delta_pos,
        delta_reg=delta_reg,
        irregular_points=tuple(irregular),
        delta_open=sys_.delta_open,
        notes=tuple(notes),
    )


def _locally_injective(sys_: IntervalSystem, x0: Fraction) -> bool:
    germs = sys_.germs_at(x0)
    left = [g for g in germs if g.side < 0]
    right = [g for g in germs if g.side > 0]
    if not left or not right:
        return True
    gl, gr = left[0], right[0]
    if gl.branch_index == gr.branch_index:
        return True
    if gl.limit != gr.limit:
        return True
    ml = sys_.branches[gl.branch_index].slope
    mr = sys_.branches[gr.branch_index].slope
    # equal limits: a fold happens exactly when both sides cover the same
    # side of the common value, i.e. the slopes have opposite signs
    return (ml > 0) == (mr > 0)


def _rho_continuous_at(sys_: IntervalSystem, pot: Potential, x0: Fraction) -> bool:
    v = pot.value(x0)
    for side in (-1, +1):
        if accumulates_at(sys_.delta, x0, side=side):
            lim = pot.one_sided_limit(x0, side)
            if lim is None or lim != v:
                return False
    return True


# -- power system -------------------------------------------------------------


@dataclass(frozen=True)
class CompositeBranch:
    """An affine branch of phi^n remembering which branches were chained."""

    domain: RationalInterval
    slope: Fraction
    intercept: Fraction
    chain: tuple[int, ...]

    def value(self, x: Rationalish) -> Fraction:
        return self.slope * frac(x) + self.intercept

    def as_branch(self) -> AffineBranch:
        return AffineBranch(self.domain, self.slope, self.intercept)

    def image(self) -> RationalInterval:
        return self.domain.affine_image(self.slope, self.intercept)


def composite_branches(sys_: IntervalSystem, n: int) -> tuple[CompositeBranch, ...]:
    """All affine branches of the n-fold composition, with exact domains."""
    if n < 1:
        raise ValidationError("composition order must be >= 1")
    current = [
        CompositeBranch(b.domain, b.slope, b.intercept, (i,))
        for i, b in enumerate(sys_.branches)
    ]
    for _ in range(n - 1):
        nxt = []
        for comp in current:
            for j, b in enumerate(sys_.branches):
                # restrict comp.domain to points whose image enters b.domain
                pull = IntervalSet.of(comp.domain).intersection(
                    IntervalSet.of(
                        b.domain.affine_image(1 / comp.slope, -comp.intercept / comp.slope)
                    )
                )
                for piece in pull.intervals:
                    nxt.append(
                        CompositeBranch(
                            piece,
                            b.slope * comp.slope,
                            b.slope * comp.intercept + b.intercept,
                            comp.chain + (j,),
                        )
                    )
        current = nxt
    return tuple(current)


def power(system: PartialSystem, pot: Potential, n: int) -> tuple[PartialSystem, Potential]:
    """The n-step system with its exact chained weight.

    The chained weight multiplies n weights along the orbit, so it stays in
    the affine class only when at most one factor per composite branch piece
    is non-constant; otherwise UnsupportedPotential is raised.
    """
    if n < 1:
        raise ValidationError("power order must be >= 1")
    system.check_depth(n)
    if system.backend == "graph":
        gph = system.gph
        wmap = pot.weight_map()
        new_edges = []
        new_weights = []
        for p in gph.words(n):
            name = ".".join(p.word)
            new_edges.append(GraphEdge(name, p.end, gph.range_vertex(p)))
            w = Fraction(1)
            for e in p.word:
                w *= wmap[e]
            new_weights.append((name, w))
        g2 = GraphSystem(gph.vertices, new_edges, max(1, gph.truncation_depth // n))
        return (
            PartialSystem("graph", graph=g2, depth_bound=system.depth_bound, name=None),
            Potential("graph", weights=tuple(new_weights)),
        )

    sys_ = system.ival
    comps = composite_branches(sys_, n)
    new_sys = IntervalSystem(sys_.space, [c.as_branch() for c in comps])

    # potential pieces: subdivide each composite domain so that every chained
    # factor runs through a single affine piece
    pieces: list[tuple[RationalInterval, Fraction, Fraction]] = []
    override_pts: set[Fraction] = set()
    for comp in comps:
        if comp.domain.is_point:
            override_pts.add(comp.domain.lo)
            continue
        cuts: set[Fraction] = {comp.domain.lo, comp.domain.hi}
        slope_k, icpt_k = Fraction(1), Fraction(0)  # phi^k as affine map on comp.domain
        for k in range(n):
            if k > 0:
                b = sys_.branches[comp.chain[k - 1]]
                slope_k, icpt_k = b.slope * slope_k, b.slope * icpt_k + b.intercept
            for iv, _, _ in pot.pieces:
                for endpoint in (iv.lo, iv.hi):
                    x = (endpoint - icpt_k) / slope_k
                    if comp.domain.contains(x):
                        cuts.add(x)
            for x0, _ in pot.overrides:
                x = (x0 - icpt_k) / slope_k
                if comp.domain.contains(x):
                    override_pts.add(x)
        ordered = sorted(cuts)
        for lo, hi in zip(ordered, ordered[1:]):
            mid = (lo + hi) / 2
            # factor k: weight of phi^k(x), affine in x on this cell
            factors = []
            slope_k, icpt_k = Fraction(1), Fraction(0)
            for k in range(n):
                if k > 0:
                    b = sys_.branches[comp.chain[k - 1]]
                    slope_k, icpt_k = b.slope * slope_k, b.slope * icpt_k + b.intercept
                xk = slope_k * mid + icpt_k
                piece = _piece_at(pot, xk)
                if piece is None:
                    raise ValidationError(f"weight undefined along the orbit at {frac_str(xk)}")
                m, c = piece
                factors.append((m * slope_k, m * icpt_k + c))
            nonconst = [f for f in factors if f[0] != 0]
            if len(nonconst) > 1:
                raise UnsupportedPotential(
                    "chained weight leaves the affine class on "
                    f"{RationalInterval(lo, hi)}; {len(nonconst)} non-constant factors"
                )
            m_total, c_total = Fraction(0), Fraction(1)
            for fm, fc in factors:
                if fm == 0:
                    c_total *= fc
                else:
                    m_total, c_total = fm * c_total, fc * c_total
            lo_closed = comp.domain.contains(lo)
            hi_closed = comp.domain.contains(hi)
            pieces.append((RationalInterval(lo, hi, lo_closed, hi_closed), m_total, c_total))

    overrides = []
    ps = PartialSystem(
        "interval", interval=new_sys, depth_bound=system.depth_bound, name=None
    )
    for x in sorted(override_pts):
        if not new_sys.delta.contains(x):
            continue
        val = cocycle(system, pot, n, x)
        if any(iv.contains(x) for iv, _, _ in pieces):
            overrides.append((x, val))
        else:
            pieces.append((RationalInterval.point(x), Fraction(0), val))
    new_pot = Potential("interval", pieces=tuple(pieces), overrides=tuple(overrides))
    return ps, new_pot


def _piece_at(pot: Potential, x: Fraction) -> Optional[tuple[Fraction, Fraction]]:
    for iv, m, c in pot.pieces:
        if iv.contains(x):
            return (m, c)
    return None


def regular_core(system: PartialSystem, pot: Potential, n: int) -> IntervalSet:
    """Points whose first n steps stay in the regular set (interval backend)."""
    report = regular_set(system, pot)
    reg: IntervalSet = report.delta_reg
    out = iterate_domain(system, n)
    current = reg
    for _ in range(n - 1):
        current = system.ival.preimage_of(current).intersection(reg)
    return out.intersection(current) if n >= 1 else out


# -- essential domain -----------------------------------------------------------


def essential_domain(system: PartialSystem, depth: int):
    """Intersection of n-step domains with their n-step images, up to depth.

    Returns (set, stabilized, stabilized_at).
    """
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    system.check_depth(depth)
    if system.backend == "interval":
        sys_ = system.ival
        partial = None
        stabilized_at = None
        for n in range(1, depth + 1):
            dn = iterate_domain(system, n)
            img = dn
            for _ in range(n):
                img = sys_.image_of(img)
            fn = dn.intersection(img)
            new = fn if partial is None else partial.intersection(fn)
            if partial is not None and new == partial and stabilized_at is None:
                stabilized_at = n - 1
            elif new != partial:
                stabilized_at = None
            partial = new
        return partial, stabilized_at is not None, stabilized_at

    gph = system.gph
    depth_atoms = gph.atoms(depth)
    partial = None
    stabilized_at = None
    for n in range(1, depth + 1):
        sn = gph.source_propagation(n)
        fn = frozenset(
            a for a in depth_atoms if len(a.word) >= n and gph.range_vertex(a) in sn
        )
        new = fn if partial is None else partial & fn
        if partial is not None and new == partial and stabilized_at is None:
            stabilized_at = n - 1
        elif new != partial:
            stabilized_at = None
        partial = new
    desc = GraphSetDescription(tuple(sorted(partial, key=PathPoint.sort_key)))
    return desc, stabilized_at is not None, stabilized_at
