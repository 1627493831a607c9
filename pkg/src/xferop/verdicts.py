"""Bounded-depth decision procedures for dynamical properties.

Each checker returns a three-valued Verdict.  Holds and Fails always carry a
certificate that can be re-verified independently (an identity window, an
invariant open set, a contracting tuple, a cycle).  Unknown means the search
exhausted its depth budget without deciding; it never masquerades as Fails
unless a structural obstruction is proven.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import dynamics as dyn
from . import transfer as tr
from .dynamics import PartialSystem, PathPoint, Potential
from .errors import ValidationError
from .intervals import IntervalSet, RationalInterval, frac
from .rep import OrbitBasis

PROPERTIES = (
    "TopFree",
    "Minimal",
    "Contracting",
    "Simple",
    "PurelyInfiniteSimple",
    "OneCircuit",
    "PositiveEnergy",
)
STATUSES = ("Holds", "Fails", "Unknown")


@dataclass(frozen=True)
class Verdict:
    property: str
    status: str
    certificate: object = None
    depth: int = 0
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.property not in PROPERTIES:
            raise ValidationError(f"unknown property {self.property}")
        if self.status not in STATUSES:
            raise ValidationError(f"unknown status {self.status}")
        if self.status == "Unknown":
            if self.certificate is not None:
                raise ValidationError("Unknown carries only the exhausted depth")
        elif self.certificate is None:
            raise ValidationError(f"{self.status} requires a certificate")

    @property
    def holds(self) -> bool:
        return self.status == "Holds"

    @property
    def fails(self) -> bool:
        return self.status == "Fails"

    def __str__(self) -> str:
        return f"{self.property}: {self.status} (depth {self.depth})"


# -- certificate payloads ---------------------------------------------------


@dataclass(frozen=True)
class PeriodicWindow:
    """A nondegenerate interval on which some n-fold composite is the identity."""

    n: int
    window: RationalInterval
    chain: tuple[int, ...]


@dataclass(frozen=True)
class FreeScan:
    """Search log for a Holds(TopFree) verdict: what was exhausted."""

    depth: int
    branches_scanned: int
    cycles: tuple[tuple[tuple[str, ...], str], ...] = ()


@dataclass(frozen=True)
class CycleNoExit:
    edges: tuple[str, ...]


@dataclass(frozen=True)
class InvariantSet:
    """A nontrivial open set closed under the forward and backward moves."""

    region: object  # IntervalSet or tuple[PathPoint, ...]


@dataclass(frozen=True)
class MinimalScan:
    depth: int
    seeds: int
    iterations: int


@dataclass(frozen=True)
class ContractingTuple:
    region: object  # V
    pieces: tuple[tuple[object, int], ...]  # (U_k, n_k)


@dataclass(frozen=True)
class ContractingCert:
    x0: object
    orbit_points: int
    resolution: Fraction
    scales: tuple[ContractingTuple, ...]


@dataclass(frozen=True)
class Obstruction:
    """A structural reason a property fails, re-checkable from the system."""

    kind: str
    detail: object = None


@dataclass(frozen=True)
class ContractingReport:
    ok: bool
    violated: Optional[str] = None
    detail: str = ""


# -- shared geometry --------------------------------------------------------


def _affine_preimage(s: IntervalSet, m: Fraction, c: Fraction) -> IntervalSet:
    """Solve m*x + c in s for x, exactly."""
    if m == 0:
        raise ValidationError("degenerate affine map")
    return IntervalSet.of(*[iv.affine_image(1 / m, -c / m) for iv in s.intervals])


def _image_iter(sys_: dyn.IntervalSystem, s: IntervalSet, n: int) -> IntervalSet:
    for _ in range(n):
        s = sys_.image_of(s)
    return s


def _interval_regions(system: PartialSystem, pot: Potential):
    report = dyn.regular_set(system, pot)
    sys_ = system.ival
    return sys_, sys_.space, sys_.delta, report.delta_pos, report.delta_reg


def _live_edges(gph: dyn.GraphSystem, pot: Potential) -> tuple[dyn.GraphEdge, ...]:
    return tuple(e for e in gph.edges if pot.edge_weight(e.name) > 0)


def _live_continuations(gph, pot, v: str) -> tuple[dyn.GraphEdge, ...]:
    return tuple(e for e in gph.continuations(v) if pot.edge_weight(e.name) > 0)


def _live_prependable(gph, pot, v: str) -> tuple[dyn.GraphEdge, ...]:
    return tuple(e for e in gph.prependable(v) if pot.edge_weight(e.name) > 0)


def _simple_cycles(gph: dyn.GraphSystem, pot: Potential) -> tuple[tuple[str, ...], ...]:
    """Simple cycles of the live walk digraph v -> src(e), e in continuations(v)."""
    order = {v: i for i, v in enumerate(sorted(gph.vertices))}
    cycles: list[tuple[str, ...]] = []

    def visit(start: str, v: str, path: list[str], seen: set[str]):
        for e in _live_continuations(gph, pot, v):
            w = e.src
            if w == start:
                cycles.append(tuple(path + [e.name]))
            elif order[w] > order[start] and w not in seen:
                visit(start, w, path + [e.name], seen | {w})

    for start in sorted(gph.vertices, key=order.get):
        visit(start, start, [], {start})
    return tuple(cycles)


def _cycle_exit(gph, pot, cycle: tuple[str, ...]) -> Optional[str]:
    """An alternative live continuation at some vertex of the cycle, if any."""
    for name in cycle:
        v = gph.edge_by_name[name].rng
        for e in _live_continuations(gph, pot, v):
            if e.name != name:
                return e.name
    return None


# -- cylinder-set arithmetic (graph backend) --------------------------------


def _cyl_prefix(b: PathPoint, a: PathPoint) -> bool:
    """Whether the cylinder of ``a`` sits inside the cylinder of ``b``."""
    if not b.word:
        return a.rng == b.rng
    return a.word[: len(b.word)] == b.word


def _cyl_children(gph: dyn.GraphSystem, c: PathPoint) -> tuple[PathPoint, ...]:
    return tuple(
        PathPoint(c.word + (e.name,), e.src, c.rng if c.word else e.rng)
        for e in sorted(gph.continuations(c.end), key=lambda e: e.name)
    )


def _cyl_covered(gph, c: PathPoint, cover: Sequence[PathPoint]) -> bool:
    if not cover:
        return False
    if any(_cyl_prefix(b, c) for b in cover):
        return True
    if len(c.word) >= max(len(b.word) for b in cover):
        return False
    kids = _cyl_children(gph, c)
    if not kids:
        return False
    return all(_cyl_covered(gph, k, cover) for k in kids)


def _cylset_subset(gph, a: Sequence[PathPoint], b: Sequence[PathPoint]) -> bool:
    return all(_cyl_covered(gph, c, b) for c in a)


def _cylset_equal(gph, a, b) -> bool:
    return _cylset_subset(gph, a, b) and _cylset_subset(gph, b, a)


def _cylset_union(gph, *parts) -> tuple[PathPoint, ...]:
    pool: list[PathPoint] = []
    for part in parts:
        pool.extend(part)
    pool.sort(key=PathPoint.sort_key)
    out: list[PathPoint] = []
    for c in pool:
        if not any(_cyl_prefix(b, c) for b in out):
            out.append(c)
    return tuple(out)


def _cyls_disjoint(gph, a: Sequence[PathPoint], b: Sequence[PathPoint]) -> bool:
    for c in a:
        for d in b:
            if _cyl_prefix(c, d) or _cyl_prefix(d, c):
                return False
    return True


def _graph_space(gph) -> tuple[PathPoint, ...]:
    return tuple(gph.vertex_point(v) for v in sorted(gph.vertices))


def _graph_pos_refine(gph, pot, cyls) -> tuple[PathPoint, ...]:
    """Intersect a cylinder set with the positive-weight domain."""
    out = []
    for c in cyls:
        parts = _cyl_children(gph, c) if not c.word else (c,)
        for p in parts:
            if p.word and pot.edge_weight(p.word[0]) > 0:
                out.append(p)
    return tuple(out)


def _graph_image(gph, cyls) -> tuple[PathPoint, ...]:
    out = []
    for c in cyls:
        if c.word:
            out.append(gph.shift(c))
    return tuple(out)


def _graph_preimage(gph, pot, cyls, live: bool) -> tuple[PathPoint, ...]:
    out = []
    for c in cyls:
        edges = gph.prependable(c.rng)
        for e in sorted(edges, key=lambda e: e.name):
            if live and pot.edge_weight(e.name) == 0:
                continue
            out.append(PathPoint((e.name,) + c.word, c.end if c.word else e.src, e.rng))
    return tuple(out)


def _graph_shift_n(gph, cyls, n: int) -> tuple[PathPoint, ...]:
    """n-fold shift image of a cylinder set, refining short cylinders first."""
    current = list(cyls)
    for _ in range(n):
        nxt = []
        for c in current:
            if not c.word:
                for k in _cyl_children(gph, c):
                    if k.word:
                        nxt.append(gph.shift(k))
            else:
                nxt.append(gph.shift(c))
        current = nxt
    return tuple(current)


def _as_cylset(u) -> tuple[PathPoint, ...]:
    if isinstance(u, PathPoint):
        return (u,)
    if isinstance(u, dyn.GraphSetDescription):
        return tuple(u.points)
    return tuple(u)


# -- topological freeness ---------------------------------------------------


def check_top_free(system: PartialSystem, pot: Potential, depth: int = 8) -> Verdict:
    """Scan for periodic behaviour with nonempty interior over the regular set."""
    system.check_depth(depth)
    if system.backend == "graph":
        gph = system.gph
        cycles = _simple_cycles(gph, pot)
        witnessed = []
        for cyc in cycles:
            ex = _cycle_exit(gph, pot, cyc)
            if ex is None:
                return Verdict("TopFree", "Fails", CycleNoExit(cyc), depth)
            witnessed.append((cyc, ex))
        return Verdict(
            "TopFree", "Holds", FreeScan(depth, len(cycles), tuple(witnessed)), depth
        )

    sys_, space, delta, pos, reg = _interval_regions(system, pot)
    scanned = 0
    for n in range(1, depth + 1):
        for comp in dyn.composite_branches(sys_, n):
            scanned += 1
            if comp.slope != 1 or comp.intercept != 0:
                continue
            stay = IntervalSet.of(comp.domain)
            m, c = Fraction(1), Fraction(0)
            for idx in comp.chain:
                stay = stay.intersection(_affine_preimage(reg, m, c))
                b = sys_.branches[idx]
                m, c = b.slope * m, b.slope * c + b.intercept
            window = stay.nondegenerate()
            if not window.is_empty:
                cert = PeriodicWindow(n, window.intervals[0], comp.chain)
                return Verdict("TopFree", "Fails", cert, depth)
    return Verdict("TopFree", "Holds", FreeScan(depth, scanned), depth)


def verify_periodic_window(system: PartialSystem, pot: Potential, cert: PeriodicWindow) -> bool:
    """Replay a Fails(TopFree) certificate pointwise and on the regular set."""
    _, _, _, _, reg = _interval_regions(system, pot)
    window = IntervalSet.of(cert.window)
    if window.nondegenerate().is_empty:
        return False
    for x in window.sample_points(5):
        pts = dyn.orbit(system, x, cert.n)
        if pts[-1] != x:
            return False
        if any(not reg.contains(p) for p in pts[:-1]):
            return False
    return True


# -- invariance and minimality ----------------------------------------------


def check_invariant(system: PartialSystem, pot: Potential, region) -> tuple[bool, bool]:
    """Exact (positively, negatively) invariance of an open set."""
    if system.backend == "graph":
        gph = system.gph
        cyls = _as_cylset(region)
        fwd = _graph_image(gph, _graph_pos_refine(gph, pot, cyls))
        back = _graph_preimage(gph, pot, cyls, live=True)
        return _cylset_subset(gph, fwd, cyls), _cylset_subset(gph, back, cyls)

    sys_, space, delta, pos, reg = _interval_regions(system, pot)
    u = IntervalSet.of(region) if isinstance(region, RationalInterval) else region
    positively = sys_.image_of(u.intersection(pos)).issubset(u)
    negatively = sys_.preimage_of(u).intersection(reg).issubset(u)
    return positively, negatively


def _closure_step_interval(sys_, pos, reg, u: IntervalSet) -> IntervalSet:
    return u.union(sys_.image_of(u.intersection(pos))).union(
        sys_.preimage_of(u).intersection(reg)
    )


def _minimal_seeds_interval(space: IntervalSet, depth: int) -> list[IntervalSet]:
    lo, hi = space.min(), space.max()
    width = hi - lo
    seeds: list[IntervalSet] = []
    seen = set()
    for k in range(0, min(depth, 8) + 1):
        step = width / 2**k
        for j in range(2**k):
            a, b = lo + j * step, lo + (j + 1) * step
            for iv in (
                RationalInterval(a, b, False, False),
                RationalInterval(a, b, a == lo, b == hi),
            ):
                s = IntervalSet.of(iv).intersection(space)
                key = str(s)
                if key in seen or s.is_empty or not s.is_open_in(space):
                    continue
                seen.add(key)
                seeds.append(s)
    return seeds


def check_minimal(system: PartialSystem, pot: Potential, depth: int = 8) -> Verdict:
    """Grow each seeded open set to its invariant closure and compare with X."""
    system.check_depth(depth)
    max_iter = 4 * depth
    if system.backend == "graph":
        gph = system.gph
        space = _graph_space(gph)
        seeds: list[tuple[PathPoint, ...]] = [(v,) for v in space]
        for n in range(1, min(depth, 4) + 1):
            seeds.extend((w,) for w in gph.words(n))
        hit_bound = False
        for seed in seeds:
            u = seed
            for _ in range(max_iter):
                nxt = _cylset_union(
                    gph,
                    u,
                    _graph_image(gph, _graph_pos_refine(gph, pot, u)),
                    _graph_preimage(gph, pot, u, live=True),
                )
                if _cylset_equal(gph, nxt, u):
                    break
                u = nxt
            else:
                hit_bound = True
                continue
            if not _cylset_equal(gph, u, space):
                cert = InvariantSet(u)
                assert check_invariant(system, pot, u) == (True, True)
                return Verdict("Minimal", "Fails", cert, depth)
        if hit_bound:
            return Verdict("Minimal", "Unknown", None, depth)
        return Verdict("Minimal", "Holds", MinimalScan(depth, len(seeds), max_iter), depth)

    sys_, space, delta, pos, reg = _interval_regions(system, pot)
    seeds_iv = _minimal_seeds_interval(space, depth)
    hit_bound = False
    for seed in seeds_iv:
        u = seed
        for _ in range(max_iter):
            nxt = _closure_step_interval(sys_, pos, reg, u)
            if nxt == u:
                break
            u = nxt
        else:
            hit_bound = True
            continue
        if u != space:
            assert check_invariant(system, pot, u) == (True, True)
            return Verdict("Minimal", "Fails", InvariantSet(u), depth)
    if hit_bound:
        return Verdict("Minimal", "Unknown", None, depth)
    return Verdict("Minimal", "Holds", MinimalScan(depth, len(seeds_iv), max_iter), depth)


# -- contracting sets -------------------------------------------------------


def check_contracting_set(
    system: PartialSystem, pot: Potential, region, pieces
) -> ContractingReport:
    """Exactly verify a candidate contracting tuple for the open set ``region``.

    ``pieces`` is a sequence of (U_k, n_k).  The three conditions: the U_k are
    pairwise disjoint nonempty opens inside the n_k-step regular core and
    inside V; V escapes the closure of their union; the n_k-step images of
    the U_k cover the closure of V.
    """
    if system.backend == "graph":
        gph = system.gph
        v = _as_cylset(region)
        if not v:
            return ContractingReport(False, "region_empty", "V must be nonempty open")
        sets = [(_as_cylset(u), int(n)) for u, n in pieces]
        if not sets or any(not u for u, _ in sets):
            return ContractingReport(False, "piece_empty", "each U_k must be nonempty")
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                if not _cyls_disjoint(gph, sets[i][0], sets[j][0]):
                    return ContractingReport(False, "not_disjoint", f"pieces {i} and {j} meet")
        for i, (u, n) in enumerate(sets):
            if n < 1:
                return ContractingReport(False, "bad_exponent", f"n_{i} must be >= 1")
            if not _cylset_subset(gph, u, v):
                return ContractingReport(False, "piece_escapes_region", f"U_{i} is not inside V")
            for c in u:
                deep = [c]
                for _ in range(n - len(c.word)):
                    deep = [k for d in deep for k in _cyl_children(gph, d)]
                for d in deep:
                    if any(pot.edge_weight(w) == 0 for w in d.word[:n]):
                        return ContractingReport(
                            False, "piece_not_regular", f"U_{i} leaves the live graph"
                        )
        covered = _cylset_union(gph, *[u for u, _ in sets])
        if _cylset_subset(gph, v, covered):
            return ContractingReport(False, "region_exhausted", "V lies in the closure of the U_k")
        images = _cylset_union(gph, *[_graph_shift_n(gph, u, n) for u, n in sets])
        if not _cylset_subset(gph, v, images):
            return ContractingReport(
                False, "closure_not_covered", "the n_k-step images miss part of closure(V)"
            )
        return ContractingReport(True)

    sys_, space, delta, pos, reg = _interval_regions(system, pot)
    v = IntervalSet.of(region) if isinstance(region, RationalInterval) else region
    if v.is_empty or not v.is_open_in(space):
        return ContractingReport(False, "region_empty", "V must be nonempty and open")
    sets = [
        (IntervalSet.of(u) if isinstance(u, RationalInterval) else u, int(n))
        for u, n in pieces
    ]
    if not sets or any(u.is_empty for u, _ in sets):
        return ContractingReport(False, "piece_empty", "each U_k must be nonempty")
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            if sets[i][0].intersects(sets[j][0]):
                return ContractingReport(False, "not_disjoint", f"pieces {i} and {j} meet")
    for i, (u, n) in enumerate(sets):
        if n < 1:
            return ContractingReport(False, "bad_exponent", f"n_{i} must be >= 1")
        core = dyn.regular_core(system, pot, n)
        if not u.issubset(core.intersection(v)):
            return ContractingReport(
                False, "piece_not_regular", f"U_{i} leaves the {n}-step regular core or V"
            )
    union = IntervalSet.empty()
    for u, _ in sets:
        union = union.union(u)
    if v.difference(union.closure()).is_empty:
        return ContractingReport(False, "region_exhausted", "V lies in the closure of the U_k")
    cover = IntervalSet.empty()
    for u, n in sets:
        cover = cover.union(_image_iter(sys_, u, n))
    if not v.closure().intersection(space).issubset(cover):
        missing = v.closure().intersection(space).difference(cover)
        return ContractingReport(
            False, "closure_not_covered", f"images miss {missing} of closure(V)"
        )
    return ContractingReport(True)


def _inverse_orbit_dense(
    system: PartialSystem, pot: Potential, x0: Fraction, depth: int
) -> tuple[bool, int, Fraction]:
    """Truncated density of the regular inverse orbit of x0, exact gaps."""
    sys_, space, delta, pos, reg = _interval_regions(system, pot)
    res = Fraction(1, 2 ** min(depth, 8))
    pts = {x0}
    level = [x0]
    for _ in range(min(depth, 10)):
        nxt = []
        for y in level:
            for x, _w in dyn.preimages(system, pot, y, 1, drop_zero=True):
                if reg.contains(x) and x not in pts:
                    pts.add(x)
                    nxt.append(x)
        level = nxt
        if not level:
            break
    ordered = sorted(pts)
    lo, hi = space.min(), space.max()
    gaps = [ordered[0] - lo, hi - ordered[-1]]
    gaps.extend(b - a for a, b in zip(ordered, ordered[1:]))
    return max(gaps) <= 2 * res, len(ordered), res


def _search_contracting_scale(
    system: PartialSystem, pot: Potential, x0: Fraction, radius: Fraction, depth: int
) -> Optional[ContractingTuple]:
    """Find one (U, n) tuple for the ball V around x0, via composite branches."""
    sys_, space, delta, pos, reg = _interval_regions(system, pot)
    v = IntervalSet.of(RationalInterval(x0 - radius, x0 + radius, False, False)).intersection(
        space
    )
    if v.is_empty or not v.is_open_in(space):
        return None
    vbar = v.closure().intersection(space)
    pad = radius / 4
    for n in range(1, depth + 1):
        for comp in dyn.composite_branches(sys_, n):
            if abs(comp.slope) <= 1:
                continue
            if not IntervalSet.of(comp.domain).issubset(v):
                continue
            img = IntervalSet.of(comp.image())
            target = IntervalSet.of(
                RationalInterval(vbar.min() - pad, vbar.max() + pad, False, False)
            ).intersection(img.interior_in(space))
            if not vbar.issubset(target):
                continue
            u = _affine_preimage(target, comp.slope, comp.intercept).intersection(
                IntervalSet.of(comp.domain)
            )
            cand = ContractingTuple(v, ((u, n),))
            if check_contracting_set(system, pot, v, cand.pieces).ok:
                return cand
    return None


def check_contracting(system: PartialSystem, pot: Potential, depth: int = 8) -> Verdict:
    """Search for a point whose neighbourhoods all contain contracting sets."""
    system.check_depth(depth)
    if system.backend == "graph":
        gph = system.gph
        dead = [e.name for e in gph.edges if pot.edge_weight(e.name) == 0]
        if dead:
            return Verdict(
                "Contracting", "Fails", Obstruction("domain_not_positive", tuple(dead)), depth
            )
        if all(len(_live_prependable(gph, pot, v)) <= 1 for v in gph.vertices):
            return Verdict(
                "Contracting",
                "Fails",
                Obstruction("deterministic_inverse_orbits", tuple(sorted(gph.vertices))),
                depth,
            )
        for cyc in _simple_cycles(gph, pot):
            if _cycle_exit(gph, pot, cyc) is None:
                continue
            start = gph.edge_by_name[cyc[0]].rng
            reach_depth = min(depth, 2 * len(gph.vertices) + 2)
            if not _reaches_all_atoms(gph, pot, start, reach_depth):
                continue
            scales = []
            max_m = max(1, min(depth // (2 * len(cyc)), 4))
            ok = True
            for m in range(1, max_m + 1):
                v = gph.path_point(cyc * m)
                u = gph.path_point(cyc * (2 * m))
                cand = ContractingTuple((v,), (((u,), m * len(cyc)),))
                if not check_contracting_set(system, pot, (v,), cand.pieces).ok:
                    ok = False
                    break
                scales.append(cand)
            if ok and scales:
                x0 = gph.path_point(cyc * max(1, min(depth // len(cyc), 6)))
                cert = ContractingCert(x0, 0, Fraction(1, 2**depth), tuple(scales))
                return Verdict("Contracting", "Holds", cert, depth)
        return Verdict("Contracting", "Unknown", None, depth)

    sys_, space, delta, pos, reg = _interval_regions(system, pot)
    if delta != pos:
        return Verdict(
            "Contracting",
            "Fails",
            Obstruction("domain_not_positive", delta.difference(pos)),
            depth,
        )
    if all(abs(b.slope) <= 1 for b in sys_.branches):
        slopes = tuple(b.slope for b in sys_.branches)
        return Verdict(
            "Contracting", "Fails", Obstruction("no_expanding_branch", slopes), depth
        )
    lo, hi = space.min(), space.max()
    width = hi - lo
    candidates = [lo + width * q for q in (Fraction(1, 3), Fraction(2, 3), Fraction(1, 5), Fraction(2, 5))]
    for x0 in candidates:
        if not reg.contains(x0):
            continue
        dense, count, res = _inverse_orbit_dense(system, pot, x0, depth)
        if not dense:
            continue
        scales = []
        ok = True
        for j in range(2, min(depth, 6) + 1):
            cand = _search_contracting_scale(system, pot, x0, width / 2**j, depth)
            if cand is None:
                ok = False
                break
            scales.append(cand)
        if ok and scales:
            cert = ContractingCert(x0, count, res, tuple(scales))
            return Verdict("Contracting", "Holds", cert, depth)
    return Verdict("Contracting", "Unknown", None, depth)


def _reaches_all_atoms(gph, pot, target: str, depth: int) -> bool:
    """Every short live word can be continued to reach the target vertex."""
    reach = {target}
    frontier = {target}
    for _ in range(len(gph.vertices) + 1):
        frontier = {
            e.rng for e in gph.edges if e.src in frontier and pot.edge_weight(e.name) > 0
        } - reach
        reach |= frontier
    for w in gph.words(min(depth // 2, 3)):
        if all(pot.edge_weight(n) > 0 for n in w.word) and w.end not in reach:
            return False
    return True


# -- derived verdicts -------------------------------------------------------


def check_one_circuit(system: PartialSystem, pot: Potential, depth: int = 8) -> Verdict:
    """Whether the regular-restricted dynamics is a single circuit feeding itself."""
    if system.backend == "interval":
        return Verdict(
            "OneCircuit", "Fails", Obstruction("not_discrete", system.ival.space), depth
        )
    gph = system.gph
    cycles = _simple_cycles(gph, pot)
    if len(cycles) != 1:
        return Verdict(
            "OneCircuit", "Fails", Obstruction("cycle_count", tuple(cycles)), depth
        )
    cyc = cycles[0]
    ex = _cycle_exit(gph, pot, cyc)
    if ex is not None:
        return Verdict("OneCircuit", "Fails", Obstruction("cycle_has_exit", (cyc, ex)), depth)
    on_cycle = {gph.edge_by_name[n].rng for n in cyc}
    stranded = [v for v in gph.vertices if v not in on_cycle and not _walks_into(gph, pot, v, on_cycle)]
    if stranded:
        return Verdict(
            "OneCircuit", "Fails", Obstruction("unreached_vertices", tuple(stranded)), depth
        )
    return Verdict("OneCircuit", "Holds", CycleNoExit(cyc), depth)


def _walks_into(gph, pot, v: str, targets: set[str]) -> bool:
    seen = {v}
    frontier = {v}
    while frontier:
        frontier = {
            e.src
            for e in gph.edges
            if e.rng in frontier and pot.edge_weight(e.name) > 0
        } - seen
        if frontier & targets:
            return True
        seen |= frontier
    return False


def _regular_set_infinite(system: PartialSystem, pot: Potential) -> bool:
    if system.backend == "interval":
        _, _, _, _, reg = _interval_regions(system, pot)
        return not reg.nondegenerate().is_empty
    gph = system.gph
    cycles = _simple_cycles(gph, pot)
    return any(_cycle_exit(gph, pot, c) is not None for c in cycles)


def _conjoin(prop: str, parts: Sequence[Verdict], depth: int, notes: tuple[str, ...]) -> Verdict:
    failing = [p for p in parts if p.fails]
    if failing:
        return Verdict(prop, "Fails", tuple(failing), depth, notes)
    if all(p.holds for p in parts):
        return Verdict(prop, "Holds", tuple(parts), depth, notes)
    return Verdict(prop, "Unknown", None, depth, notes)


def verdict_simple(system: PartialSystem, pot: Potential, depth: int = 8) -> Verdict:
    """Simplicity of the crossed product: minimal plus topologically free."""
    minimal = check_minimal(system, pot, depth)
    free = check_top_free(system, pot, depth)
    notes = []
    if _regular_set_infinite(system, pot):
        notes.append("regular set is infinite: minimality alone decides simplicity")
    else:
        notes.append(
            "regular set is finite: the infinite-regular-set shortcut does not apply"
        )
    if system.backend == "graph":
        oc = check_one_circuit(system, pot, depth)
        if oc.holds:
            notes.append("the live graph is a single circuit without exits")
    return _conjoin("Simple", (minimal, free), depth, tuple(notes))


def verdict_purely_infinite(system: PartialSystem, pot: Potential, depth: int = 8) -> Verdict:
    """Pure infiniteness with simplicity: minimal plus contracting."""
    minimal = check_minimal(system, pot, depth)
    contracting = check_contracting(system, pot, depth)
    notes = []
    out = _conjoin("PurelyInfiniteSimple", (minimal, contracting), depth, ())
    if out.holds:
        notes.append("second-countable space: the crossed product is a Kirchberg algebra")
    return Verdict(out.property, out.status, out.certificate, out.depth, tuple(notes))


# -- matrix-level consistency -----------------------------------------------


def _collapsed_basis(system: PartialSystem, pot: Potential, cert, depth: int):
    """Points, weights, period, and T of the orbit representation at a periodic
    certificate, with periodic preimages folded back instead of unrolled."""
    if system.backend == "graph":
        cyc: tuple[str, ...] = cert.edges if isinstance(cert, CycleNoExit) else tuple(cert)
        gph = system.gph
        p = len(cyc)
        pts = [gph.path_point(cyc[j:] + cyc[:j]) for j in range(p)]
        parents: list[list[tuple[int, Fraction]]] = [[] for _ in pts]

        def fold(child: PathPoint) -> Optional[int]:
            # a child refining a singleton cylinder is the same boundary path
            for k, pt in enumerate(pts):
                if pt == child or (_cyl_prefix(pt, child) and gph.is_singleton(pt)):
                    return k
            return None

        frontier = list(range(p))
        for _ in range(depth):
            nxt = []
            for i in frontier:
                for child in dyn.fiber(system, pts[i]):
                    w = dyn.rho(system, pot, child)
                    if w == 0:
                        continue
                    j = fold(child)
                    if j is None:
                        pts.append(child)
                        parents.append([])
                        j = len(pts) - 1
                        nxt.append(j)
                    parents[j].append((i, w))
            frontier = nxt
        return pts, parents, p

    window: RationalInterval = cert.window
    n = cert.n
    x0 = window.midpoint()
    cycle_pts = list(dict.fromkeys(dyn.orbit(system, x0, n - 1)))
    pts = list(cycle_pts)
    idx = {pt: i for i, pt in enumerate(pts)}
    parents = [[] for _ in pts]
    frontier = list(range(len(cycle_pts)))
    for _ in range(depth):
        nxt = []
        for i in frontier:
            for child, w in dyn.preimages(system, pot, pts[i], 1, drop_zero=True):
                j = idx.get(child)
                if j is None:
                    pts.append(child)
                    idx[child] = j = len(pts) - 1
                    parents.append([])
                    nxt.append(j)
                parents[j].append((i, w))
        frontier = nxt
    return pts, parents, n


def periodic_witness_norms(
    system: PartialSystem,
    pot: Potential,
    cert,
    depth: int = 6,
    width: int = 16,
) -> tuple[float, float]:
    """Norms of a t^n - a sqrt(rho_n) in the collapsed orbit representation and
    in the regular representation, for a the indicator of the periodic window
    or circuit of a Fails(TopFree) certificate."""
    pts, parents, n = _collapsed_basis(system, pot, cert, depth)
    dim = len(pts)
    t = np.zeros((dim, dim))
    for j, links in enumerate(parents):
        for i, w in links:
            t[j, i] = math.sqrt(float(w))

    if system.backend == "graph":
        cyc = cert.edges if isinstance(cert, CycleNoExit) else tuple(cert)
        rotations = {cyc[j:] + cyc[:j] for j in range(len(cyc))}

        def a_val(pt: PathPoint) -> float:
            return 1.0 if any(pt.word[: len(w)] == w for w in rotations) else 0.0

    else:
        window = cert.window

        def a_val(pt) -> float:
            return 1.0 if window.contains(pt) else 0.0

    a = np.diag(np.array([a_val(pt) for pt in pts]))
    tn = np.linalg.matrix_power(t, n)
    rho_n = []
    for pt in pts:
        try:
            rho_n.append(float(dyn.cocycle(system, pot, n, pt)))
        except Exception:
            rho_n.append(0.0)
    asr = np.diag(np.array([a_val(pt) * math.sqrt(r) for pt, r in zip(pts, rho_n)]))

    w_orbit = a @ tn - asr
    orbit_norm = float(np.linalg.norm(w_orbit, 2))

    s = np.zeros((width, width))
    for j in range(width - 1):
        s[j + 1, j] = 1.0
    w_reg = np.kron(np.linalg.matrix_power(s, n), a @ tn) - np.kron(np.eye(width), asr)
    reg_norm = float(np.linalg.norm(w_reg, 2))
    return orbit_norm, reg_norm


def sampled_witness_norms(
    handle: tr.TransferHandle, anchor, depth: int, width: int, fns
) -> tuple[tuple[float, float], ...]:
    """(orbit, regular) norms of a t - a sqrt(rho) over a sampled family.

    On topologically free systems the orbit-tree representation is faithful,
    so no sampled element should vanish there while surviving in the regular
    representation."""
    basis = OrbitBasis(handle, anchor, depth)
    system, pot = handle.system, handle.potential
    t = basis.T()
    sq = np.diag(np.array([_root_rho(system, pot, nd.point) for nd in basis.nodes]))
    s = np.zeros((width, width))
    for j in range(width - 1):
        s[j + 1, j] = 1.0
    out = []
    for f in fns:
        a = basis.pi(f)
        w_orbit = a @ t - a @ sq
        w_reg = np.kron(s, a @ t) - np.kron(np.eye(width), a @ sq)
        out.append(
            (float(np.linalg.norm(w_orbit, 2)), float(np.linalg.norm(w_reg, 2)))
        )
    return tuple(out)


def _root_rho(system: PartialSystem, pot: Potential, point) -> float:
    try:
        return math.sqrt(float(dyn.rho(system, pot, point)))
    except Exception:
        return 0.0
