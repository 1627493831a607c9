"""Truncated etale-groupoid models over the preimage tree.

An element is a triple (x, k, y) of basis points whose forward orbits
merge: phi^n(x) = phi^m(y) for some witness pair (n, m) with k = n - m.
Truncation keeps witnesses below a depth bound, which makes membership
decidable and every table exact.  On top of the element calculus the
module provides the equal-image relations R_n, the dictionary between
groupoid convolution and the truncated matrix model (a weighted-shift
conjugation that cancels the cocycle square roots entry by entry), and
the Cuntz-Krieger generator checks for finite-graph shifts.

Only systems whose weight is strictly positive and continuous on the
whole domain are accepted; anything with an irregular point is refused
up front rather than silently restricted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import dynamics as dyn
from . import rep
from . import transfer as tr
from .dynamics import PartialSystem, Potential
from .errors import NotLocalHomeo, OutOfDomain, ValidationError


# ---------------------------------------------------------------------------
# elements and relations
# ---------------------------------------------------------------------------


def _point_key(p):
    if isinstance(p, Fraction):
        return (0, p)
    return (1,) + p.sort_key()


@dataclass(frozen=True)
class GroupoidElement:
    """One arrow (x, k, y) with a verified witness pair.

    The witness (n, m) records exponents with phi^n(x) = phi^m(y); the
    stored pair is the smallest one the enumeration found, so membership
    stays decidable after truncation.
    """

    x: object
    k: int
    y: object
    witness: tuple[int, int]

    def __post_init__(self):
        n, m = self.witness
        if n < 0 or m < 0:
            raise ValidationError("witness exponents must be nonnegative")
        if n - m != self.k:
            raise ValidationError(f"witness {self.witness} does not realize k={self.k}")

    @property
    def is_unit(self) -> bool:
        return self.k == 0 and self.x == self.y

    def inverse(self) -> "GroupoidElement":
        n, m = self.witness
        return GroupoidElement(self.y, -self.k, self.x, (m, n))

    def __str__(self) -> str:
        return f"({self.x}, {self.k:+d}, {self.y})"


@dataclass(frozen=True)
class GapPair:
    """Points with equal n-step images; the level-n equal-image relation."""

    n: int
    x: object
    y: object

    def flipped(self) -> "GapPair":
        return GapPair(self.n, self.y, self.x)


class TruncatedGroupoid:
    """Finite element table over a point set, closed under inversion."""

    def __init__(self, backend: str, depth: int, points: tuple, elements: tuple):
        self.backend = backend
        self.depth = depth
        self.points = points
        self.elements = elements
        self.index = {(g.x, g.k, g.y): i for i, g in enumerate(elements)}
        if len(self.index) != len(elements):
            raise ValidationError("duplicate elements in groupoid table")
        by_left: dict = {}
        for i, g in enumerate(elements):
            by_left.setdefault(g.x, []).append(i)
        self._by_left = {p: tuple(ix) for p, ix in by_left.items()}

    def __len__(self) -> int:
        return len(self.elements)

    def units(self) -> tuple[GroupoidElement, ...]:
        return tuple(g for g in self.elements if g.is_unit)

    def unit_at(self, x) -> GroupoidElement:
        i = self.index.get((x, 0, x))
        if i is None:
            raise ValidationError(f"no unit at {x}")
        return self.elements[i]

    def from_left(self, x) -> tuple[GroupoidElement, ...]:
        return tuple(self.elements[i] for i in self._by_left.get(x, ()))

    def contains(self, x, k: int, y) -> bool:
        return (x, k, y) in self.index

    def compose(self, g: GroupoidElement, h: GroupoidElement) -> Optional[GroupoidElement]:
        """Product g.h, or None when it needs witnesses past the truncation."""
        if g.y != h.x:
            raise ValidationError("elements do not compose: middle points differ")
        i = self.index.get((g.x, g.k + h.k, h.y))
        return self.elements[i] if i is not None else None

    def inverse_of(self, g: GroupoidElement) -> GroupoidElement:
        inv = g.inverse()
        i = self.index.get((inv.x, inv.k, inv.y))
        if i is None:
            raise ValidationError("inverse missing from the table")
        return self.elements[i]

    def composition_table(self, max_pairs: int = 200_000) -> dict:
        """(i, j) -> element index for every left-matched pair; None when
        the product leaves the truncation.  Guarded: the table is quadratic
        in fibre sizes, use compose() for large groupoids."""
        pairs = sum(
            len(self._by_left.get(g.y, ())) for g in self.elements
        )
        if pairs > max_pairs:
            raise ValidationError(
                f"composition table would hold {pairs} pairs (cap {max_pairs})"
            )
        table = {}
        for i, g in enumerate(self.elements):
            for j in self._by_left.get(g.y, ()):
                h = self.elements[j]
                table[(i, j)] = self.index.get((g.x, g.k + h.k, h.y))
        return table

    def axiom_violations(self, cap: int = 20_000) -> int:
        """Count of failures of associativity, unit laws, and g.g^-1 being
        a unit, over at most cap composable triples.  Zero means the table
        passed; the scan is exact, not numeric."""
        bad = 0
        seen = 0
        for g in self.elements:
            gi = self.inverse_of(g)
            u = self.compose(g, gi)
            if u is not None and not u.is_unit:
                bad += 1
            for j in self._by_left.get(g.y, ()):
                h = self.elements[j]
                gh = self.compose(g, h)
                for l in self._by_left.get(h.y, ()):
                    f = self.elements[l]
                    seen += 1
                    if seen > cap:
                        return bad
                    hf = self.compose(h, f)
                    left = self.compose(gh, f) if gh is not None else None
                    right = self.compose(g, hf) if hf is not None else None
                    if left is not None and right is not None and left != right:
                        bad += 1
        return bad


def _max_orbit(system: PartialSystem, x, cap: int):
    out = [x]
    for _ in range(cap):
        try:
            out.append(dyn.phi(system, out[-1]))
        except OutOfDomain:
            break
    return tuple(out)


def _local_homeo_gate(system: PartialSystem, pot: Potential) -> None:
    report = dyn.regular_set(system, pot)
    if report.irregular_points:
        pts = ", ".join(str(ip.point) for ip in report.irregular_points)
        raise NotLocalHomeo(f"irregular points present: {pts}")
    if system.backend == "interval":
        gaps = report.delta.difference(report.delta_pos)
        if not gaps.is_empty:
            raise NotLocalHomeo(f"weight vanishes on {gaps}")
        gaps = report.delta.difference(report.delta_reg)
        if not gaps.is_empty:
            raise NotLocalHomeo(f"domain is not fully regular: missing {gaps}")
    else:
        for name, w in pot.weight_map().items():
            if w <= 0:
                raise NotLocalHomeo(f"edge {name} carries a nonpositive weight")


def build_deaconu(
    system: PartialSystem,
    pot: Potential,
    seeds: Sequence,
    depth: int,
    max_elements: int = 500_000,
) -> TruncatedGroupoid:
    """Element table over the union of preimage trees of the seeds.

    Witness exponents are capped at depth on both sides.  For every pair
    of basis points and every realizable k the table holds one element
    carrying the minimal witness.
    """
    _local_homeo_gate(system, pot)
    handle = tr.TransferHandle.create(system, pot)
    points: dict = {}
    for seed in seeds:
        basis = rep.OrbitBasis(handle, seed, depth)
        for nd in basis.nodes:
            points.setdefault(nd.point, None)
    pts = tuple(sorted(points, key=_point_key))

    orbits = [_max_orbit(system, p, depth) for p in pts]
    groups: dict = {}
    for i, orb in enumerate(orbits):
        for t, v in enumerate(orb):
            groups.setdefault(v, []).append((i, t))

    found: dict = {}
    for members in groups.values():
        for i, n in members:
            for j, m in members:
                key = (i, j, n - m)
                cur = found.get(key)
                if cur is None or (n, m) < cur:
                    found[key] = (n, m)
        if len(found) > max_elements:
            raise ValidationError(
                f"element table exceeds {max_elements}; lower the depth"
            )

    elements = tuple(
        GroupoidElement(pts[i], k, pts[j], w)
        for (i, j, k), w in sorted(
            found.items(), key=lambda kv: (kv[0][0], kv[0][2], kv[0][1])
        )
    )
    return TruncatedGroupoid(system.backend, depth, pts, elements)


def gap_relation(system: PartialSystem, n: int, samples: Sequence) -> tuple[GapPair, ...]:
    """All sampled pairs (x, y) with phi^n(x) = phi^n(y), exactly.

    Pairs are reported once, in sample order with x no later than y;
    reflexive pairs are included whenever the n-step image exists.
    """
    if n < 0:
        raise ValidationError("level must be nonnegative")
    pts = list(samples)
    images = []
    for p in pts:
        try:
            images.append(dyn.orbit(system, p, n)[-1])
        except OutOfDomain:
            images.append(None)
    out = []
    for i, u in enumerate(images):
        if u is None:
            continue
        for j in range(i, len(pts)):
            if images[j] == u:
                out.append(GapPair(n, pts[i], pts[j]))
    return tuple(out)


def gap_tower(
    system: PartialSystem, samples: Sequence, depth: int
) -> tuple[tuple[GapPair, ...], ...]:
    """Levels R_0..R_depth on the samples, with the inclusion R_n into
    R_{n+1} verified wherever the next image exists."""
    levels = tuple(gap_relation(system, n, samples) for n in range(depth + 1))
    for n in range(depth):
        nxt = {(g.x, g.y) for g in levels[n + 1]}
        for g in levels[n]:
            try:
                dyn.orbit(system, g.x, n + 1)
                dyn.orbit(system, g.y, n + 1)
            except OutOfDomain:
                continue
            if (g.x, g.y) not in nxt:
                raise ValidationError(
                    f"equal-image pair {g.x},{g.y} lost between levels {n} and {n + 1}"
                )
    return levels


# ---------------------------------------------------------------------------
# the convolution / matrix dictionary
# ---------------------------------------------------------------------------


def _slot_diag(basis: rep.OrbitBasis, f: Optional[tr.TestFunction], k: int) -> np.ndarray:
    """Diagonal a(x) * rho_k(x)^{-1/2} as floats; zero where the orbit or
    the cocycle is missing (those rows die against the shift anyway)."""
    out = np.zeros(basis.dim)
    for i, nd in enumerate(basis.nodes):
        try:
            w = dyn.cocycle(basis.system, basis.potential, k, nd.point)
        except OutOfDomain:
            continue
        if w <= 0:
            continue
        v = 1.0 if f is None else float(f.value(nd.point))
        out[i] = v / math.sqrt(float(w))
    return out


def phi_matrix(
    basis: rep.OrbitBasis,
    a: Optional[tr.TestFunction],
    n: int,
    m: int,
    b: Optional[tr.TestFunction],
) -> np.ndarray:
    """Matrix of a rho_n^{-1/2} T^n T*^m rho_m^{-1/2} b on the tree basis.

    The square roots cancel against the shift weights, so the entry at
    (i, j) is a(x_i) b(x_j) whenever the tree witnesses the images
    phi^n(x_i) = phi^m(x_j) through a common ancestor, and zero otherwise.
    """
    if n < 0 or m < 0 or n > basis.depth or m > basis.depth:
        raise ValidationError("tensor degrees must sit within the basis depth")
    lft = _slot_diag(basis, a, n)
    rgt = _slot_diag(basis, b, m)
    core = basis.T_pow(n) @ basis.T_pow(m).T
    return (lft[:, None] * core) * rgt[None, :]


def _node_rows(basis: rep.OrbitBasis) -> dict:
    rows = {nd.point: i for i, nd in enumerate(basis.nodes)}
    if len(rows) != basis.dim:
        raise ValidationError(
            "anchor revisits its own preimage tree; pick a nonperiodic anchor"
        )
    return rows


def _tensor_value(system, a, b, n, m, g: GroupoidElement) -> float:
    """Value of the degree-(n, m) tensor at an element: a(x) b(y) when the
    specific witness pair (n, m) holds for it, else zero."""
    if g.k != n - m:
        return 0.0
    try:
        vx = dyn.orbit(system, g.x, n)[-1]
        vy = dyn.orbit(system, g.y, m)[-1]
    except OutOfDomain:
        return 0.0
    if vx != vy:
        return 0.0
    va = 1.0 if a is None else float(a.value(g.x))
    vb = 1.0 if b is None else float(b.value(g.y))
    return va * vb


def _convolution_matrix(
    gpd: TruncatedGroupoid,
    basis: rep.OrbitBasis,
    a, b, n: int, m: int,
    c, d, n2: int, m2: int,
) -> np.ndarray:
    system = basis.system
    rows = _node_rows(basis)
    k1, k2 = n - m, n2 - m2
    out = np.zeros((basis.dim, basis.dim))
    for g1 in gpd.elements:
        if g1.k != k1 or g1.x not in rows:
            continue
        v1 = _tensor_value(system, a, b, n, m, g1)
        if v1 == 0.0:
            continue
        for j in gpd._by_left.get(g1.y, ()):
            g2 = gpd.elements[j]
            if g2.k != k2 or g2.y not in rows:
                continue
            v2 = _tensor_value(system, c, d, n2, m2, g2)
            if v2 != 0.0:
                out[rows[g1.x], rows[g2.y]] += v1 * v2
    return out


def iso_phi_check(
    basis: rep.OrbitBasis,
    a: Optional[tr.TestFunction],
    b: Optional[tr.TestFunction],
    n: int,
    m: int,
    c: Optional[tr.TestFunction] = None,
    d: Optional[tr.TestFunction] = None,
    n2: Optional[int] = None,
    m2: Optional[int] = None,
    gpd: Optional[TruncatedGroupoid] = None,
) -> float:
    """Residual between the two product routes for a pair of tensors.

    Route one multiplies the weighted-shift images; route two convolves
    the tensors over the truncated element table and lays the result out
    as a matrix.  The comparison runs on interior indices: rows deep
    enough to carry the left degree, columns deep enough for the right
    degree of the second factor.  Both slots must vanish off the
    corresponding iterate domains for the tensor to be meaningful.
    """
    if n2 is None or m2 is None:
        if (n2 is None) != (m2 is None):
            raise ValidationError("give both degrees of the second factor or neither")
        c, d, n2, m2 = a, b, n, m
    if gpd is None:
        gpd = build_deaconu(
            basis.system, basis.potential, [basis.anchor], basis.depth
        )
    m_route = phi_matrix(basis, a, n, m, b) @ phi_matrix(basis, c, n2, m2, d)
    c_route = _convolution_matrix(gpd, basis, a, b, n, m, c, d, n2, m2)
    depths = basis.depths()
    block = np.ix_(depths >= n, depths >= m2)
    diff = np.abs(m_route[block] - c_route[block])
    return float(diff.max()) if diff.size else 0.0


def unit_restriction_check(
    basis: rep.OrbitBasis,
    a: Optional[tr.TestFunction],
    b: Optional[tr.TestFunction],
    n: int,
    gpd: Optional[TruncatedGroupoid] = None,
) -> float:
    """Diagonal compatibility for a balanced tensor of degree (n, n).

    The diagonal extraction of the matrix image must match the tensor's
    restriction to unit elements, point by point on interior rows.
    """
    if gpd is None:
        gpd = build_deaconu(
            basis.system, basis.potential, [basis.anchor], basis.depth
        )
    mat = rep.expectation_G(basis, phi_matrix(basis, a, n, n, b))
    diag = np.diag(mat)
    system = basis.system
    worst = 0.0
    for i, nd in enumerate(basis.nodes):
        if nd.depth < n:
            continue
        if gpd.contains(nd.point, 0, nd.point):
            g = gpd.elements[gpd.index[(nd.point, 0, nd.point)]]
            unit_val = _tensor_value(system, a, b, n, n, g)
        else:
            unit_val = 0.0
        worst = max(worst, abs(diag[i] - unit_val))
    return worst


# ---------------------------------------------------------------------------
# graph generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorFamily:
    """Edge partial isometries on a truncated path tree, with residuals.

    isometries maps edge names to matrices, projections maps vertex names
    to the diagonal range projections.  interior masks the rows where the
    truncation is silent: the tree boundary (the root has no parent, the
    deepest layer has no children).
    """

    basis: rep.OrbitBasis
    isometries: dict = field(default_factory=dict)
    projections: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    interior: np.ndarray = None

    def max_residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else 0.0


def _prepend_matrix(basis: rep.OrbitBasis, edge_name: str) -> np.ndarray:
    """The 0/1 matrix sending a node to its prepend-by-edge child."""
    out = np.zeros((basis.dim, basis.dim))
    for i, nd in enumerate(basis.nodes):
        if nd.depth == 0:
            continue
        if nd.point.word[0] == edge_name:
            out[i, basis.parents[i]] = 1.0
    return out


def graph_generators(
    system: PartialSystem,
    lam: dict,
    depth: int,
    anchor=None,
) -> GeneratorFamily:
    """Edge generators s_e = pi(1_Z(e)) lambda_e^{-1/2} T and their relations.

    Checks, on interior indices: s_e* s_e equals the source projection,
    s_e s_e* stays under the range projection, every vertex projection is
    the sum of the range parts of its incoming edges, distinct edges have
    orthogonal ranges, and the rep-built s_e equals the plain prepend
    shift exactly.
    """
    if system.backend != "graph":
        raise ValidationError("graph generators need a graph backend")
    gph = system.gph
    weights = []
    for e in gph.edges:
        if e.name not in lam:
            raise ValidationError(f"edge {e.name} has no weight")
        w = Fraction(lam[e.name])
        if w <= 0:
            raise ValidationError(f"edge {e.name} needs a positive weight")
        weights.append((e.name, w))
    pot = Potential("graph", weights=tuple(weights))
    handle = tr.TransferHandle.create(system, pot)
    if anchor is None:
        name = sorted(e.name for e in gph.edges)[0]
        anchor = gph.path_point((name,))
    basis = rep.OrbitBasis(handle, anchor, depth)

    t = basis.T()
    fam: dict = {}
    residuals: dict = {}
    depths = basis.depths()
    inner = (depths >= 1) & (depths <= depth - 1)
    for e in gph.edges:
        proj = basis.pi(tr.TestFunction.indicator(gph.path_point((e.name,))))
        s = proj @ (float(Fraction(lam[e.name])) ** -0.5 * t)
        fam[e.name] = s
        plain = _prepend_matrix(basis, e.name)
        residuals[f"shift:{e.name}"] = float(np.abs(s - plain).max())

    projs = {
        v: basis.pi(tr.TestFunction.indicator(gph.vertex_point(v)))
        for v in gph.vertices
    }

    block = np.ix_(inner, inner)
    for e in gph.edges:
        s = fam[e.name]
        src = projs[e.src]
        residuals[f"source:{e.name}"] = float(
            np.abs((s.T @ s - src)[block]).max()
        )
        under = s @ s.T - projs[e.rng]
        residuals[f"range:{e.name}"] = float(np.maximum(under[block], 0.0).max())
    for v in gph.vertices:
        acc = np.zeros((basis.dim, basis.dim))
        for e in gph.edges:
            if e.rng == v:
                acc += fam[e.name] @ fam[e.name].T
        residuals[f"vertex:{v}"] = float(np.abs((acc - projs[v])[block]).max())
    names = sorted(e.name for e in gph.edges)
    for i, e1 in enumerate(names):
        for e2 in names[i + 1 :]:
            residuals[f"orthogonal:{e1},{e2}"] = float(
                np.abs(fam[e1].T @ fam[e2]).max()
            )
    return GeneratorFamily(basis, fam, projs, residuals, inner)
