"""Truncated matrix models of the covariance algebra.

The orbit basis spans the preimage tree of an anchor point up to a fixed
depth.  Functions act diagonally, the generator T sends a node to its
weighted fiber children, and every algebraic relation that survives
truncation is checked on the interior band where no truncated edge can
leak in.  Matrices are numpy arrays; the diagonal data behind them stays
exact until the final cast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import dynamics as dyn
from . import transfer as tr
from .dynamics import PartialSystem, Potential
from .errors import EmptyBasis, UnsupportedPotential, ValidationError
from .intervals import IntervalSet, RationalInterval, frac

# ---------------------------------------------------------------------------
# pointwise function expressions
# ---------------------------------------------------------------------------


class FnExpr:
    """A pointwise-exact function expression over one system.

    Wraps evaluation closures so products, pullbacks along the map, and
    fiber-sum images stay exactly computable at rational points even when
    they leave the piecewise-affine class.
    """

    def __init__(self, fn: Callable[[object], Fraction], label: str = "f"):
        self._fn = fn
        self.label = label

    def value(self, x) -> Fraction:
        return self._fn(x)

    @staticmethod
    def of(f: tr.TestFunction) -> "FnExpr":
        return FnExpr(f.value, "tf")

    @staticmethod
    def const(v) -> "FnExpr":
        v = frac(v)
        return FnExpr(lambda x: v, "const")

    def __mul__(self, other: "FnExpr") -> "FnExpr":
        return FnExpr(lambda x: self._fn(x) * other._fn(x), f"({self.label}*{other.label})")

    def alpha(self, system: PartialSystem, n: int = 1) -> "FnExpr":
        """Pullback along n forward steps; zero off the n-step domain."""

        def val(x):
            try:
                z = dyn.orbit(system, x, n)[-1]
            except dyn.OutOfDomain:
                return Fraction(0)
            return self._fn(z)

        return FnExpr(val, f"alpha^{n}({self.label})")

    def transfer(self, system: PartialSystem, pot: Potential, n: int = 1) -> "FnExpr":
        def val(y):
            total = Fraction(0)
            for x, w in dyn.preimages(system, pot, y, n):
                if w != 0:
                    total += w * self._fn(x)
            return total

        return FnExpr(val, f"L^{n}({self.label})")


def compose_with_map(system: PartialSystem, a: tr.TestFunction) -> tr.TestFunction:
    """Exact pullback a o phi as a piecewise description (interval) or
    cylinder combination (graph)."""
    if system.backend == "interval":
        sys_ = system.ival
        pieces = []
        for b in sys_.branches:
            for iv, m, c in a.pieces:
                pull = b.preimage_of(IntervalSet.of(iv))
                for piece in pull.intervals:
                    pieces.append((piece, m * b.slope, m * b.intercept + c))
        return tr.TestFunction("interval", pieces=tuple(pieces))
    gph = system.gph
    cyls = []
    for cyl, w in a.cylinders:
        v = gph.range_vertex(cyl)
        for e in gph.prependable(v):
            cyls.append((gph.path_point((e.name,) + cyl.word), w))
    return tr.TestFunction("graph", cylinders=tuple(cyls))


# ---------------------------------------------------------------------------
# orbit basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisNode:
    depth: int
    point: object


class OrbitBasis:
    """Preimage tree of an anchor point, truncated at a depth."""

    def __init__(self, handle: tr.TransferHandle, anchor, depth: int, drop_zero: bool = True):
        handle.require_valid()
        if depth < 1:
            raise ValidationError("depth must be >= 1")
        handle.system.check_depth(depth)
        system, pot = handle.system, handle.potential
        if system.backend == "interval":
            anchor = frac(anchor)
            if not system.ival.space.contains(anchor):
                raise ValidationError("anchor lies outside the space")
        self.handle = handle
        self.system = system
        self.potential = pot
        self.anchor = anchor
        self.depth = depth
        self.drop_zero = drop_zero

        nodes = [BasisNode(0, anchor)]
        parents = [-1]
        frontier = [(anchor, 0)]
        for k in range(1, depth + 1):
            nxt = []
            for point, idx in frontier:
                for child in dyn.fiber(system, point):
                    w = dyn.rho(system, pot, child)
                    if drop_zero and w == 0:
                        continue
                    nodes.append(BasisNode(k, child))
                    parents.append(idx)
                    nxt.append((child, len(nodes) - 1))
            frontier = nxt
        self.nodes = tuple(nodes)
        self.parents = tuple(parents)
        self._weights = tuple(
            dyn.rho(system, pot, nd.point) if i > 0 else Fraction(0)
            for i, nd in enumerate(self.nodes)
        )

    @property
    def dim(self) -> int:
        return len(self.nodes)

    def depths(self) -> np.ndarray:
        return np.array([nd.depth for nd in self.nodes], dtype=int)

    def band(self, lo: int, hi: int) -> np.ndarray:
        """Boolean mask of nodes with lo <= depth <= hi."""
        d = self.depths()
        return (d >= lo) & (d <= hi)

    # -- matrices ------------------------------------------------------------

    def pi(self, f) -> np.ndarray:
        """Diagonal action of a function (TestFunction or FnExpr)."""
        vals = [float(f.value(nd.point)) for nd in self.nodes]
        return np.diag(np.array(vals, dtype=float))

    def T(self) -> np.ndarray:
        m = np.zeros((self.dim, self.dim))
        for i in range(1, self.dim):
            m[i, self.parents[i]] = math.sqrt(float(self._weights[i]))
        return m

    def T_pow(self, k: int) -> np.ndarray:
        out = np.eye(self.dim)
        t = self.T()
        for _ in range(k):
            out = t @ out
        return out

    def gauge(self, z: complex) -> np.ndarray:
        return np.diag(np.array([z ** nd.depth for nd in self.nodes], dtype=complex))


class RegularBasis:
    """Orbit tree tensored with a finite shift window.

    The window makes T a proper (truncated) isometry-like shift even over
    periodic orbits, which gives honest norm lower bounds for witnesses.
    """

    def __init__(self, base: OrbitBasis, width: int):
        if width < 2:
            raise ValidationError("window width must be >= 2")
        self.base = base
        self.width = width

    @property
    def dim(self) -> int:
        return self.base.dim * self.width

    def pi(self, f) -> np.ndarray:
        return np.kron(np.eye(self.width), self.base.pi(f))

    def T(self) -> np.ndarray:
        s = np.zeros((self.width, self.width))
        for j in range(self.width - 1):
            s[j + 1, j] = 1.0
        return np.kron(s, self.base.T())


# ---------------------------------------------------------------------------
# relation batteries
# ---------------------------------------------------------------------------


def check_transfer_relation(basis: OrbitBasis, a) -> float:
    """Residual of T* pi(a) T = pi(L a) away from the truncation edge."""
    t = basis.T()
    lhs = t.T @ basis.pi(a) @ t
    la = FnExpr.of(a) if isinstance(a, tr.TestFunction) else a
    rhs = basis.pi(la.transfer(basis.system, basis.potential))
    mask = basis.band(0, basis.depth - 1)
    diff = (lhs - rhs)[:, mask]
    return float(np.abs(diff).max()) if diff.size else 0.0


def covariance_residual(basis: OrbitBasis, a, b) -> float:
    """Residual of T pi(a) = pi(b) T; zero exactly when b = a o phi."""
    t = basis.T()
    diff = t @ basis.pi(a) - basis.pi(b) @ t
    return float(np.abs(diff).max())


def check_covariance(basis: OrbitBasis, a: tr.TestFunction) -> float:
    return covariance_residual(basis, a, compose_with_map(basis.system, a))


def check_commutation(basis: OrbitBasis, a, b) -> float:
    pa, pb = basis.pi(a), basis.pi(b)
    return float(np.abs(pa @ pb - pb @ pa).max())


@dataclass(frozen=True)
class Monomial:
    """a T^up T*^down b, any factor optional."""

    left: Optional[tr.TestFunction]
    up: int
    down: int
    right: Optional[tr.TestFunction]

    def __post_init__(self):
        if self.up < 0 or self.down < 0:
            raise ValidationError("powers must be nonnegative")


def monomial_matrix(basis: OrbitBasis, mon: Monomial) -> np.ndarray:
    m = basis.T_pow(mon.up) @ basis.T_pow(mon.down).T
    if mon.left is not None:
        m = basis.pi(mon.left) @ m
    if mon.right is not None:
        m = m @ basis.pi(mon.right)
    return m


def _fn_or_one(f: Optional[tr.TestFunction]) -> FnExpr:
    return FnExpr.of(f) if f is not None else FnExpr.const(1)


def product_check(basis: OrbitBasis, m1: Monomial, m2: Monomial) -> float:
    """Residual between the matrix product and the closed product form.

    The product of two monomials is again a monomial whose middle function
    is a fiber-sum image pushed back along the map; the two sides are
    compared on the band of columns where truncation cannot reach.
    """
    sys_, pot = basis.system, basis.potential
    lhs = monomial_matrix(basis, m1) @ monomial_matrix(basis, m2)

    bc = _fn_or_one(m1.right) * _fn_or_one(m2.left)
    n, m = m1.up, m1.down
    k, l = m2.up, m2.down
    if m >= k:
        mid = bc.transfer(sys_, pot, k).alpha(sys_, l) if l else bc.transfer(sys_, pot, k)
        up, down = n, m - k + l
        mid_right = mid * _fn_or_one(m2.right)
        rhs = basis.T_pow(up) @ basis.T_pow(down).T @ basis.pi(mid_right)
        if m1.left is not None:
            rhs = basis.pi(m1.left) @ rhs
    else:
        mid = bc.transfer(sys_, pot, m).alpha(sys_, n) if n else bc.transfer(sys_, pot, m)
        up, down = n + k - m, l
        left_mid = _fn_or_one(m1.left) * mid
        rhs = basis.pi(left_mid) @ basis.T_pow(up) @ basis.T_pow(down).T
        if m2.right is not None:
            rhs = rhs @ basis.pi(m2.right)

    lo = m1.down + m2.down
    hi = basis.depth - m1.up - m2.up
    mask = basis.band(lo, hi)
    if not mask.any():
        raise EmptyBasis(
            f"no columns in the safe band [{lo}, {hi}]; increase the depth"
        )
    diff = (lhs - rhs)[:, mask]
    return float(np.abs(diff).max())


# ---------------------------------------------------------------------------
# expectations and gauge
# ---------------------------------------------------------------------------


def gauge_residuals(basis: OrbitBasis, a: tr.TestFunction, angles: int = 7) -> tuple[float, float]:
    """Max residual of (fix pi(a), scale T by z) over sampled circle points."""
    t = basis.T().astype(complex)
    pa = basis.pi(a).astype(complex)
    worst_a, worst_t = 0.0, 0.0
    for j in range(angles):
        z = complex(math.cos(2 * math.pi * j / angles), math.sin(2 * math.pi * j / angles))
        u = basis.gauge(z)
        ui = basis.gauge(z.conjugate())
        worst_a = max(worst_a, float(np.abs(u @ pa @ ui - pa).max()))
        worst_t = max(worst_t, float(np.abs(u @ t @ ui - z * t).max()))
    return worst_a, worst_t


def gauge_average(basis: OrbitBasis, m: np.ndarray, angles: Optional[int] = None) -> np.ndarray:
    """Average of gauge conjugates; kills every unbalanced component."""
    n = angles if angles is not None else 2 * basis.depth + 1
    acc = np.zeros_like(m, dtype=complex)
    for j in range(n):
        z = complex(math.cos(2 * math.pi * j / n), math.sin(2 * math.pi * j / n))
        acc += basis.gauge(z) @ m.astype(complex) @ basis.gauge(z.conjugate())
    return acc / n


def expectation_E(basis: OrbitBasis, mon: Monomial) -> np.ndarray:
    """Structural conditional expectation onto the balanced part."""
    if mon.up == mon.down:
        return monomial_matrix(basis, mon)
    return np.zeros((basis.dim, basis.dim))


def e_check(basis: OrbitBasis, mon: Monomial) -> float:
    """Gauge averaging must reproduce the structural expectation."""
    avg = gauge_average(basis, monomial_matrix(basis, mon))
    structural = expectation_E(basis, mon).astype(complex)
    return float(np.abs(avg - structural).max())


def expectation_G(basis: OrbitBasis, m: np.ndarray) -> np.ndarray:
    """Diagonal extraction: the expectation onto functions, node by node."""
    return np.diag(np.diag(m))


def g_values(basis: OrbitBasis, mon: Monomial):
    """Exact diagonal of the structural expectation of a monomial.

    For balanced powers k the value at a node is left * right * (k-step
    cocycle); unbalanced monomials have zero expectation.
    """
    out = []
    for nd in basis.nodes:
        if mon.up != mon.down:
            out.append(Fraction(0))
            continue
        try:
            w = dyn.cocycle(basis.system, basis.potential, mon.up, nd.point)
        except dyn.OutOfDomain:
            w = Fraction(0)
        v = w
        if mon.left is not None:
            v *= mon.left.value(nd.point)
        if mon.right is not None:
            v *= mon.right.value(nd.point)
        out.append(v)
    return tuple(out)


def g_check(basis: OrbitBasis, mon: Monomial) -> float:
    """Diagonal of the matrix vs the exact cocycle values, on the safe band."""
    diag = np.diag(monomial_matrix(basis, mon))
    vals = np.array([float(v) for v in g_values(basis, mon)])
    mask = basis.band(mon.down, basis.depth)
    diff = (diag - vals)[mask]
    return float(np.abs(diff).max()) if diff.size else 0.0


# ---------------------------------------------------------------------------
# quasi-basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuasiBasis:
    """Partition functions v_i with single-branch supports; u_i = sqrt(v_i/rho)."""

    functions: tuple[tr.TestFunction, ...]
    region: object


def quasi_basis(system: PartialSystem, pot: Potential, region: Optional[IntervalSet] = None) -> QuasiBasis:
    if system.backend == "graph":
        gph = system.gph
        fns = tuple(
            tr.TestFunction.indicator(gph.path_point((e.name,))) for e in gph.edges
        )
        return QuasiBasis(fns, None)

    sys_ = system.ival
    if region is None:
        region = dyn.regular_set(system, pot).delta_reg
    cuts = set()
    for b in sys_.branches:
        cuts.add(b.domain.lo)
        cuts.add(b.domain.hi)
    fns: list[tr.TestFunction] = []
    for comp in region.nondegenerate().intervals:
        inner = sorted(c for c in cuts if comp.lo < c < comp.hi)
        grid = [comp.lo] + inner + [comp.hi]
        split = set(inner)
        for i, g in enumerate(grid):
            left = grid[i - 1] if i > 0 else None
            right = grid[i + 1] if i + 1 < len(grid) else None
            pieces = []
            if left is not None:
                # rising ramp, open at the peak when the peak is a seam
                pieces.append(
                    (
                        RationalInterval(left, g, False, g not in split),
                        Fraction(1) / (g - left),
                        -left / (g - left),
                    )
                )
            if right is not None:
                pieces.append(
                    (
                        RationalInterval(g, right, True, False),
                        Fraction(-1) / (right - g),
                        right / (right - g),
                    )
                )
            if g in split:
                # two half-hats so each support stays inside one branch
                for p in pieces:
                    fns.append(tr.TestFunction("interval", pieces=(p,)))
            else:
                fns.append(tr.TestFunction("interval", pieces=tuple(pieces)))
    return QuasiBasis(tuple(fns), region)


def quasi_basis_residual(
    system: PartialSystem,
    pot: Potential,
    qb: QuasiBasis,
    a: tr.TestFunction,
    points: Sequence,
) -> float:
    """Max pointwise residual of the reconstruction identity.

    sum_i u_i(x) L(u_i a)(phi x) must give back a(x) wherever the partition
    sums to one.
    """

    def u_val(v: tr.TestFunction, x) -> float:
        if system.backend == "graph":
            ind = v.value(x)
            if ind == 0:
                return 0.0
            return math.sqrt(float(ind)) / math.sqrt(float(dyn.rho(system, pot, x)))
        vx = v.value(x)
        if vx == 0:
            return 0.0
        return math.sqrt(float(vx) / float(pot.value(x)))

    worst = 0.0
    for x in points:
        y = dyn.phi(system, x)
        total = 0.0
        sum_v = 0.0
        for v in qb.functions:
            ux = u_val(v, x)
            sum_v += float(v.value(x))
            if ux == 0.0:
                continue
            inner = 0.0
            for xp, w in dyn.preimages(system, pot, y, 1):
                if w == 0:
                    continue
                inner += float(w) * u_val(v, xp) * float(a.value(xp))
            total += ux * inner
        worst = max(worst, abs(total - float(a.value(x)) * sum_v))
    return worst


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------


def rescaled_potential(pot: Potential, omega: tr.TestFunction) -> Potential:
    """The weight rho * omega, staying in the affine class or failing loudly."""
    if pot.backend != "interval" or omega.backend != "interval":
        raise ValidationError("rescaling is an interval-backend operation")
    pieces = []
    for iv, m1, c1 in pot.pieces:
        for jv, m2, c2 in omega.pieces:
            inter = iv.intersection(jv)
            if inter is None:
                continue
            if m1 != 0 and m2 != 0:
                raise UnsupportedPotential(
                    f"product weight is quadratic on {inter}"
                )
            if m1 == 0:
                piece = (inter, m2 * c1, c2 * c1)
            else:
                piece = (inter, m1 * c2, c1 * c2)
            pieces.append(piece)
    overrides = []
    for x, v in pot.overrides:
        overrides.append((x, v * omega.value(x)))
    return Potential("interval", pieces=tuple(pieces), overrides=tuple(overrides))


def rescale_check(handle: tr.TransferHandle, omega: tr.TestFunction, anchor, depth: int) -> float:
    """T for the rescaled weight must equal diag(sqrt omega) T, node for node."""
    pot2 = rescaled_potential(handle.potential, omega)
    h2 = tr.TransferHandle.create(handle.system, pot2)
    b1 = OrbitBasis(handle, anchor, depth, drop_zero=False)
    b2 = OrbitBasis(h2, anchor, depth, drop_zero=False)
    if [n.point for n in b1.nodes] != [n.point for n in b2.nodes]:
        raise ValidationError("node mismatch between the two weights")
    root = np.diag(
        np.array([math.sqrt(float(omega.value(nd.point))) for nd in b1.nodes])
    )
    diff = b2.T() - root @ b1.T()
    res = float(np.abs(diff).max())
    one = tr.TestFunction.const_on(RationalInterval(b1.system.ival.space.min(), b1.system.ival.space.max()), 1)
    res = max(res, check_transfer_relation(b2, one))
    return res
