import math
import time
from fractions import Fraction as F

import pytest

from xferop import dynamics as dyn
from xferop import rep
from xferop import specfile
from xferop import thermo as th
from xferop import transfer as tr
from xferop.errors import (
    NoSolution,
    OutOfDomain,
    SupportViolation,
    UnsupportedPotential,
    ValidationError,
)
from xferop.intervals import IntervalSet, RationalInterval

LN2 = math.log(2)
UNIT = RationalInterval(F(0), F(1))


@pytest.fixture(scope="module")
def tent():
    return specfile.bundled("tent_std")


@pytest.fixture(scope="module")
def tent_handle(tent):
    return tr.TransferHandle.create(tent.system, tent.potential)


@pytest.fixture(scope="module")
def psi_one(tent):
    return th.PotentialFunction.const(tent.system, 1)


@pytest.fixture(scope="module")
def loop1():
    s = specfile.bundled("loop1")
    return s, tr.TransferHandle.create(s.system, s.potential)


def _psi_affine(system, slope, intercept):
    pot = dyn.Potential(
        "interval", pieces=((UNIT, F(slope), F(intercept)),), allow_negative=True
    )
    return th.PotentialFunction.of(system, pot)


class TestPotentialFunction:
    def test_const_interval(self, tent, psi_one):
        assert psi_one.constant_value() == 1
        assert psi_one.value(F(1, 3)) == 1

    def test_birkhoff_sums_along_orbit(self, tent):
        psi = _psi_affine(tent.system, 1, 0)
        # orbit of 1/8 under the tent: 1/8 -> 1/4
        assert psi.birkhoff(F(1, 8), 2) == F(1, 8) + F(1, 4)
        assert psi.birkhoff(F(1, 8), 0) == 0
        assert psi.constant_value() is None

    def test_coverage_required(self, tent):
        pot = dyn.Potential(
            "interval",
            pieces=((RationalInterval(F(0), F(1, 2)), F(0), F(1)),),
            allow_negative=True,
        )
        with pytest.raises(ValidationError):
            th.PotentialFunction.of(tent.system, pot)

    def test_jump_rejected(self, tent):
        pot = dyn.Potential(
            "interval",
            pieces=(
                (RationalInterval(F(0), F(1, 2), True, False), F(0), F(0)),
                (RationalInterval(F(1, 2), F(1)), F(0), F(1)),
            ),
            allow_negative=True,
        )
        with pytest.raises(ValidationError):
            th.PotentialFunction.of(tent.system, pot)

    def test_overrides_rejected(self, tent):
        pot = dyn.Potential(
            "interval",
            pieces=((UNIT, F(0), F(1)),),
            overrides=((F(1, 2), F(1)),),
            allow_negative=True,
        )
        with pytest.raises(ValidationError):
            th.PotentialFunction.of(tent.system, pot)

    def test_backend_mismatch(self, tent, loop1):
        s, _ = loop1
        with pytest.raises(ValidationError):
            th.PotentialFunction.of(tent.system, dyn.Potential("graph", weights=(("e", F(1)),)))

    def test_graph_needs_every_edge(self, loop1):
        s, _ = loop1
        with pytest.raises(ValidationError):
            th.PotentialFunction.of(
                s.system, dyn.Potential("graph", weights=(), allow_negative=True)
            )

    def test_graph_values(self, loop1):
        s, _ = loop1
        psi = th.PotentialFunction.const(s.system, F(3, 2))
        p = s.system.gph.path_point(("e", "e"))
        assert psi.value(p) == F(3, 2)
        assert psi.birkhoff(p, 2) == 3
        with pytest.raises(OutOfDomain):
            psi.value(s.system.gph.vertex_point("v"))


class TestSigmaAction:
    def test_lambda_zero_is_identity(self, tent, psi_one):
        hat = tr.TestFunction.hat(F(1, 4), F(1, 4), 1)
        mon = rep.Monomial(hat, 2, 1, hat)
        tw = th.sigma_action(mon, 0.0, psi_one)
        for x in (F(1, 8), F(1, 4), F(3, 8)):
            assert tw.left_value(x) == complex(hat.value(x))
            assert tw.right_value(x) == complex(hat.value(x))

    def test_group_property(self, tent):
        psi = _psi_affine(tent.system, 1, F(-1, 4))
        mon = rep.Monomial(None, 2, 1, None)
        l1, l2 = 0.7 - 0.3j, -1.1 + 0.45j
        once = th.sigma_action(mon, l1 + l2, psi)
        twice = th.sigma_action(th.sigma_action(mon, l1, psi), l2, psi)
        for x in (F(1, 8), F(1, 3), F(5, 8)):
            assert abs(once.left_value(x) - twice.left_value(x)) <= 1e-12
            assert abs(once.right_value(x) - twice.right_value(x)) <= 1e-12

    def test_imaginary_parameter_damps_by_energy(self, tent, psi_one):
        # at lambda = i*beta and unit energy the generator side picks up e^-beta
        beta = 0.9
        mon = rep.Monomial(tr.TestFunction.const_on(UNIT, 1), 1, 0, None)
        tw = th.sigma_action(mon, complex(0, beta), psi_one)
        assert abs(tw.left_value(F(1, 3)) - math.exp(-beta)) <= 1e-15
        mon2 = rep.Monomial(None, 0, 1, tr.TestFunction.const_on(UNIT, 1))
        tw2 = th.sigma_action(mon2, complex(0, beta), psi_one)
        assert abs(tw2.right_value(F(1, 3)) - math.exp(beta)) <= 1e-15

    def test_mixed_energies_rejected(self, tent, psi_one):
        other = _psi_affine(tent.system, 0, 2)
        tw = th.sigma_action(rep.Monomial(None, 1, 1, None), 1.0, psi_one)
        with pytest.raises(ValidationError):
            th.sigma_action(tw, 1.0, other)


class TestPositiveEnergy:
    def test_unit_energy_holds(self, tent, psi_one):
        v = th.check_positive_energy(tent.system, psi_one, depth=8)
        assert v.property == "PositiveEnergy" and v.holds
        assert v.certificate.depth == 8 and v.certificate.windows > 0

    def test_zero_energy_fails_at_level_one(self, tent):
        psi = th.PotentialFunction.const(tent.system, 0)
        v = th.check_positive_energy(tent.system, psi, depth=4)
        assert v.fails and v.certificate.n == 1
        assert v.certificate.window is not None
        assert psi.birkhoff(v.certificate.point, 1) == 0

    def test_affine_witness_is_exact_root(self, tent):
        psi = _psi_affine(tent.system, 1, F(-1, 4))
        v = th.check_positive_energy(tent.system, psi, depth=6)
        assert v.fails
        c = v.certificate
        assert c.n == 1 and c.point == F(1, 4)
        assert psi.birkhoff(c.point, c.n) == 0

    def test_deeper_cancellation_found(self, tent):
        # psi = x - 3/8 has no level-1 zero on [0, 3/8) branches only at 3/8;
        # the scan must report the shallowest exact zero
        psi = _psi_affine(tent.system, 1, F(-3, 8))
        v = th.check_positive_energy(tent.system, psi, depth=5)
        assert v.fails and psi.birkhoff(v.certificate.point, v.certificate.n) == 0

    def test_graph_scan(self, loop1):
        s, _ = loop1
        good = th.PotentialFunction.const(s.system, 1)
        assert th.check_positive_energy(s.system, good, depth=6).holds
        bad = th.PotentialFunction.const(s.system, 0)
        v = th.check_positive_energy(s.system, bad, depth=6)
        assert v.fails and v.certificate.n == 1
        assert v.certificate.chain == v.certificate.point.word


class TestGridFunctions:
    def test_transfer_grid_matches_pointwise_apply(self, tent_handle):
        a = tr.TestFunction.hat(F(1, 4), F(1, 8), 1)
        g = th._transfer_grid(tent_handle, a)
        for k in range(33):
            y = F(k, 32)
            assert g.value(y) == tr.apply(tent_handle, a, y)

    def test_fiber_sum_grid_matches_bare_sums(self, tent_handle):
        sys_ = tent_handle.system.ival
        a = tr.TestFunction.hat(F(3, 8), F(1, 8), 1)
        g = th._fiber_sum_grid(tent_handle, a)
        for k in range(25):
            y = F(k, 24)
            assert g.value(y) == sum(a.value(x) for x in sys_.fiber(y))

    def test_grid_product(self, tent_handle):
        carrier = UNIT
        a = th._fn_grid(tr.TestFunction.hat(F(1, 2), F(1, 2), 1), carrier)
        b = th._pot_grid(tent_handle.potential, carrier)
        p = th._grid_product(a, b)
        for x in (F(1, 8), F(1, 2), F(7, 8)):
            assert p.value(x) == a.value(x) * b.value(x)

    def test_value_outside_range_is_zero(self):
        g = th.GridFunction((F(0), F(1)), ((F(1), F(0), F(0)),), (F(1), F(1)))
        assert g.value(F(2)) == 0 and g.value(F(-1)) == 0

    def test_dyadic_level_sum_closed_form(self, tent_handle):
        carrier = UNIT
        fns = (
            tr.TestFunction.hat(F(1, 4), F(1, 8), 1),
            tr.TestFunction.affine_on(UNIT, 1, 0),
            tr.TestFunction.hat(F(1, 2), F(1, 4), 1),
        )
        for a in fns:
            g = th._fn_grid(a, carrier)
            for n in range(0, 9):
                step = F(1, 2 ** (n + 1))
                direct = sum(a.value((2 * j + 1) * step) for j in range(2**n))
                assert th._dyadic_level_sum(g, F(0), F(1), n) == direct


class TestCascadeMeasure:
    def test_dyadic_detection_and_mass(self, tent_handle):
        mu = th.inverse_orbit_measure(tent_handle, 1.0, 30)
        assert mu.dyadic and mu.growth == 2
        assert mu.center == F(1, 2)
        assert mu.level_counts[:4] == (1, 2, 4, 8)
        assert abs(mu.total_mass() - 1.0) <= 1e-12
        q = 2 * math.exp(-1.0)
        assert abs(mu.tail_bound - q**31 / (1 - q)) <= 1e-15

    def test_explicit_matches_closed_form(self, tent_handle):
        mud = th.inverse_orbit_measure(tent_handle, 0.8, 9)
        mue = th.inverse_orbit_measure(tent_handle, 0.8, 9, force_explicit=True)
        assert mud.dyadic and not mue.dyadic
        assert mud.level_counts == mue.level_counts
        for a in (
            tr.TestFunction.hat(F(1, 4), F(1, 8), 1),
            tr.TestFunction.affine_on(UNIT, 1, 0),
        ):
            assert abs(mud.integrate_fn(a) - mue.integrate_fn(a)) <= 1e-14

    def test_off_grid_center_goes_explicit(self, tent_handle):
        mu = th.inverse_orbit_measure(tent_handle, 1.0, 6, center=F(1, 3))
        assert not mu.dyadic and mu.growth == 2
        assert abs(mu.total_mass() - 1.0) <= 1e-12
        assert sum(m for _, m in mu.atoms()) == pytest.approx(1.0, abs=1e-12)

    def test_dead_end_center(self):
        s = specfile.bundled("halving")
        h = tr.TransferHandle.create(s.system, s.potential)
        mu = th.inverse_orbit_measure(h, 1.0, 4, center=F(1, 2))
        # preimages climb 1/2 -> 1 and then leave the space
        assert mu.level_counts == (1, 1, 0, 0, 0)
        assert mu.growth is None and mu.tail_bound is None
        assert abs(mu.total_mass() - 1.0) <= 1e-12

    def test_atom_budget_enforced(self, tent_handle):
        with pytest.raises(UnsupportedPotential):
            th.inverse_orbit_measure(tent_handle, 1.0, 20, force_explicit=True, max_atoms=1000)

    def test_graph_backend_rejected(self, loop1):
        _, h = loop1
        with pytest.raises(ValidationError):
            th.inverse_orbit_measure(h, 1.0, 4)

    def test_closed_form_has_no_atom_list(self, tent_handle):
        mu = th.inverse_orbit_measure(tent_handle, 1.0, 20)
        with pytest.raises(UnsupportedPotential):
            list(mu.atoms())
        with pytest.raises(UnsupportedPotential):
            mu.integrate_callable(lambda x: 1.0)


class TestConformalResidual:
    def test_lebesgue_at_log_two_is_exact(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 64)
        fns = [
            tr.TestFunction.const_on(UNIT, 1),
            tr.TestFunction.hat(F(1, 2), F(1, 2), 1),
            tr.TestFunction.hat(F(1, 4), F(1, 4), 1),
            tr.TestFunction.affine_on(UNIT, 1, 0),
        ]
        r = th.conformal_residual(tent_handle, psi_one, LN2, mu, fns)
        assert r.kind == "conformal" and len(r.rows) == 4
        assert r.max_residual <= 1e-12

    def test_wrong_beta_detected(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 64)
        ones = [tr.TestFunction.const_on(UNIT, 1)]
        r = th.conformal_residual(tent_handle, psi_one, 1.0, mu, ones)
        # both sides are exact integrals: lhs 1, rhs e/2
        assert abs(r.max_residual - (math.e / 2 - 1)) <= 1e-12

    def test_point_mass_fails_on_separating_hat(self, tent_handle, psi_one):
        mu = tr.AtomicMeasure("interval", ((F(1, 4), F(1)),))
        hat = tr.TestFunction.hat(F(1, 4), F(1, 16), 1)
        r = th.conformal_residual(tent_handle, psi_one, LN2, mu, [hat])
        assert abs(r.max_residual - 1.0) <= 1e-12
        assert r.max_residual >= 0.1

    def test_zero_function_gives_zero(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 16)
        z = tr.TestFunction.const_on(UNIT, 0)
        r = th.conformal_residual(tent_handle, psi_one, LN2, mu, [z])
        assert r.max_residual == 0.0

    def test_nonconstant_energy_quadrature(self, tent_handle):
        psi = _psi_affine(tent_handle.system, 1, 0)
        mu = th.uniform_ulam(tent_handle, 256)
        beta = 0.7
        r = th.conformal_residual(tent_handle, psi, beta, mu, [tr.TestFunction.const_on(UNIT, 1)])
        predicted = abs(1.0 - (math.exp(beta) - 1) / (2 * beta))
        # composite midpoint at 256 bins carries ~1e-8 of quadrature error
        assert abs(r.max_residual - predicted) <= 5e-8

    def test_float_protocol(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 16)
        r = th.conformal_residual(tent_handle, psi_one, LN2, mu, [tr.TestFunction.const_on(UNIT, 1)])
        assert float(r) == r.max_residual


class TestWeaklyConformal:
    def test_support_must_avoid_irregular_point(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 16)
        with pytest.raises(SupportViolation):
            th.weakly_conformal_residual(
                tent_handle, psi_one, LN2, mu, [th.irregular_hat(tent_handle)]
            )

    def test_weak_equals_strong_after_reweighting(self, tent, tent_handle, psi_one):
        # on the regular region rho is 1/2, so the unweighted identity for a
        # is the weighted identity for 2a; rows must agree for any measure
        a = tr.TestFunction.hat(F(1, 4), F(1, 8), 1)
        measures = [
            th.uniform_ulam(tent_handle, 32),
            tr.UlamMeasure(F(0), F(1), tuple(F(1 + (i % 3), 2) for i in range(32))),
            tr.AtomicMeasure("interval", ((F(3, 8), F(1, 2)), (F(2, 3), F(1, 2)))),
        ]
        for mu in measures:
            w = th.weakly_conformal_residual(tent_handle, psi_one, 0.9, mu, [a])
            s = th.conformal_residual(tent_handle, psi_one, 0.9, mu, [a.scaled(2)])
            assert abs(w.rows[0].residual - s.rows[0].residual) <= 1e-12

    def test_lebesgue_battery_in_regular_region(self, tent, tent_handle, psi_one):
        reg = dyn.regular_set(tent.system, tent.potential).delta_reg
        fns = th.hat_battery(reg, 6)
        assert len(fns) == 6
        mu = th.uniform_ulam(tent_handle, 64)
        r = th.weakly_conformal_residual(tent_handle, psi_one, LN2, mu, fns)
        assert r.kind == "weakly_conformal"
        assert r.max_residual <= 1e-12
        assert all(row.bound is None for row in r.rows)

    def test_cascade_rows_come_with_tail_bounds(self, tent_handle, psi_one):
        mu = th.inverse_orbit_measure(tent_handle, 1.0, 25)
        a = tr.TestFunction.hat(F(1, 4), F(1, 8), 1)
        r = th.weakly_conformal_residual(tent_handle, psi_one, 1.0, mu, [a])
        q = 2 * math.exp(-1.0)
        assert r.rows[0].bound == pytest.approx(2 * q**25, rel=1e-12)
        assert r.within_bounds()

    def test_bound_gate_requires_unit_energy(self, tent_handle):
        mu = th.inverse_orbit_measure(tent_handle, 1.0, 10)
        psi2 = th.PotentialFunction.const(tent_handle.system, 2)
        a = tr.TestFunction.hat(F(1, 4), F(1, 8), 1)
        r = th.weakly_conformal_residual(tent_handle, psi2, 1.0, mu, [a])
        assert r.rows[0].bound is None

    def test_truncation_residual_exact_formula(self, tent, tent_handle, psi_one):
        # residual of the depth-d cascade telescopes to the single dropped
        # term: base * e^beta * e^-(d+1)beta * S_{d+1}(a)
        beta, d = 0.8, 6
        mu = th.inverse_orbit_measure(tent_handle, beta, d, force_explicit=True)
        a = tr.TestFunction.hat(F(1, 4), F(1, 8), 1)
        lvl = [F(1, 2)]
        for _ in range(d + 1):
            lvl = sorted({x for y in lvl for x in tent.system.ival.fiber(y)})
        s_next = float(sum(a.value(x) for x in lvl))
        predicted = mu.base * math.exp(-d * beta) * s_next
        r = th.weakly_conformal_residual(tent_handle, psi_one, beta, mu, [a])
        assert abs(r.rows[0].residual - predicted) <= 1e-15

    def test_graph_weak_residual(self, loop1):
        s, h = loop1
        psi = th.PotentialFunction.const(s.system, 1)
        atom = s.system.gph.path_point(("e",))
        mu = tr.AtomicMeasure("graph", ((atom, F(1)),))
        a = tr.TestFunction.indicator(atom)
        r = th.weakly_conformal_residual(h, psi, 0.0, mu, [a])
        assert r.max_residual == 0.0

    def test_graph_support_check(self, loop1):
        s, h = loop1
        psi = th.PotentialFunction.const(s.system, 1)
        mu = tr.AtomicMeasure("graph", ((s.system.gph.path_point(("e",)), F(1)),))
        # loop1's regular region is the 1-edge cylinder, so the vertex
        # cylinder is strictly coarser and must be refused
        bad = tr.TestFunction.indicator(s.system.gph.vertex_point("v"))
        with pytest.raises(SupportViolation):
            th.weakly_conformal_residual(h, psi, 0.0, mu, [bad])


class TestSolveConformal:
    def test_tent_recovers_log_two_and_lebesgue(self, tent_handle, psi_one):
        t0 = time.time()
        cand = th.solve_conformal(tent_handle, psi_one, bins=1024, bracket=(0.1, 3.0))
        elapsed = time.time() - t0
        assert abs(cand.beta - LN2) <= 1e-8
        assert cand.kind == "conformal"
        assert cand.mu.total_mass() == 1
        tv = th.tv_distance(cand.mu, th.uniform_ulam(tent_handle, 1024))
        assert tv <= F(5, 1024) and float(tv) <= 1e-9
        assert elapsed < 10.0

    def test_tv_bound_decreases_with_bins(self, tent_handle, psi_one):
        bounds = []
        for m in (64, 256, 1024):
            cand = th.solve_conformal(tent_handle, psi_one, bins=m, bracket=(0.1, 3.0))
            tv = th.tv_distance(cand.mu, th.uniform_ulam(tent_handle, m))
            assert tv <= F(5, m)
            bounds.append(F(5, m))
        assert bounds[0] > bounds[1] > bounds[2]

    def test_candidate_satisfies_residual_check(self, tent_handle, psi_one):
        cand = th.solve_conformal(tent_handle, psi_one, bins=256, bracket=(0.1, 3.0))
        fns = [tr.TestFunction.hat(F(1, 2), F(1, 2), 1), tr.TestFunction.const_on(UNIT, 1)]
        r = th.conformal_residual(tent_handle, psi_one, cand.beta, cand.mu, fns)
        assert r.max_residual <= 1e-9

    def test_nonconstant_energy_bisection(self, tent_handle):
        psi = _psi_affine(tent_handle.system, 1, 0)
        cand = th.solve_conformal(tent_handle, psi, bins=256, bracket=(0.5, 6.0))
        assert abs(cand.beta - 3.2668447624892) <= 1e-6
        fns = [
            tr.TestFunction.const_on(UNIT, 1),
            tr.TestFunction.hat(F(1, 2), F(1, 2), 1),
        ]
        r = th.conformal_residual(tent_handle, psi, cand.beta, cand.mu, fns)
        assert r.max_residual <= F(5, 256)

    def test_graph_single_loop_freezes_at_zero(self, loop1):
        s, h = loop1
        psi = th.PotentialFunction.const(s.system, 1)
        cand = th.solve_conformal(h, psi, bracket=(-1.0, 1.0))
        assert abs(cand.beta) <= 1e-9
        ((p, m),) = cand.mu.atoms
        assert p.word == ("e",) and m == 1

    def test_graph_full_shift(self):
        s = specfile.bundled("fullshift2")
        h = tr.TransferHandle.create(s.system, s.potential)
        psi = th.PotentialFunction.const(s.system, 1)
        cand = th.solve_conformal(h, psi, bracket=(0.1, 3.0))
        assert abs(cand.beta - LN2) <= 1e-8
        assert sorted(p.word[0] for p, _ in cand.mu.atoms) == ["e0", "e1"]
        assert all(m == F(1, 2) for _, m in cand.mu.atoms)

    def test_zero_energy_flat_root_reported(self, tent_handle):
        psi0 = th.PotentialFunction.const(tent_handle.system, 0)
        with pytest.raises(NoSolution) as exc:
            th.solve_conformal(tent_handle, psi0, bins=64, bracket=(0.1, 3.0))
        data = exc.value.data
        assert data["flat"] is True
        # the bare fiber-sum operator of the tent has two branches, so the
        # temperature-independent root sits at two, not at one
        assert abs(data["r_lo"] - 2.0) <= 1e-9

    def test_one_sided_bracket_reports_endpoints(self, tent_handle, psi_one):
        with pytest.raises(NoSolution) as exc:
            th.solve_conformal(tent_handle, psi_one, bins=64, bracket=(1.0, 3.0))
        data = exc.value.data
        assert data["flat"] is False
        assert data["r_lo"] < 1 and data["r_hi"] < 1

    def test_flat_root_at_one_returns_degenerate_candidate(self):
        ident = dyn.PartialSystem(
            "interval",
            interval=dyn.IntervalSystem(
                IntervalSet.closed(0, 1), [dyn.AffineBranch(UNIT, F(1), F(0))]
            ),
        )
        pot = dyn.Potential("interval", pieces=((UNIT, F(0), F(1)),))
        h = tr.TransferHandle.create(ident, pot)
        psi0 = th.PotentialFunction.const(ident, 0)
        cand = th.solve_conformal(h, psi0, bins=32, bracket=(0.1, 3.0))
        assert "degenerate" in cand.note
        assert cand.beta == pytest.approx(1.55)
        assert cand.mu.total_mass() == 1

    def test_bad_bracket_rejected(self, tent_handle, psi_one):
        with pytest.raises(ValidationError):
            th.solve_conformal(tent_handle, psi_one, bracket=(2.0, 1.0))

    def test_candidate_mass_enforced(self, tent_handle):
        lopsided = tr.UlamMeasure(F(0), F(1), (F(3),) * 4)
        with pytest.raises(ValidationError):
            th.KMSCandidate(LN2, lopsided, "conformal")
        with pytest.raises(ValidationError):
            th.KMSCandidate(LN2, th.uniform_ulam(tent_handle, 4), "thermal")


class TestKmsChecks:
    def test_battery_at_the_conformal_point(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 256)
        r = th.kms_battery(tent_handle, mu, LN2, psi_one, count=20, seed=7)
        assert len(r.rows) == 20
        assert r.max_residual <= 1e-5 + 10 / 256
        off = [row for row in r.rows if row.label.endswith("off")]
        assert len(off) == 5
        assert all(row.lhs == 0.0 and row.rhs == 0.0 for row in off)
        nontrivial = [row for row in r.rows if abs(row.lhs) > 1e-4]
        assert len(nontrivial) >= 6

    def test_single_pair_analytic_value(self, tent_handle, psi_one):
        # phi(a T T* . T T*) = integral of a * rho = 1/8 for this hat, and
        # the exchange identity keeps both sides there
        mu = th.uniform_ulam(tent_handle, 256)
        hat = tr.TestFunction.hat(F(1, 4), F(1, 4), 1)
        m1 = rep.Monomial(hat, 1, 1, None)
        m2 = rep.Monomial(None, 1, 1, None)
        lhs, rhs = th.kms_pair_values(tent_handle, mu, LN2, psi_one, m1, m2)
        assert abs(lhs - 0.125) <= 1e-12
        assert abs(rhs - 0.125) <= 1e-12

    def test_unbalanced_pair_vanishes_on_both_sides(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 64)
        m1 = rep.Monomial(tr.TestFunction.const_on(UNIT, 1), 1, 0, None)
        lhs, rhs = th.kms_pair_values(tent_handle, mu, LN2, psi_one, m1, m1)
        assert lhs == 0.0 and rhs == 0.0

    def test_state_matches_rep_diagonal(self, tent_handle, psi_one):
        # independent route: the exact structural-expectation diagonal from
        # the matrix model, summed over an atomic measure on the tree nodes
        basis = rep.OrbitBasis(tent_handle, 1, 5)
        n = len(basis.nodes)
        mu = tr.AtomicMeasure("interval", tuple((nd.point, F(1, n)) for nd in basis.nodes))
        mon = rep.Monomial(
            tr.TestFunction.hat(F(1, 4), F(1, 4), 1),
            1,
            1,
            tr.TestFunction.affine_on(UNIT, 1, 0),
        )
        unit = rep.Monomial(None, 0, 0, None)
        lhs, rhs = th.kms_pair_values(tent_handle, mu, 0.0, psi_one, mon, unit)
        expected = float(sum(F(1, n) * v for v in rep.g_values(basis, mon)))
        assert lhs == pytest.approx(expected, abs=1e-13)
        assert rhs == pytest.approx(expected, abs=1e-13)

    def test_wrong_measure_fails_loudly(self, tent_handle, psi_one):
        bad = tr.AtomicMeasure("interval", ((F(1, 4), F(1)),))
        r = th.kms_battery(tent_handle, bad, LN2, psi_one, count=20, seed=7)
        assert r.max_residual >= 0.1

    def test_beta_zero_flagged_noncertifying(self, tent_handle):
        psi0 = th.PotentialFunction.const(tent_handle.system, 0)
        mu = th.uniform_ulam(tent_handle, 32)
        r = th.kms_battery(tent_handle, mu, 0.0, psi0, count=8, seed=1)
        assert r.notes and "certifies nothing" in r.notes[0]

    def test_cascade_states_are_out_of_scope(self, tent_handle, psi_one):
        mu = th.inverse_orbit_measure(tent_handle, 1.0, 20)
        m = rep.Monomial(None, 1, 1, None)
        with pytest.raises(UnsupportedPotential):
            th.kms_residual(tent_handle, mu, 1.0, psi_one, m, m)

    def test_core_check_level_zero_is_trivial(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 64)
        a = tr.TestFunction.hat(F(1, 2), F(1, 4), 1)
        b = tr.TestFunction.const_on(UNIT, 1)
        assert th.core_kms_check(tent_handle, mu, LN2, psi_one, a, b, 0) == 0.0

    def test_core_check_higher_levels(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 256)
        a = tr.TestFunction.hat(F(1, 2), F(1, 4), 1)
        b = tr.TestFunction.const_on(UNIT, 1)
        for n in (1, 2):
            assert th.core_kms_check(tent_handle, mu, LN2, psi_one, a, b, n) <= 1e-12

    def test_core_check_detects_wrong_beta(self, tent_handle, psi_one):
        mu = th.uniform_ulam(tent_handle, 256)
        a = tr.TestFunction.const_on(UNIT, 1)
        b = tr.TestFunction.const_on(UNIT, 1)
        # lhs carries the branch weight 1/2, rhs the damped fiber sum e^-beta
        gap = th.core_kms_check(tent_handle, mu, 1.5, psi_one, a, b, 1)
        assert abs(gap - (0.5 - math.exp(-1.5))) <= 1e-12


class TestHelpers:
    def test_uniform_ulam(self, tent_handle):
        u = th.uniform_ulam(tent_handle, 10)
        assert u.total_mass() == 1 and u.bins == 10

    def test_tv_distance(self, tent_handle):
        u = th.uniform_ulam(tent_handle, 8)
        assert th.tv_distance(u, u) == 0
        v = tr.UlamMeasure(F(0), F(1), (F(2),) * 4 + (F(0),) * 4)
        assert th.tv_distance(u, v) == F(1, 2)
        with pytest.raises(ValidationError):
            th.tv_distance(u, th.uniform_ulam(tent_handle, 16))

    def test_irregular_hat_peaks_at_the_seam(self, tent_handle):
        hat = th.irregular_hat(tent_handle)
        assert hat.value(F(1, 2)) == 1
        assert hat.value(F(1, 4)) == 0 and hat.value(F(3, 4)) == 0

    def test_hat_battery_respects_region(self, tent, tent_handle):
        reg = dyn.regular_set(tent.system, tent.potential).delta_reg
        fns = th.hat_battery(reg, 8)
        assert len(fns) == 8
        for f in fns:
            assert f.support().difference(reg).is_empty

    def test_hat_battery_empty_region(self):
        assert th.hat_battery(IntervalSet.empty(), 3) == []
