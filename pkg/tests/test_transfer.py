from fractions import Fraction as F

import pytest

from xferop import dynamics as dyn
from xferop import specfile
from xferop import transfer as tr
from xferop.errors import NotValidated, SupportViolation, ValidationError
from xferop.intervals import IntervalSet, RationalInterval


@pytest.fixture(scope="module")
def tent():
    return specfile.bundled("tent_std")


@pytest.fixture(scope="module")
def tent_handle(tent):
    return tr.TransferHandle.create(tent.system, tent.potential)


class TestValidate:
    def test_tent_std_is_valid_norm_one(self, tent):
        v = tr.validate(tent.system, tent.potential)
        assert v.valid and v.norm == 1 and v.defects == ()

    def test_seam_without_override_is_fatal(self, tent):
        pot = dyn.Potential("interval", pieces=((RationalInterval(0, 1), 0, F(1, 2)),))
        v = tr.validate(tent.system, pot)
        assert not v.valid
        (d,) = v.defects
        assert d.kind == "collision_sum" and d.fatal
        assert (d.x0, d.y0, d.side) == (F(1, 2), F(1), -1)
        # both fold germs arrive below 1, so the limit sum doubles the weight
        assert d.required == 1 and d.found == F(1, 2)

    def test_tent_half_seam_sum_works(self):
        s = specfile.bundled("tent_half")
        v = tr.validate(s.system, s.potential)
        assert v.valid and v.norm == 1 and v.defects == ()

    def test_doubling_warns_but_passes(self):
        s = specfile.bundled("doubling")
        v = tr.validate(s.system, s.potential)
        assert v.valid and v.norm == 1
        (d,) = v.defects
        assert not d.fatal and d.kind == "one_sided_jump"
        assert (d.x0, d.y0) == (F(1, 2), F(1))
        assert v.warnings

    def test_halving_needs_taper(self):
        s = specfile.bundled("halving")
        assert tr.validate(s.system, s.potential).valid
        flat = dyn.Potential("interval", pieces=((RationalInterval(0, 1), 0, 1),))
        v = tr.validate(s.system, flat)
        assert not v.valid
        assert any(d.kind == "missing_arrival" and d.x0 == 1 for d in v.defects)

    def test_graph_norms(self):
        assert tr.validate(*_sp("loop1")).norm == 1
        assert tr.validate(*_sp("loops2")).norm == 1
        assert tr.validate(*_sp("fullshift2")).norm == 2

    def test_require_valid_raises(self, tent):
        pot = dyn.Potential("interval", pieces=((RationalInterval(0, 1), 0, F(1, 2)),))
        h = tr.TransferHandle.create(tent.system, pot)
        with pytest.raises(NotValidated):
            h.require_valid()


def _sp(name):
    s = specfile.bundled(name)
    return s.system, s.potential


class TestApply:
    def test_unit_is_fixed(self, tent_handle):
        one = tr.TestFunction.const_on(RationalInterval(0, 1), 1)
        for k in range(9):
            assert tr.apply(tent_handle, one, F(k, 8)) == 1
        assert tr.apply(tent_handle, one, 1, n=5) == 1

    def test_hat_against_hand_sum(self, tent_handle, tent):
        hat = tr.TestFunction.hat(F(1, 2), F(1, 4))
        assert tr.apply(tent_handle, hat, 1) == 1
        # generic point: both fiber weights are 1/2
        y = F(3, 8)
        x0, x1 = F(3, 16), F(13, 16)
        assert tr.apply(tent_handle, hat, y) == (hat.value(x0) + hat.value(x1)) / 2

    def test_identity_exact(self, tent_handle):
        a = tr.TestFunction.hat(F(1, 2), F(1, 4))
        b = tr.TestFunction.affine_on(RationalInterval(0, 1), 1, 0)
        pts = [F(k, 16) for k in range(17)]
        assert tr.transfer_identity_check(tent_handle, a, b, pts) == 0

    def test_graph_apply(self):
        s = specfile.bundled("fullshift2")
        h = tr.TransferHandle.create(s.system, s.potential)
        g = s.system.gph
        p = g.path_point(("e1",))
        ind = tr.TestFunction.indicator(g.path_point(("e0", "e1")))
        # only the e0-prepend lands in the cylinder
        assert tr.apply(h, ind, p) == 1
        ind1 = tr.TestFunction.indicator(g.path_point(("e1", "e1")))
        assert tr.apply(h, ind, p) + tr.apply(h, ind1, p) == 2

    def test_coarse_point_rejected(self):
        s = specfile.bundled("fullshift2")
        g = s.system.gph
        fine = tr.TestFunction.indicator(g.path_point(("e0", "e1")))
        with pytest.raises(SupportViolation):
            fine.value(g.path_point(("e0",)))

    def test_backend_mismatch(self, tent_handle):
        with pytest.raises(ValidationError):
            tr.apply(tent_handle, tr.TestFunction("graph"), F(1, 2))


class TestFunctions:
    def test_hat_shape(self):
        hat = tr.TestFunction.hat(F(1, 2), F(1, 4), 2)
        assert hat.value(F(1, 2)) == 2
        assert hat.value(F(3, 8)) == 1
        assert hat.value(F(1, 4)) == 0
        assert hat.value(F(9, 10)) == 0
        assert hat.support() == IntervalSet.closed(F(1, 4), F(3, 4))
        assert hat.sup_norm_bound() == 2

    def test_disagreeing_pieces_rejected(self):
        with pytest.raises(ValidationError):
            tr.TestFunction(
                "interval",
                pieces=(
                    (RationalInterval(0, F(1, 2)), 0, 1),
                    (RationalInterval(F(1, 2), 1), 0, 2),
                ),
            )

    def test_scaled(self):
        hat = tr.TestFunction.hat(F(1, 2), F(1, 2)).scaled(F(3))
        assert hat.value(F(1, 2)) == 3


class TestDuals:
    def test_atomic_pushforward(self, tent_handle):
        mu = tr.AtomicMeasure("interval", ((F(1), F(1)),))
        nu = tr.dual_apply(tent_handle, mu)
        assert nu.atoms == ((F(1, 2), F(1)),)
        nu2 = tr.dual_apply(tent_handle, nu)
        assert nu2.atoms == ((F(1, 4), F(1, 2)), (F(3, 4), F(1, 2)))
        assert nu2.total_mass() == 1

    def test_duality_pairing(self, tent_handle):
        # mu(L a) must equal (L* mu)(a), exactly
        a = tr.TestFunction.hat(F(3, 8), F(1, 8))
        mu = tr.AtomicMeasure("interval", ((F(1, 3), F(2)), (F(7, 9), F(1))))
        lhs = sum(
            (m * tr.apply(tent_handle, a, y) for y, m in mu.atoms), F(0)
        )
        assert lhs == tr.dual_apply(tent_handle, mu).integrate(a)

    def test_ulam_columns_are_stochastic(self, tent_handle):
        m = tr.ulam_matrix(tent_handle, 8)
        for j in range(8):
            assert sum(m[i][j] for i in range(8)) == 1
        assert m[0][0] == F(1, 2) and m[0][7] == F(1, 2)

    def test_uniform_density_is_invariant(self, tent_handle):
        mu = tr.UlamMeasure(0, 1, (F(1),) * 16)
        nu = tr.dual_apply(tent_handle, mu)
        assert nu.densities == (F(1),) * 16
        assert nu.total_mass() == 1

    def test_ulam_rejects_graph(self):
        s = specfile.bundled("loop1")
        h = tr.TransferHandle.create(s.system, s.potential)
        with pytest.raises(ValidationError):
            tr.ulam_matrix(h, 4)
