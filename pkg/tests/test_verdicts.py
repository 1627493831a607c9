from fractions import Fraction as F

import pytest

from xferop import dynamics as dyn
from xferop import specfile
from xferop import transfer as tr
from xferop import verdicts as vd
from xferop.errors import ValidationError
from xferop.intervals import IntervalSet, RationalInterval


@pytest.fixture(scope="module")
def tent():
    return specfile.bundled("tent_std")


@pytest.fixture(scope="module")
def loop1():
    return specfile.bundled("loop1")


@pytest.fixture(scope="module")
def loops2():
    return specfile.bundled("loops2")


@pytest.fixture(scope="module")
def shift2():
    return specfile.bundled("fullshift2")


@pytest.fixture(scope="module")
def identity_system():
    sys_ = dyn.PartialSystem(
        "interval",
        interval=dyn.IntervalSystem(
            IntervalSet.closed(0, 1), [dyn.AffineBranch(RationalInterval(0, 1), 1, 0)]
        ),
        name="ident",
    )
    pot = dyn.Potential("interval", pieces=((RationalInterval(0, 1), F(0), F(1)),))
    return sys_, pot


@pytest.fixture(scope="module")
def pure_contraction():
    # x/2 on [0,1] with a weight that never vanishes
    sys_ = dyn.PartialSystem(
        "interval",
        interval=dyn.IntervalSystem(
            IntervalSet.closed(0, 1), [dyn.AffineBranch(RationalInterval(0, 1), F(1, 2), 0)]
        ),
        name="shrink",
    )
    pot = dyn.Potential("interval", pieces=((RationalInterval(0, 1), F(0), F(1)),))
    return sys_, pot


class TestVerdictType:
    def test_status_certificate_coupling(self):
        with pytest.raises(ValidationError):
            vd.Verdict("Minimal", "Holds", None, 4)
        with pytest.raises(ValidationError):
            vd.Verdict("Minimal", "Unknown", "stray", 4)
        with pytest.raises(ValidationError):
            vd.Verdict("Minimal", "Maybe", None, 4)
        with pytest.raises(ValidationError):
            vd.Verdict("Openness", "Holds", "c", 4)

    def test_str_and_flags(self):
        v = vd.Verdict("TopFree", "Unknown", None, 7)
        assert "TopFree" in str(v) and "7" in str(v)
        assert not v.holds and not v.fails


class TestTopFree:
    def test_tent_holds(self, tent):
        v = vd.check_top_free(tent.system, tent.potential, 8)
        assert v.holds
        assert v.certificate.branches_scanned == sum(2**n for n in range(1, 9))

    def test_doubling_holds(self):
        s = specfile.bundled("doubling")
        assert vd.check_top_free(s.system, s.potential, 6).holds

    def test_loop1_fails_with_cycle(self, loop1):
        v = vd.check_top_free(loop1.system, loop1.potential, 6)
        assert v.fails
        assert v.certificate == vd.CycleNoExit(("e",))

    def test_loops2_fails(self, loops2):
        v = vd.check_top_free(loops2.system, loops2.potential, 6)
        assert v.fails
        assert v.certificate.edges in (("a",), ("b",))

    def test_fullshift_holds_with_exits(self, shift2):
        v = vd.check_top_free(shift2.system, shift2.potential, 6)
        assert v.holds
        # each loop is witnessed by the other loop as its exit
        assert (("e0",), "e1") in v.certificate.cycles
        assert (("e1",), "e0") in v.certificate.cycles

    def test_identity_fails_and_replays(self, identity_system):
        sys_, pot = identity_system
        v = vd.check_top_free(sys_, pot, 4)
        assert v.fails
        cert = v.certificate
        assert cert.n == 1 and not cert.window.is_point
        assert vd.verify_periodic_window(sys_, pot, cert)

    def test_depth_monotone(self, tent, loop1):
        for s, expect in ((tent, "Holds"), (loop1, "Fails")):
            for d in (3, 5, 8):
                assert vd.check_top_free(s.system, s.potential, d).status == expect


class TestInvariant:
    def test_whole_space(self, tent):
        space = tent.system.ival.space
        assert vd.check_invariant(tent.system, tent.potential, space) == (True, True)

    def test_tent_open_interval(self, tent):
        u = IntervalSet.of(RationalInterval(0, 1, False, False))
        pos, neg = vd.check_invariant(tent.system, tent.potential, u)
        assert pos is False  # the peak maps into the deleted endpoint
        assert neg is True

    def test_loops2_single_loop(self, loops2):
        g = loops2.system.gph
        u = (g.vertex_point("u"),)
        assert vd.check_invariant(loops2.system, loops2.potential, u) == (True, True)

    def test_halving_interior(self):
        s = specfile.bundled("halving")
        u = IntervalSet.of(RationalInterval(0, 1, False, False))
        assert vd.check_invariant(s.system, s.potential, u) == (True, True)


class TestMinimal:
    def test_tent_holds(self, tent):
        v = vd.check_minimal(tent.system, tent.potential, 8)
        assert v.holds
        assert v.certificate.seeds > 500

    def test_loop1_holds(self, loop1):
        assert vd.check_minimal(loop1.system, loop1.potential, 6).holds

    def test_fullshift_holds(self, shift2):
        assert vd.check_minimal(shift2.system, shift2.potential, 6).holds

    def test_loops2_fails_one_loop(self, loops2):
        v = vd.check_minimal(loops2.system, loops2.potential, 6)
        assert v.fails
        region = v.certificate.region
        assert len(region) == 1 and region[0].rng in ("u", "v")
        assert vd.check_invariant(loops2.system, loops2.potential, region) == (True, True)

    def test_halving_fails_with_invariant_window(self):
        s = specfile.bundled("halving")
        v = vd.check_minimal(s.system, s.potential, 6)
        assert v.fails
        region = v.certificate.region
        assert vd.check_invariant(s.system, s.potential, region) == (True, True)
        assert region != s.system.ival.space and not region.is_empty

    def test_doubling_seam_artifact_is_invariant(self):
        # the half-open seam leaves the fixed endpoint with no other preimage,
        # so its complement is a genuine invariant open set
        s = specfile.bundled("doubling")
        v = vd.check_minimal(s.system, s.potential, 6)
        assert v.fails
        assert v.certificate.region == IntervalSet.of(RationalInterval(0, 1, True, False))


class TestContractingSet:
    def test_designed_negative_reports_inclusion(self, tent):
        v = IntervalSet.of(RationalInterval(F(1, 16), F(3, 8), False, False))
        u = IntervalSet.of(RationalInterval(F(1, 32), F(3, 16), False, False))
        rep = vd.check_contracting_set(tent.system, tent.potential, v, [(u, 1)])
        assert not rep.ok and rep.violated == "piece_not_regular"

    def test_designed_negative_cover_failure(self, tent):
        v = IntervalSet.of(RationalInterval(F(1, 16), F(3, 8), False, False))
        u = IntervalSet.of(RationalInterval(F(1, 16), F(3, 16), False, False))
        rep = vd.check_contracting_set(tent.system, tent.potential, v, [(u, 1)])
        assert not rep.ok and rep.violated == "closure_not_covered"

    def test_manual_positive(self, tent):
        v = IntervalSet.of(RationalInterval(F(1, 8), F(1, 2), False, False))
        u = IntervalSet.of(RationalInterval(F(23, 64), F(31, 64), False, False))
        assert vd.check_contracting_set(tent.system, tent.potential, v, [(u, 2)]).ok

    def test_empty_region(self, tent):
        u = IntervalSet.of(RationalInterval(F(1, 4), F(3, 8), False, False))
        rep = vd.check_contracting_set(tent.system, tent.potential, IntervalSet.empty(), [(u, 1)])
        assert not rep.ok and rep.violated == "region_empty"

    def test_overlapping_pieces(self, tent):
        v = IntervalSet.of(RationalInterval(F(1, 8), F(1, 2), False, False))
        u1 = IntervalSet.of(RationalInterval(F(1, 4), F(3, 8), False, False))
        u2 = IntervalSet.of(RationalInterval(F(5, 16), F(7, 16), False, False))
        rep = vd.check_contracting_set(tent.system, tent.potential, v, [(u1, 2), (u2, 2)])
        assert not rep.ok and rep.violated == "not_disjoint"

    def test_graph_positive_and_exhausted(self, shift2):
        g = shift2.system.gph
        v = (g.path_point(("e0",)),)
        u = (g.path_point(("e0", "e0")),)
        assert vd.check_contracting_set(shift2.system, shift2.potential, v, [(u, 1)]).ok
        rep = vd.check_contracting_set(shift2.system, shift2.potential, v, [(v, 1)])
        assert not rep.ok and rep.violated == "region_exhausted"


class TestContracting:
    def test_tent_holds_at_one_third(self, tent):
        v = vd.check_contracting(tent.system, tent.potential, 8)
        assert v.holds
        cert = v.certificate
        assert cert.x0 == F(1, 3)
        assert len(cert.scales) >= 4
        for scale in cert.scales:
            rep = vd.check_contracting_set(tent.system, tent.potential, scale.region, scale.pieces)
            assert rep.ok

    def test_fullshift_holds_and_replays(self, shift2):
        v = vd.check_contracting(shift2.system, shift2.potential, 8)
        assert v.holds
        for scale in v.certificate.scales:
            rep = vd.check_contracting_set(
                shift2.system, shift2.potential, scale.region, scale.pieces
            )
            assert rep.ok

    def test_loop1_fails_deterministic(self, loop1):
        v = vd.check_contracting(loop1.system, loop1.potential, 6)
        assert v.fails
        assert v.certificate.kind == "deterministic_inverse_orbits"

    def test_halving_fails_domain(self):
        s = specfile.bundled("halving")
        v = vd.check_contracting(s.system, s.potential, 6)
        assert v.fails
        assert v.certificate.kind == "domain_not_positive"
        assert v.certificate.detail.contains(F(1))

    def test_pure_contraction_obstructed(self, pure_contraction):
        sys_, pot = pure_contraction
        v = vd.check_contracting(sys_, pot, 6)
        assert v.fails
        assert v.certificate.kind == "no_expanding_branch"


class TestDerivedVerdicts:
    def test_loop1_simple_fails(self, loop1):
        v = vd.verdict_simple(loop1.system, loop1.potential, 6)
        assert v.fails
        assert [p.property for p in v.certificate] == ["TopFree"]
        assert any("single circuit" in n for n in v.notes)

    def test_loops2_simple_fails_via_minimality(self, loops2):
        v = vd.verdict_simple(loops2.system, loops2.potential, 6)
        assert v.fails
        assert "Minimal" in [p.property for p in v.certificate]

    def test_fullshift_simple_holds(self, shift2):
        assert vd.verdict_simple(shift2.system, shift2.potential, 6).holds

    def test_tent_purely_infinite(self, tent):
        v = vd.verdict_purely_infinite(tent.system, tent.potential, 8)
        assert v.holds
        assert any("Kirchberg" in n for n in v.notes)

    def test_fullshift_purely_infinite(self, shift2):
        assert vd.verdict_purely_infinite(shift2.system, shift2.potential, 8).holds

    def test_halving_purely_infinite_fails(self):
        s = specfile.bundled("halving")
        assert vd.verdict_purely_infinite(s.system, s.potential, 6).fails

    def test_one_circuit(self, tent, loop1, loops2, shift2):
        assert vd.check_one_circuit(loop1.system, loop1.potential).holds
        assert vd.check_one_circuit(shift2.system, shift2.potential).fails
        assert vd.check_one_circuit(loops2.system, loops2.potential).fails
        assert vd.check_one_circuit(tent.system, tent.potential).fails


class TestWitnessNorms:
    def test_loop1_annihilated_in_orbit_rep(self, loop1):
        free = vd.check_top_free(loop1.system, loop1.potential, 6)
        orbit, regular = vd.periodic_witness_norms(
            loop1.system, loop1.potential, free.certificate, depth=6, width=16
        )
        assert orbit <= 1e-10
        assert regular >= 0.1

    def test_identity_window_annihilated(self, identity_system):
        sys_, pot = identity_system
        free = vd.check_top_free(sys_, pot, 4)
        orbit, regular = vd.periodic_witness_norms(sys_, pot, free.certificate, depth=4, width=12)
        assert orbit <= 1e-10
        assert regular >= 0.1

    def test_fullshift_no_annihilation(self, shift2):
        handle = tr.TransferHandle.create(shift2.system, shift2.potential)
        g = shift2.system.gph
        anchor = g.path_point(("e0",) * 4)
        fns = [
            tr.TestFunction.indicator(g.path_point(w))
            for w in (("e0",), ("e1",), ("e0", "e1"), ("e1", "e0"))
        ]
        for orbit, regular in vd.sampled_witness_norms(handle, anchor, 5, 3, fns):
            assert orbit >= regular - 1e-6
            assert orbit >= 0.1
