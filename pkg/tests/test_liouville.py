import json
import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from reference_values import BUMP_FOURIER, BUMP_MOMENTS
from dlab.liouville import (DEFAULT_BUMP, AtomFamily, Bump, ConstructionError, HomologyPartial,
                            LiouvilleSchedule, assemble_partials, build_F, build_schedule,
                            cocycle, homology_residual, level_l4_norms, parseval_norm,
                            qtilde_coeff, qtilde_eval, qtilde_norm, r_lambda_diagnostics,
                            r_profile, sobolev_growth, support_union_measure,
                            translation_increment)


@pytest.fixture(scope="module")
def toy3():
    return assemble_partials(build_schedule("toy", 3))


@pytest.fixture(scope="module")
def toy2():
    return assemble_partials(build_schedule("toy", 2))


def small_partial(scale=64, step=Fraction(3, 10), count=3):
    """A single coarse family whose coefficients decay within a few thousand modes."""
    sched = build_schedule("toy", 1)
    fam = AtomFamily(scale, Fraction(0), step, count, -1, 1)
    return HomologyPartial(sched, 1, [fam], [], Fraction(count, 4 * scale))


class TestBump:
    def test_shape_constraints(self):
        b = DEFAULT_BUMP
        assert b(np.array([0.0, 1 / 16, -1 / 16]))[0] == 1.0
        assert np.all(b(np.array([1 / 16, -1 / 16])) == 1.0)
        assert np.all(b(np.array([1 / 8, -1 / 8, 0.2, -0.3])) == 0.0)
        t = np.linspace(-0.13, 0.13, 20001)
        assert np.abs(b.derivative(t)).max() <= 20.0
        assert b.max_slope <= 20.0

    def test_c4_joins(self):
        for k in range(5):
            assert max(abs(j) for _, j in DEFAULT_BUMP.profile.jumps(k)) <= 1e-9
        assert max(abs(j) for _, j in DEFAULT_BUMP.profile.jumps(5)) > 1.0

    def test_matches_independent_profile(self):
        t = np.linspace(-0.13, 0.13, 2001)
        assert np.abs(DEFAULT_BUMP(t) - oracles.smoothstep_bump(t)).max() <= 1e-10

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_moments(self, p):
        assert DEFAULT_BUMP.moments[p] == pytest.approx(BUMP_MOMENTS[p], rel=1e-9)

    @pytest.mark.parametrize("xi", sorted(BUMP_FOURIER))
    def test_fourier_against_oracle(self, xi):
        assert DEFAULT_BUMP.fourier(xi)[0] == pytest.approx(BUMP_FOURIER[xi], abs=1e-10)

    @given(st.floats(20.0, 500.0))
    def test_fourier_routes_agree(self, xi):
        # below ~20 the jump sum cancels badly; above ~500 the panels are too coarse
        quad = DEFAULT_BUMP.fourier_quadrature(xi)[0]
        jumps = DEFAULT_BUMP.fourier_jumps(xi)[0]
        assert abs(quad - jumps) <= 1e-10

    def test_taylor_route_near_zero(self):
        xi = np.array([0.0, 0.3, 1.0])
        assert np.abs(DEFAULT_BUMP.fourier_taylor(xi)
                      - DEFAULT_BUMP.fourier_quadrature(xi)).max() <= 1e-12
        assert DEFAULT_BUMP.fourier(0.0)[0] == pytest.approx(DEFAULT_BUMP.moments[1], rel=1e-12)

    @pytest.mark.parametrize("kw", [dict(edge=0.05), dict(plateau=0.2), dict(slope_bound=5.0)])
    def test_rejects(self, kw):
        with pytest.raises(ConstructionError):
            Bump(**kw)


class TestQtilde:
    def test_plateau_and_support(self):
        assert qtilde_eval(1, 0) == 1.0
        assert qtilde_eval(1, 0.2) == 0.0
        assert qtilde_eval(1, Fraction(1, 20)) == 1.0
        assert qtilde_eval(2, Fraction(1, 64 * 20)) == 1.0

    def test_periodic(self):
        assert qtilde_eval(1, Fraction(21, 20)) == qtilde_eval(1, Fraction(1, 20))

    def test_zero_coefficient_is_mass(self):
        for q in (1, 2, 3):
            assert qtilde_coeff(q, 0)[0] == pytest.approx(BUMP_MOMENTS[1] / q**6, rel=1e-9)
        assert qtilde_coeff(2, 0)[0] / qtilde_coeff(1, 0)[0] == pytest.approx(2.0**-6, rel=1e-12)

    def test_coefficient_scaling(self):
        # coeff(q, n) = theta_hat(n / q^6) / q^6
        assert qtilde_coeff(2, 192)[0] == pytest.approx(BUMP_FOURIER[3.0] / 64, abs=1e-12)

    @pytest.mark.parametrize("q", [2, 3, 4])
    def test_l4_bound(self, q):
        norm = qtilde_norm(q**2, 0, power=4)
        assert norm <= 0.71 * q**-3
        # direct quadrature of theta(q^12 x)^4 over its support
        S = float(q) ** 12
        x = np.linspace(-1 / (8 * S), 1 / (8 * S), 200001)
        direct = np.trapezoid(oracles.smoothstep_bump(S * x) ** 4, x) ** 0.25
        assert norm == pytest.approx(direct, rel=1e-6)

    def test_hr_scaling(self):
        for r in (1, 2):
            assert qtilde_norm(2, r) / qtilde_norm(1, r) == pytest.approx(2.0 ** (6 * r - 3),
                                                                          rel=1e-12)

    def test_translation_increment_direct(self):
        shift = 0.05
        x = np.linspace(-0.5, 0.5, 400001)
        diff = oracles.smoothstep_bump(x - shift) - oracles.smoothstep_bump(x)
        direct = math.sqrt(np.trapezoid(diff**2, x))
        assert translation_increment(1, shift, 0) == pytest.approx(direct, rel=1e-6)

    def test_translation_increment_large_shift(self):
        # disjoint supports: the increment is sqrt(2) times the norm
        assert translation_increment(1, Fraction(1, 2), 0) == pytest.approx(
            math.sqrt(2) * qtilde_norm(1, 0), rel=1e-12)


class TestSchedule:
    def test_canonical_two_levels(self):
        s = build_schedule("canonical", 2)
        assert s.q == [10, 100] and s.p == [-2, -21]
        assert s.C == Fraction(101, 100)
        err = abs(s.rotation * 100 - 21)
        assert err <= s.C / 100**2
        assert float(err) == pytest.approx(1.0e-4, rel=1e-4)
        assert float(s.rotation) == pytest.approx(0.210001, rel=1e-12)

    def test_canonical_one_level(self):
        s = build_schedule("canonical", 1)
        assert s.bounds[0] <= s.C / 10

    def test_unit_constant_fails_canonically(self):
        with pytest.raises(ConstructionError):
            build_schedule("canonical", 2, C=1)

    def test_toy_three_levels(self):
        s = build_schedule("toy", 3)
        assert s.q[:2] == [8, 512] and s.q[2] == 512**4
        for k, (q, b) in enumerate(zip(s.q, s.bounds), start=1):
            assert isinstance(b, Fraction)
            assert b <= s.C / Fraction(q) ** k
            assert q >= k

    @pytest.mark.parametrize("kind,K", [("toy", 0), ("other", 2)])
    def test_rejects(self, kind, K):
        with pytest.raises(ConstructionError):
            build_schedule(kind, K)

    def test_corrupted_approximant(self):
        s = build_schedule("toy", 2)
        bad = LiouvilleSchedule(s.kind, s.K, s.C, s.rotation, s.q, [s.p[0], s.p[1] + 1])
        with pytest.raises(ConstructionError):
            bad.certify()

    def test_json_round_trip(self):
        s = build_schedule("toy", 3)
        back = LiouvilleSchedule.from_dict(json.loads(json.dumps(s.to_dict())))
        assert back.rotation == s.rotation and back.q == s.q and back.bounds == s.bounds


class TestPartials:
    def test_atom_counts(self, toy3):
        assert [f.count for f in toy3.rtilde] == toy3.schedule.q
        assert assemble_partials(build_schedule("toy", 1)).rtilde[0].count == 8

    def test_level_one_measure(self):
        hp = assemble_partials(build_schedule("toy", 1))
        assert hp.support_measure <= Fraction(1, 4) / Fraction(8) ** 11
        assert float(hp.support_measure) <= 2.92e-11

    def test_total_measure(self, toy3):
        assert toy3.support_measure < Fraction(1, 2)

    def test_union_measure_oracle(self, toy2):
        ivs = []
        for f in toy2.rtilde:
            r = f.radius
            ivs += [(f.center(l) - r, f.center(l) + r) for l in range(f.count)]
        assert support_union_measure(toy2) == oracles.interval_union_measure(ivs)

    def test_too_many_levels(self):
        with pytest.raises(ConstructionError):
            assemble_partials(build_schedule("toy", 2), K=3)

    def test_json_round_trip(self, toy2):
        back = HomologyPartial.from_dict(json.loads(toy2.to_json()))
        x = Fraction(1, 3)
        assert back.rtilde_at(x) == toy2.rtilde_at(x)
        assert back.support_measure == toy2.support_measure


class TestResidual:
    @pytest.mark.parametrize("K,tol", [(1, 1e-12), (2, 1e-10), (3, 1e-10)])
    def test_toy(self, toy3, K, tol):
        assert homology_residual(toy3, K=K) <= tol

    def test_canonical(self):
        hp = assemble_partials(build_schedule("canonical", 2))
        assert homology_residual(hp) <= 1e-10

    def test_sign_is_unit(self, toy3):
        homology_residual(toy3, K=1)
        assert toy3.sign in (-1, 1)

    def test_corrupted_atom_list(self, toy2):
        f = toy2.rtilde[0]
        bad = replace(toy2, rtilde=[replace(f, count=f.count - 1)] + toy2.rtilde[1:],
                      sign=None)
        assert homology_residual(bad) >= 0.5

    def test_needs_samples(self, toy2):
        with pytest.raises(ValueError):
            homology_residual(toy2, samples=10)


class TestSobolev:
    def test_growth_table(self, toy3):
        tab = sobolev_growth(toy3)
        h2 = [r["norm"] for r in tab.rows if r["s"] == 2]
        assert all(b >= 2 * a for a, b in zip(h2, h2[1:]))
        assert tab.flags["h2_doubles"]
        assert tab.flags["h1_increment_ratio"] <= 0.05 and tab.flags["h1_stabilizes"]
        assert "toy" in tab.label

    def test_atom_integrals_match_parseval(self):
        hp = small_partial()
        tab = sobolev_growth(hp, s_list=(0, 1, 2))
        for r in tab.rows:
            N = 64 * 400
            assert r["norm"] == pytest.approx(parseval_norm(hp, 1, r["s"], N), rel=1e-6)

    def test_rejects_s(self, toy2):
        with pytest.raises(ValueError):
            sobolev_growth(toy2, s_list=(3,))

    def test_csv(self, toy2, tmp_path):
        sobolev_growth(toy2).to_csv(tmp_path / "s.csv")
        rows = (tmp_path / "s.csv").read_text().splitlines()
        assert rows[0] == "K,s,norm,increment,ratio" and len(rows) == 1 + 3 * 2

    def test_level_l4(self, toy3):
        for row in level_l4_norms(toy3):
            assert row["certified"] and row["norm"] <= row["bound"]


class TestRLambda:
    def test_zero_lambda(self, toy3):
        tab = r_lambda_diagnostics(toy3, 0.0)
        assert all(r["norm"] == 0.0 for r in tab.rows)

    def test_unit_lambda(self, toy3):
        tab = r_lambda_diagnostics(toy3, 1.0)
        assert tab.flags["h2_doubles"] and tab.flags["h1_stabilizes"]

    def test_unit_modulus_identity(self):
        # |d/dx exp(i R)| = |R'|, so the H^1 norm at lam = 1 equals that of R
        hp = small_partial()
        h1 = [r["norm"] for r in sobolev_growth(hp, (1,)).rows]
        assert [r["norm"] for r in r_lambda_diagnostics(hp, 1.0).rows if r["s"] == 1] == h1


class TestPrimitive:
    def test_profile_starts_at_zero_and_closes(self, toy2):
        xs, R = r_profile(toy2, 16)
        assert R[0] == 0.0
        total = toy2.rtilde_integral(Fraction(0), Fraction(1) - Fraction(1, 10**40))
        assert total == pytest.approx(toy2.rtilde_mean(), rel=1e-9)

    @given(st.fractions(0, 1), st.fractions(0, 1))
    def test_integral_additive(self, a, w):
        hp = small_partial(scale=16, count=5)
        w = w * Fraction(99, 100)
        m = a + w / 2
        whole = hp.rtilde_integral(a, a + w)
        parts = hp.rtilde_integral(a, m) + hp.rtilde_integral(m, a + w)
        assert whole == pytest.approx(parts, abs=1e-14)

    def test_integral_against_dense_sum(self):
        hp = small_partial(scale=16, count=5)
        x = np.linspace(0.0, 1.0, 2_000_001)
        f = sum(-oracles.smoothstep_bump(((x - float(hp.rtilde[0].center(l)) + 0.5) % 1 - 0.5)
                                         * 16) for l in range(5))
        for a, b in [(Fraction(1, 10), Fraction(7, 10)), (Fraction(0), Fraction(99, 100))]:
            sel = (x >= float(a)) & (x <= float(b))
            assert hp.rtilde_integral(a, b) == pytest.approx(np.trapezoid(f[sel], x[sel]),
                                                             abs=1e-6)

    def test_cocycle_mean_zero(self, toy2):
        n = 1024
        vals = np.array([cocycle(toy2, Fraction(i, n)) for i in range(n)])
        # piecewise constant with 16 level-one jumps per period
        jump = toy2.rtilde[0].mass(toy2.bump)
        assert abs(vals.mean()) <= 16 * jump / n


class TestBuildF:
    def test_default_positive(self, toy2):
        F, info = build_F(toy2, 16)
        assert F.values.min() > 0 and info["min_F"] >= info["b"] / 2

    def test_psi_zero(self, toy2):
        F, info = build_F(toy2, 8, psi="zero")
        assert np.all(F.values == info["b"])

    def test_psi_one_slice(self, toy2):
        n = 8
        F, info = build_F(toy2, n, psi="one")
        expect = [1 + info["scale"] * cocycle(toy2, Fraction(i, n)) for i in range(n)]
        assert np.allclose(F.values[:, 0], expect, rtol=0, atol=1e-14)

    def test_normalized_slice_range(self, toy2):
        F, info = build_F(toy2, 8, psi="one")
        assert 0.5 <= F.values.min() and F.values.max() <= 1.5

    def test_callable_psi(self, toy2):
        F, _ = build_F(toy2, 8, psi=lambda y: np.cos(np.pi * y) ** 2)
        assert F.values.shape == (8, 8)
