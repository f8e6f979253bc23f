from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import erf, erfc

from fpmeasure.bounds import (
    BOUNDS_HEADER, OMEGA_STAR_NOTE, bound_Aa, bound_Ab, bound_Ac, bound_Ba, bound_Bb, bounds_to_json,
    build_cutoff, write_bounds_csv, write_bounds_json,
)
from fpmeasure.errors import PreconditionError
from fpmeasure.grid import Grid
from fpmeasure.levelset import build_profile, level_grid
from fpmeasure.problem import CompactFunction, ProblemSpec
from fpmeasure.solver import analytic_density, solve_stationary

OU = ProblemSpec.build(1, [(-8, 8)], "1", "-x1", exact_density="exp(-x1^2/2)")
OU2 = ProblemSpec.build(2, [(-6, 6), (-6, 6)], [["1", "0"], ["0", "1"]], ["-x1", "-x2"],
                        exact_density="exp(-(x1^2 + x2^2)/2)")
ARCSINE = ProblemSpec.build(1, [(-1, 1)], "1", "x1/(1-x1^2)", "open", exact_density="1/sqrt(1-x1^2)")
BETA3 = ProblemSpec.build(1, [(-1, 1)], "1", "-4*x1/(1-x1^2)", "open", exact_density="(1-x1^2)^2")
BETA32 = ProblemSpec.build(1, [(-1, 1)], "1", "-x1/(1-x1^2)", "open", exact_density="sqrt(1-x1^2)")
LOGU = "-log(1-x1^2)"


def quintic_oracle(rho_m, rho_0, samples=1_000_001):
    """C of the cutoff from a direct solve for the monomial coefficients."""
    rows, rhs = [], []
    for t, vals in ((rho_m, (0.0, 0.0, 0.0)), (rho_0, (rho_0, 1.0, 0.0))):
        rows += [[t**k for k in range(6)],
                 [k * t ** (k - 1) if k else 0.0 for k in range(6)],
                 [k * (k - 1) * t ** (k - 2) if k > 1 else 0.0 for k in range(6)]]
        rhs += list(vals)
    c = np.linalg.solve(np.array(rows), np.array(rhs))
    d2 = np.polynomial.Polynomial(c).deriv(2)
    return float(np.max(np.abs(d2(np.linspace(rho_m, rho_0, samples)))))


@pytest.fixture(scope="module")
def ou_profile():
    d = analytic_density(OU, Grid.for_problem(OU, 801))
    return build_profile(d, CompactFunction.build("x1^2", 1, 2.0), level_grid(2, 16, 141), OU)


@pytest.fixture(scope="module")
def arcsine_profile():
    d = analytic_density(ARCSINE, Grid.for_problem(ARCSINE, 2001))
    return build_profile(d, CompactFunction.build(LOGU, 1, 0.25), level_grid(1, 4, 61), ARCSINE)


# -- cutoff -------------------------------------------------------------------


def test_cutoff_boundary_values():
    c = build_cutoff(1, 2)
    assert float(c.value(1.0)) == 0.0 and float(c.value(2.0)) == 2.0
    assert float(c.d1(2.0)) == pytest.approx(1.0, abs=1e-12)
    assert float(c.d2(1.0)) == 0.0 and float(c.d2(2.0)) == 0.0
    assert float(c.value(0.5)) == 0.0 and float(c.value(7.0)) == 7.0


def test_cutoff_constant_matches_oracle():
    assert build_cutoff(1, 2).C == pytest.approx(784 / 81, abs=1e-6)
    assert build_cutoff(1, 2).C == pytest.approx(quintic_oracle(1, 2), abs=1e-6)
    assert build_cutoff(2, 4).C == pytest.approx(quintic_oracle(2, 4), abs=1e-6)
    assert build_cutoff(1, 2).C >= 2


def test_cutoff_scaling_ratio():
    assert build_cutoff(0, 1).C / build_cutoff(0, 2).C == pytest.approx(2.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(rho_m=st.floats(0.0, 10.0), width=st.floats(0.05, 10.0))
def test_cutoff_invariants(rho_m, width):
    rho_0 = rho_m + width
    c = build_cutoff(rho_m, rho_0)
    s = np.linspace(rho_m, rho_0, 1000)
    assert np.min(c.d1(s)) >= -1e-12
    assert c.C > 0
    # one-sided limits of the bridge polynomial at both knots
    b3, b4, b5 = c.coeffs
    assert abs(b3 + b4 + b5 - rho_0 / width) <= 1e-10 * max(1.0, rho_0 / width)
    assert abs(3 * b3 + 4 * b4 + 5 * b5 - 1) <= 1e-10 * max(1.0, rho_0 / width)
    assert abs(6 * b3 + 12 * b4 + 20 * b5) <= 1e-10 * max(1.0, rho_0 / width)


@settings(max_examples=30, deadline=None)
@given(rho_m=st.floats(0.0, 5.0), width=st.floats(0.1, 5.0), scale=st.floats(0.1, 10.0))
def test_cutoff_pure_scaling(rho_m, width, scale):
    a = build_cutoff(rho_m, rho_m + width)
    b = build_cutoff(scale * rho_m, scale * (rho_m + width))
    assert b.C == pytest.approx(a.C / scale, rel=1e-8)


def test_cutoff_shift_changes_constant():
    # phi(rho_0) = rho_0 forces C >= 2 rho_0 / w^2, so shifting both knots raises C
    for a in (0.0, 1.0, 5.0):
        c = build_cutoff(1 + a, 2 + a)
        assert c.C >= 2 * (2 + a)


def test_cutoff_rejects_bad_order():
    with pytest.raises(ValueError):
        build_cutoff(2, 2)


# -- Theorem A ----------------------------------------------------------------


def test_Aa_ou(ou_profile):
    r = bound_Aa(ou_profile, 2.0, 2.0, 4.0)
    assert r.measured == pytest.approx(erfc(2 / math.sqrt(2)), abs=1e-4)
    y = lambda rho: erf(math.sqrt(rho / 2))
    expected = 0.5 * quintic_oracle(2, 4) * 16 * (y(4) - y(2))
    assert r.bound == pytest.approx(expected, rel=1e-3)
    assert r.satisfied


def test_Aa_degenerate_width(ou_profile):
    r = bound_Aa(ou_profile, 2.0, 2.0, 2.0)
    assert r.bound == math.inf and "bound diverges" in r.notes[0]
    narrow = [bound_Aa(ou_profile, 2.0, 2.0, 2.0 + w).bound for w in (1.0, 0.5, 0.2)]
    assert narrow[0] < narrow[1] < narrow[2]


def test_Aa_zero_measured_is_satisfied():
    p = ProblemSpec.build(1, [(-1, 1)], "1", "0", exact_density="1")
    d = analytic_density(p, Grid.for_problem(p, 101))
    prof = build_profile(d, CompactFunction.build("x1^2", 1, 0.25), level_grid(0.25, 1, 16), p)
    r = bound_Aa(prof, 1.0, 0.25, 1.0)
    assert r.measured == pytest.approx(0.0, abs=1e-14) and r.satisfied


def test_Aa_requires_positive_gamma(ou_profile):
    with pytest.raises(PreconditionError):
        bound_Aa(ou_profile, 0.0, 2.0, 4.0)


def test_Ab_ou_at_nine(ou_profile):
    r = bound_Ab(ou_profile, 2.0, 2.0, 9.0)
    assert r.bound == pytest.approx(math.sqrt(2 / 9), rel=1e-3)
    assert r.measured == pytest.approx(erfc(3 / math.sqrt(2)), abs=1e-5)
    assert r.satisfied


def test_Ab_at_rho_m_is_one(ou_profile):
    assert bound_Ab(ou_profile, 2.0, 2.0, 2.0).bound == 1.0


def test_Ab_monotone_in_rho_and_gamma(ou_profile):
    levels = ou_profile.rho[ou_profile.rho > 2]
    b = [bound_Ab(ou_profile, 2.0, 2.0, r).bound for r in levels]
    assert np.all(np.diff(b) <= 0)
    for r in levels[::10]:
        full = bound_Ab(ou_profile, 2.0, 2.0, r)
        half = bound_Ab(ou_profile, 1.0, 2.0, r)
        assert full.bound <= half.bound and full.satisfied


def test_Ab_2d_ou():
    d = analytic_density(OU2, Grid.for_problem(OU2, 121))
    prof = build_profile(d, CompactFunction.build("x1^2 + x2^2", 2, 4.0), level_grid(4, 25, 43), OU2)
    for r in prof.rho[prof.rho > 4]:
        rep = bound_Ab(prof, 4.0, 4.0, r)
        assert rep.satisfied
    # chi-square tail with two degrees of freedom
    assert bound_Ab(prof, 4.0, 4.0, 16.0).measured == pytest.approx(math.exp(-8), abs=1e-4)


def test_Ac_ou_diverges(ou_profile):
    r = bound_Ac(ou_profile, 4.0)
    assert r.bound == math.inf and r.satisfied
    assert any("divergent" in n for n in r.notes)


def test_Ac_at_rho_m_diverges(ou_profile):
    r = bound_Ac(ou_profile, 2.0)
    assert r.bound == math.inf and any("Htilde vanishes" in n for n in r.notes)


def _beta3_oracle(rho_m, rho_0):
    cdf = lambda x: 15 / 8 * (x - 2 * x**3 / 3 + x**5 / 5)
    y = lambda rho: cdf(math.sqrt(1 - math.exp(-rho)))
    H = lambda rho: 4 * (1 - math.exp(-rho)) * math.exp(2 * rho)
    inv_H = lambda s: 1 / H(s)
    Ht = lambda rho: H(rho) * integrate.quad(inv_H, rho_m, rho)[0]
    I = integrate.quad(lambda r: 1 / Ht(r), rho_0, 30, limit=200)[0]
    return 1 - y(rho_m), (y(rho_0) - y(rho_m)) * math.exp(I)


def test_Ac_beta3_is_finite_and_satisfied():
    rho_m = math.log(1.5)
    d = analytic_density(BETA3, Grid.for_problem(BETA3, 2001))
    prof = build_profile(d, CompactFunction.build(LOGU, 1, rho_m), level_grid(rho_m, 8, 120), BETA3,
                         extra=[2 * rho_m])
    r = bound_Ac(prof, 2 * rho_m)
    measured, bound = _beta3_oracle(rho_m, 2 * rho_m)
    assert measured == pytest.approx(1 - math.sqrt(3) / 2, abs=1e-12)
    assert r.measured == pytest.approx(measured, abs=1e-4)
    assert math.isfinite(r.bound) and r.bound == pytest.approx(bound, rel=2e-3)
    assert r.satisfied
    assert any("truncated" in n for n in r.notes)


# -- Theorem B ----------------------------------------------------------------


def test_Ba_arcsine(arcsine_profile):
    y = lambda rho: 2 / math.pi * math.asin(math.sqrt(1 - math.exp(-rho)))
    inv_H = lambda t: 1 / (4 * (1 - math.exp(-t)) * math.exp(2 * t))
    expected = (y(1) - y(0.25)) * math.exp(2 * integrate.quad(inv_H, 1, 3)[0])
    r = bound_Ba(arcsine_profile, 2.0, 0.25, 1.0, 3.0)
    assert r.measured == pytest.approx(y(3) - y(0.25), abs=1e-4)
    assert r.bound == pytest.approx(expected, rel=1e-3)
    assert r.satisfied and OMEGA_STAR_NOTE in r.notes


def test_B_equality_at_rho_0(arcsine_profile):
    for r in (bound_Ba(arcsine_profile, 2.0, 0.25, 1.0, 1.0), bound_Bb(arcsine_profile, 0.25, 1.0, 1.0)):
        assert abs(r.measured - r.bound) <= 1e-10 and r.satisfied


def test_B_satisfied_on_profile(arcsine_profile):
    for rho in arcsine_profile.rho[arcsine_profile.rho >= 1]:
        assert bound_Ba(arcsine_profile, 2.0, 0.25, 1.0, rho).satisfied
        assert bound_Bb(arcsine_profile, 0.25, 1.0, rho).satisfied


def test_Bb_beta_three_halves():
    d = analytic_density(BETA32, Grid.for_problem(BETA32, 2001))
    prof = build_profile(d, CompactFunction.build(LOGU, 1, 0.25), level_grid(1, 4, 61), BETA32)
    assert bound_Bb(prof, 0.25, 1.0, 3.0).satisfied


def test_Bb_rejects_other_rho_m(arcsine_profile):
    with pytest.raises(PreconditionError):
        bound_Bb(arcsine_profile, 0.5, 1.0, 3.0)
    with pytest.raises(PreconditionError):
        bound_Ba(arcsine_profile, 2.0, 0.25, 1.0, 0.5)


def test_Ba_uniform_box_holds():
    # sqrt(rho) - 1/2 >= (1/2) sqrt(rho) for rho >= 1, so the inequality holds on the box
    L = 3.0
    p = ProblemSpec.build(1, [(-L, L)], "1", "0", exact_density="1")
    d = analytic_density(p, Grid.for_problem(p, 601))
    prof = build_profile(d, CompactFunction.build("x1^2", 1, 0.25), level_grid(1, 9, 161), p)
    for rho in prof.rho[prof.rho >= 1]:
        r = bound_Ba(prof, 2.0, 0.25, 1.0, rho)
        assert r.measured == pytest.approx((math.sqrt(rho) - 0.5) / L, abs=1e-10)
        assert r.bound == pytest.approx(0.5 / L * math.sqrt(rho), rel=1e-3)
        assert r.satisfied


def test_interpolated_level_is_noted(ou_profile):
    r = bound_Ab(ou_profile, 2.0, 2.0, 9.05)
    assert any("interpolated" in n for n in r.notes)
    with pytest.raises(PreconditionError):
        bound_Ab(ou_profile, 2.0, 2.0, 40.0)


def test_exact_and_solved_measured_values_agree():
    g = Grid.for_problem(OU, 801)
    cf = CompactFunction.build("x1^2", 1, 2.0)
    levels = level_grid(2, 16, 29)
    a = build_profile(analytic_density(OU, g), cf, levels, OU)
    b = build_profile(solve_stationary(OU, g), cf, levels, OU)
    for rho in levels[1:]:
        assert abs(bound_Ab(a, 2.0, 2.0, rho).measured - bound_Ab(b, 2.0, 2.0, rho).measured) <= 5e-3


# -- output -------------------------------------------------------------------


def test_bounds_writers(tmp_path, ou_profile):
    reps = [bound_Ab(ou_profile, 2.0, 2.0, 9.0), bound_Ac(ou_profile, 4.0)]
    write_bounds_csv(reps, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == ",".join(BOUNDS_HEADER) and len(lines) == 3
    assert lines[1].startswith("Ab,2,nan,9,2,")
    write_bounds_json(reps, tmp_path / "b.json")
    rows = json.loads((tmp_path / "b.json").read_text())
    assert rows == bounds_to_json(reps)
    assert rows[1]["bound"] == "inf" and rows[0]["rho_0"] is None
    assert rows[0]["satisfied"] is True
