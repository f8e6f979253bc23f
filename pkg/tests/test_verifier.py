from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpmeasure.bounds import build_cutoff
from fpmeasure.errors import IrregularLevelError, PreconditionError
from fpmeasure.grid import Grid
from fpmeasure.levelset import level_grid
from fpmeasure.problem import CompactFunction, ProblemSpec
from fpmeasure.solver import analytic_density, solve_stationary
from fpmeasure.verifier import (
    IDENTITY_HEADER, ConstantMap, IdentityMap, PhiMap, check_c2, identity_sweep, verify_identity,
    write_identity_csv, write_identity_json,
)

OU = ProblemSpec.build(1, [(-8, 8)], "1", "-x1", exact_density="exp(-x1^2/2)")
ARCSINE = ProblemSpec.build(1, [(-1, 1)], "1", "x1/(1-x1^2)", "open", exact_density="1/sqrt(1-x1^2)")
SQ = CompactFunction.build("x1^2", 1, 0.0)
LOGU = CompactFunction.build("-log(1-x1^2)", 1, 0.0)


@pytest.fixture(scope="module")
def ou():
    return analytic_density(OU, Grid.for_problem(OU, 801))


def test_constant_phi_gives_zero(ou):
    r = verify_identity(ou, SQ, OU, ConstantMap(3.0), 1.0)
    assert r.lhs == 0 and r.rhs == 0 and r.residual == 0


def test_ou_hand_value(ou):
    # E[(2 - 2X^2) 1{|X|<1}] and 4 u(1) agree in closed form
    u1 = math.exp(-0.5) / math.sqrt(2 * math.pi)
    r = verify_identity(ou, SQ, OU, IdentityMap(), 1.0)
    assert r.rhs == pytest.approx(4 * u1, abs=1e-3)
    assert r.lhs == pytest.approx(4 * u1, abs=1e-3)
    assert r.rel_residual <= 1e-3


def test_arcsine_identity():
    d = analytic_density(ARCSINE, Grid.for_problem(ARCSINE, 2001))
    assert verify_identity(d, LOGU, ARCSINE, IdentityMap(), 1.0).rel_residual <= 1e-3


def test_ou_sweep(ou):
    reps = identity_sweep(ou, SQ, OU, IdentityMap(), level_grid(0.2, 16, 50))
    assert len(reps) == 50 and not any(r.skipped for r in reps)
    assert max(r.rel_residual for r in reps) <= 2e-3
    assert all(math.isfinite(r.lhs) and r.residual >= 0 for r in reps)


def test_ou_sweep_with_solved_density():
    d = solve_stationary(OU, Grid.for_problem(OU, 801))
    reps = identity_sweep(d, SQ, OU, IdentityMap(), level_grid(0.2, 16, 50))
    assert max(r.rel_residual for r in reps) <= 1e-2


def test_zero_drift_uniform_density():
    p = ProblemSpec.build(1, [(-1, 1)], "1", "0", exact_density="1")
    d = analytic_density(p, Grid.for_problem(p, 201))
    for rho in (0.04, 0.25, 0.49):
        r = verify_identity(d, SQ, p, IdentityMap(), rho)
        # lhs = 2 * u * 2 sqrt(rho), rhs = 2 points * u * |U'| with u = 1/2
        assert r.lhs == pytest.approx(2 * math.sqrt(rho), abs=1e-8)
        assert r.residual <= 1e-8


def test_empty_sweep(ou):
    assert identity_sweep(ou, SQ, OU, IdentityMap(), []) == []


def test_sweep_skips_irregular_levels():
    p = ProblemSpec.build(1, [(-1, 1)], "1", "0", exact_density="1")
    cf = CompactFunction.build("(x1^2 - 0.25)^2", 1, 0.0)
    d = analytic_density(p, Grid.for_problem(p, 201))
    reps = identity_sweep(d, cf, p, IdentityMap(), [0.01, 0.0625])
    assert [r.skipped for r in reps] == [False, True]
    assert "irregular" in reps[1].note
    with pytest.raises(IrregularLevelError):
        verify_identity(d, cf, p, IdentityMap(), 0.0625)


@settings(max_examples=15, deadline=None)
@given(rho=st.floats(0.3, 12.0), lo=st.floats(0.1, 2.0), width=st.floats(0.2, 3.0))
def test_identity_is_linear_in_phi(rho, lo, width):
    d = _OU_COARSE
    a = build_cutoff(lo, lo + width)
    b = IdentityMap()
    ra = verify_identity(d, SQ, OU, a, rho)
    rb = verify_identity(d, SQ, OU, b, rho)
    rs = verify_identity(d, SQ, OU, a + b, rho)
    assert rs.lhs == pytest.approx(ra.lhs + rb.lhs, abs=1e-10)
    assert rs.rhs == pytest.approx(ra.rhs + rb.rhs, abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(rho=st.floats(0.1, 20.0), lo=st.floats(0.05, 3.0), width=st.floats(0.1, 4.0))
def test_rhs_nonnegative_for_monotone_phi(rho, lo, width):
    r = verify_identity(_OU_COARSE, SQ, OU, build_cutoff(lo, lo + width), rho)
    assert r.rhs >= -1e-10


_OU_COARSE = analytic_density(OU, Grid.for_problem(OU, 201))


def test_residual_converges_at_second_order():
    errs = []
    for n in (201, 401, 801):
        d = analytic_density(OU, Grid.for_problem(OU, n))
        errs.append(verify_identity(d, SQ, OU, build_cutoff(2.0, 4.0), 6.0).residual)
    assert errs[0] / errs[1] >= 3 and errs[1] / errs[2] >= 3


def test_check_c2_rejects_kinks():
    class Kink(PhiMap):
        knots = (1.0,)

        def value(self, t):
            return np.maximum(np.asarray(t, dtype=float) - 1.0, 0.0)

        def d1(self, t):
            return (np.asarray(t, dtype=float) > 1.0).astype(float)

        def d2(self, t):
            return np.zeros_like(np.asarray(t, dtype=float))

    check_c2(Kink(), 0.5)
    with pytest.raises(PreconditionError):
        check_c2(Kink(), 2.0)
    with pytest.raises(PreconditionError):
        verify_identity(_OU_COARSE, SQ, OU, Kink(), 2.0)


def test_writers(tmp_path, ou):
    reps = identity_sweep(ou, SQ, OU, IdentityMap(), [1.0, 2.0])
    write_identity_csv(reps, tmp_path / "i.csv")
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == ",".join(IDENTITY_HEADER) and len(lines) == 3
    assert lines[1].endswith(",false")
    write_identity_json(reps, tmp_path / "i.json")
    import json
    rows = json.loads((tmp_path / "i.json").read_text())
    assert rows[0]["rho"] == 1.0 and rows[1]["skipped"] is False


def test_sweep_threads_are_deterministic(ou):
    levels = level_grid(0.5, 10, 20)
    a = identity_sweep(ou, SQ, OU, IdentityMap(), levels, threads=1)
    b = identity_sweep(ou, SQ, OU, IdentityMap(), levels, threads=4)
    assert a == b
