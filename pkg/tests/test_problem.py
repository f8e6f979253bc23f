from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpmeasure import expr as ex
from fpmeasure.errors import PreconditionError
from fpmeasure.problem import (ANTI_LYAPUNOV, LYAPUNOV, WEAK_LYAPUNOV, CompactFunction, ProblemSpec, axis_nodes,
                               classify, classify_refined, default_rho_M, generator, generator_apply, quadratic,
                               quadratic_form)

OU = ProblemSpec.build(1, [(-8, 8)], "1", "-x1")
ARCSINE = ProblemSpec.build(1, [(-1, 1)], "1", "x1/(1-x1^2)", "open")


def test_generator_examples():
    U = CompactFunction.build("x1^2", 1, 2)
    assert generator_apply(OU, U, [0.0]) == 2.0
    assert generator_apply(OU, U, [2.0]) == -6.0
    V = CompactFunction.build("-log(1-x1^2)", 1, 0.25)
    assert generator_apply(ARCSINE, V, [0.0]) == pytest.approx(2.0, abs=1e-14)
    # hand derivation: (2 + 4x^2) / (1 - x^2)^2
    for x in (0.3, -0.7, 0.95):
        assert generator_apply(ARCSINE, V, [x]) == pytest.approx((2 + 4 * x * x) / (1 - x * x) ** 2, rel=1e-12)
    zero = ProblemSpec.build(1, [(-1, 1)], "0", "0")
    assert generator_apply(zero, V, [0.4]) == 0.0


def test_quadratic_form_examples():
    U = CompactFunction.build("x1^2", 1, 2)
    assert quadratic_form(OU, U, [1.0]) == 4.0
    p2 = ProblemSpec.build(2, [(-2, 2), (-2, 2)], [["1", "0"], ["0", "1"]], ["-x1", "-x2"])
    R = CompactFunction.build("x1^2 + x2^2", 2, 1)
    assert quadratic_form(p2, R, [1.0, 0.0]) == 4.0
    pd = ProblemSpec.build(1, [(-1, 1)], "(1-x1^2)^2", "0", "open")
    L = CompactFunction.build("-log(1-x1^2)", 1, 0.1)
    assert quadratic_form(pd, L, [0.5]) == pytest.approx(1.0, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), x=st.floats(-0.9, 0.9), y=st.floats(-0.9, 0.9))
def test_generator_is_linear_in_U(a, b, x, y):
    p = ProblemSpec.build(2, [(-1, 1), (-1, 1)], [["1 + x1^2", "0.3*x1*x2"], ["0.3*x1*x2", "2"]],
                          ["-x1 + x2", "sin(x1) - x2"])
    u1 = "x1^2 + 2*x2^2"
    u2 = "exp(x1) * cos(x2)"
    U1 = CompactFunction.build(u1, 2, 0.1)
    U2 = CompactFunction.build(u2, 2, 0.1)
    mix = CompactFunction.build(f"({a!r})*({u1}) + ({b!r})*({u2})", 2, 0.1)
    lhs = generator_apply(p, mix, [x, y])
    rhs = a * generator_apply(p, U1, [x, y]) + b * generator_apply(p, U2, [x, y])
    assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-2, 2), y=st.floats(-2, 2), c=st.floats(0, 0.99))
def test_quadratic_form_nonnegative_for_psd_diffusion(x, y, c):
    p = ProblemSpec.build(2, [(-2, 2), (-2, 2)], [["1", f"{c!r}"], [f"{c!r}", "1"]], ["0", "0"])
    p.validate([np.array([x]), np.array([y])])
    U = CompactFunction.build("x1^2 + x1*x2 + 3*x2^4", 2, 0.1)
    assert quadratic_form(p, U, [x, y]) >= -1e-10


def test_problem_validation():
    bad = ProblemSpec.build(2, [(-1, 1), (-1, 1)], [["1", "x1"], ["0", "1"]], ["0", "0"])
    with pytest.raises(PreconditionError, match="symmetric"):
        bad.validate(np.meshgrid(np.linspace(-1, 1, 5), np.linspace(-1, 1, 5), indexing="ij"))
    neg = ProblemSpec.build(1, [(-1, 1)], "x1", "0")
    with pytest.raises(PreconditionError, match="semidefinite"):
        neg.validate([np.linspace(-1, 1, 5)])
    with pytest.raises(ValueError):
        ProblemSpec.build(1, [(1, 1)], "1", "0")
    with pytest.raises(ValueError):
        ProblemSpec.build(1, [(0, 1)], "1", "0", "periodic")


def test_compact_function_rejects_nonsmooth_U():
    with pytest.raises(ValueError, match="U must be C²"):
        CompactFunction.build("abs(x1)", 1, 0.5)
    with pytest.raises(ValueError):
        CompactFunction.build("x1^2", 1, 2, rho_M=1)


def test_compactness_proxy():
    x = np.linspace(-8, 8, 101)
    outer = np.zeros(x.size, bool)
    outer[[0, -1]] = True
    ok, _ = CompactFunction.build("x1^2", 1, 2).check_compactness([x], outer)
    assert ok
    ok, msg = CompactFunction.build("exp(-x1^2)", 1, 0.1).check_compactness([x], outer)
    assert not ok and "grow" in msg
    ok, msg = CompactFunction.build("x1", 1, 0.1).check_compactness([x], outer)
    assert not ok and "negative" in msg
    assert default_rho_M(CompactFunction.build("x1^2", 1, 2), [x]) == 64.0


def test_classify_ou_lyapunov():
    c = classify(OU, CompactFunction.build("x1^2", 1, 2), 801)
    assert c.kind == LYAPUNOV
    # sup of 2 - 2x^2 over x^2 >= 2 is attained on the level x^2 = 2
    assert c.gamma == pytest.approx(2.0, abs=1e-12)
    assert abs(c.witness[0]) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_classify_arcsine_anti_lyapunov():
    c = classify(ARCSINE, CompactFunction.build("-log(1-x1^2)", 1, 0.0), 2001)
    assert c.kind == ANTI_LYAPUNOV
    assert c.gamma == pytest.approx(2.0, rel=1e-5)


def test_classify_constant_generator():
    p = ProblemSpec.build(1, [(-3, 3)], "1", "0")
    c = classify(p, CompactFunction.build("x1^2", 1, 1), 301)
    assert c.kind == ANTI_LYAPUNOV and c.gamma == pytest.approx(2.0, abs=1e-12)


def test_classify_weak_lyapunov_family():
    p = ProblemSpec.build(1, [(-1, 1)], "1", "-4*x1/(1-x1^2)", "open")
    c = classify(p, CompactFunction.build("-log(1-x1^2)", 1, math.log(1.5)), 2001)
    assert c.kind == WEAK_LYAPUNOV and c.gamma == 0.0


def test_classify_rejects_empty_essential_domain():
    with pytest.raises(PreconditionError):
        classify(OU, CompactFunction.build("x1^2", 1, 100), 101)


def test_classify_refinement_is_stable():
    p = ProblemSpec.build(2, [(-6, 6), (-6, 6)], [["1", "0"], ["0", "1"]], ["-x1", "-x2"])
    coarse, fine = classify_refined(p, CompactFunction.build("x1^2 + x2^2", 2, 4), 101)
    assert coarse.kind == fine.kind == LYAPUNOV
    assert coarse.gamma == pytest.approx(4.0, abs=1e-9)
    assert abs(coarse.gamma - fine.gamma) <= 1e-9


def test_vectorised_generator_matches_scalar():
    U = CompactFunction.build("-log(1-x1^2)", 1, 0.25)
    x = np.linspace(-0.9, 0.9, 11)
    arr = generator(ARCSINE, U, [x])
    q = quadratic(ARCSINE, U, [x])
    for k in range(x.size):
        assert arr[k] == pytest.approx(generator_apply(ARCSINE, U, [x[k]]), rel=1e-15)
        assert q[k] == pytest.approx(quadratic_form(ARCSINE, U, [x[k]]), rel=1e-15)


def test_axis_nodes_open_are_inset():
    x = axis_nodes(-1, 1, 4, "open")
    assert np.allclose(x, [-0.75, -0.25, 0.25, 0.75])
    assert np.allclose(axis_nodes(0, 1, 3, "reflecting"), [0, 0.5, 1])


def test_expressions_are_shared_not_copied():
    U = CompactFunction.build("x1^2", 1, 2)
    assert isinstance(U.gradU[0], ex.Expression)
    assert U.hessU[0][0] == ex.parse("2", 1)
