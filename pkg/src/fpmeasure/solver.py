"""Stationary densities on tensor grids.

The discrete operator is written in conservation form: for every face a
numerical flux approximating d_j(a^{ij} u) - V^i u is assembled, and
``L_h u`` at a node is the flux divergence over its control volume.  All
boundary faces carry zero flux, so ``sum(cv * L_h u) == 0`` for every grid
function and the operator is singular; the density is its null vector.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import exprel

from . import expr as ex
from .errors import EvaluationDomainError, NonUniquenessError, PositivityError, PreconditionError, SolverError
from .grid import DensityGrid, Grid, lattice_trapezoid
from .problem import ProblemSpec

log = logging.getLogger(__name__)

MAX_ITER = 200
STEP_TOL = 1e-13
RESIDUAL_TOL = 1e-10
NEGATIVE_TOL = 1e-12
_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(6)


def bernoulli(z):
    """B(z) = z / (exp(z) - 1), with B(0) = 1."""
    return 1.0 / exprel(z)


def _drift_integral_1d(p: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Integral of V/a over each cell [x_k, x_{k+1}] by Gauss-Legendre."""
    mid = 0.5 * (x[1:] + x[:-1])
    half = 0.5 * (x[1:] - x[:-1])
    pts = mid[:, None] + half[:, None] * _GAUSS_X[None, :]
    a = ex.evaluate_array(p.A[0][0], [pts])
    if np.any(a <= 0):
        raise PreconditionError("diffusion coefficient must be positive inside the domain")
    v = ex.evaluate_array(p.V[0], [pts])
    return half * np.sum(_GAUSS_W[None, :] * v / a, axis=1)


def _assemble_1d(p: ProblemSpec, g: Grid):
    x = g.axes[0]
    n = x.size
    h = g.spacing[0]
    a = ex.evaluate_array(p.A[0][0], [x])
    P = _drift_integral_1d(p, x)
    bp, bm = bernoulli(P), bernoulli(-P)
    # F_{k+1/2} = (B(P) a_{k+1} u_{k+1} - B(-P) a_k u_k) / h
    faces = np.arange(n - 1)
    rows = np.concatenate([faces, faces])
    cols = np.concatenate([faces + 1, faces])
    vals = np.concatenate([bp * a[1:], -bm * a[:-1]]) / h
    flux = sp.csr_matrix((vals, (rows, cols)), shape=(n - 1, n))
    cv = g.axis_weights(0) * h
    div = sp.lil_matrix((n, n - 1))
    div[faces, faces] = -1.0
    div[faces + 1, faces] = 1.0
    div = sp.diags(-1.0 / cv) @ div.tocsr()
    a_face = 0.5 * (a[1:] + a[:-1])
    peclet = np.abs(P) / 2.0 if a_face.size else np.zeros(0)
    return (div @ flux).tocsr(), float(np.max(peclet, initial=0.0))


def _assemble_2d(p: ProblemSpec, g: Grid):
    x, y = g.axes
    nx, ny = x.size, y.size
    hx, hy = g.spacing
    X, Y = np.meshgrid(x, y, indexing="ij")
    a = p.diffusion_at([X, Y])
    idx = np.arange(nx * ny).reshape(nx, ny)
    blocks = []
    peclet_max = 0.0
    for axis in (0, 1):
        other = 1 - axis
        h = (hx, hy)[axis]
        ho = (hx, hy)[other]
        ax_nodes = (x, y)[axis]
        # face midpoints along this axis
        mid = 0.5 * (ax_nodes[1:] + ax_nodes[:-1])
        if axis == 0:
            FX, FY = np.meshgrid(mid, y, indexing="ij")
            lo_idx, hi_idx = idx[:-1, :], idx[1:, :]
        else:
            FX, FY = np.meshgrid(x, mid, indexing="ij")
            lo_idx, hi_idx = idx[:, :-1], idx[:, 1:]
        v = ex.evaluate_array(p.V[axis], [FX, FY])
        d_lo = np.take(a[axis, axis], range(0, (nx, ny)[axis] - 1), axis=axis)
        d_hi = np.take(a[axis, axis], range(1, (nx, ny)[axis]), axis=axis)
        d_face = 0.5 * (d_lo + d_hi)
        if np.any(d_face <= 0):
            raise PreconditionError("diffusion must be positive definite on interior faces")
        pe = np.abs(v) * h / (2.0 * d_face)
        peclet_max = max(peclet_max, float(pe.max(initial=0.0)))
        with np.errstate(divide="ignore"):
            theta = np.where(pe > 1.0, 1.0 - 1.0 / pe, 0.0)
        nface = lo_idx.size
        faces = np.arange(nface).reshape(lo_idx.shape)
        r, c, val = [], [], []

        def put(rows, cols, vals):
            r.append(np.ravel(rows))
            c.append(np.ravel(cols))
            val.append(np.ravel(np.broadcast_to(vals, np.shape(rows))))

        # d_axis(a^{aa} u)
        put(faces, hi_idx, d_hi / h)
        put(faces, lo_idx, -d_lo / h)
        # -V u_face, u_face = (1-theta) * mean + theta * upwind
        put(faces, hi_idx, -v * (1 - theta) / 2 - v * theta * (v < 0))
        put(faces, lo_idx, -v * (1 - theta) / 2 - v * theta * (v >= 0))
        # cross term d_other(a^{ao} u), averaged over the two nodes of the face
        cross = a[axis, other]
        if np.any(cross != 0):
            no = (nx, ny)[other]
            for side_idx, side in ((lo_idx, 0), (hi_idx, 1)):
                sl_nodes = np.take(idx, range(side, (nx, ny)[axis] - 1 + side), axis=axis)
                cr = np.take(cross, range(side, (nx, ny)[axis] - 1 + side), axis=axis)
                for j in range(no):
                    if j == 0:
                        jp, jm, den = 1, 0, ho
                    elif j == no - 1:
                        jp, jm, den = no - 1, no - 2, ho
                    else:
                        jp, jm, den = j + 1, j - 1, 2 * ho
                    fj = np.take(faces, j, axis=other)
                    put(fj, np.take(sl_nodes, jp, axis=other), 0.5 * np.take(cr, jp, axis=other) / den)
                    put(fj, np.take(sl_nodes, jm, axis=other), -0.5 * np.take(cr, jm, axis=other) / den)
        flux = sp.csr_matrix((np.concatenate(val), (np.concatenate(r), np.concatenate(c))), shape=(nface, nx * ny))
        cv = np.multiply.outer(g.axis_weights(0), g.axis_weights(1)).ravel() * hx * hy
        # divergence: node receives +F on its high face, -F on its low face, times area of face
        w_other = g.axis_weights(other) * ho
        face_area = np.broadcast_to(np.expand_dims(w_other, axis), lo_idx.shape).ravel()
        rows = np.concatenate([lo_idx.ravel(), hi_idx.ravel()])
        cols = np.concatenate([faces.ravel(), faces.ravel()])
        vals = np.concatenate([face_area, -face_area])
        div = sp.csr_matrix((vals, (rows, cols)), shape=(nx * ny, nface))
        blocks.append(sp.diags(1.0 / cv) @ div @ flux)
    return (blocks[0] + blocks[1]).tocsr(), peclet_max


def assemble(p: ProblemSpec, g: Grid):
    """Return ``(L_h, max_cell_peclet)`` for the problem on ``g``."""
    if p.n == 1:
        return _assemble_1d(p, g)
    return _assemble_2d(p, g)


def adjoint_operator(L: sp.csr_matrix, g: Grid) -> sp.csr_matrix:
    """Discrete generator W^{-1} L^T W, the adjoint of ``L`` in the cv-weighted product."""
    w = g.cv_weights().ravel()
    return (sp.diags(1.0 / w) @ L.T @ sp.diags(w)).tocsr()


def _check_unique(L, shift: float, scale: float) -> float | None:
    n = L.shape[0]
    if n < 4:
        return None
    try:
        vals = spla.eigs(L, k=2, sigma=shift, which="LM", v0=np.ones(n), return_eigenvectors=False)
    except (spla.ArpackNoConvergence, RuntimeError) as err:  # pragma: no cover - ARPACK hiccup
        log.warning("null-space dimension check skipped: %s", err)
        return None
    second = float(np.sort(np.abs(vals))[-1])
    if second <= 1e-9 * scale:
        raise NonUniquenessError(f"discrete operator has a null space of dimension > 1 (|lambda_2| = {second:.3e})")
    return second


def solve_stationary(p: ProblemSpec, g: Grid, check_unique: bool = True) -> DensityGrid:
    """Normalised null vector of the discrete Fokker-Planck operator.

    Inverse iteration with a tiny shift, all-ones start vector, at most
    ``MAX_ITER`` steps, stopping once successive normalised iterates differ
    by at most ``STEP_TOL`` in the max norm.
    """
    p.validate(g.mesh())
    L, peclet = assemble(p, g)
    n = L.shape[0]
    scale = float(abs(L).max())
    shift = 1e-15 * scale
    w = g.cv_weights().ravel()
    lu = spla.splu((L - shift * sp.identity(n, format="csc")).tocsc())
    x = np.ones(n) / float(w.sum())
    step = math.inf
    it = 0
    for it in range(1, MAX_ITER + 1):
        y = lu.solve(x)
        y /= float(w @ y)
        step = float(np.max(np.abs(y - x)))
        x = y
        if step <= STEP_TOL:
            break
    if not np.all(np.isfinite(x)):
        raise SolverError("inverse iteration produced non-finite values")
    if step > STEP_TOL:
        log.warning("inverse iteration stopped after %d steps with step %.3e", it, step)
    lam2 = _check_unique(L, shift, scale) if check_unique else None
    values = x.reshape(g.shape)
    d = DensityGrid(g, values).normalized()
    worst = float(d.values.min())
    if worst < -NEGATIVE_TOL:
        raise PositivityError(-worst)
    residual = float(np.max(np.abs(L @ d.values.ravel())))
    d.diagnostics.update(
        method="exponential-fitting" if p.n == 1 else "central/upwind-blend",
        iterations=it,
        last_step=step,
        residual=residual,
        residual_rel=residual / float(np.max(np.abs(d.values))),
        # floor set by rounding in applying L itself
        residual_floor=64 * np.finfo(float).eps * scale,
        max_cell_peclet=peclet,
        lambda2=lam2,
        boundary_mass=d.boundary_mass(),
    )
    limit = max(RESIDUAL_TOL, d.diagnostics["residual_floor"])
    if d.diagnostics["residual_rel"] > limit:
        log.warning("discrete residual %.3e exceeds %.1e", d.diagnostics["residual_rel"], limit)
    if d.diagnostics["boundary_mass"] > 1e-6:
        log.info("density mass near the box boundary %.3e exceeds 1e-6", d.diagnostics["boundary_mass"])
    return d


def analytic_density(p: ProblemSpec, g: Grid) -> DensityGrid:
    """Evaluate ``p.exact_density`` at the nodes and normalise."""
    if p.exact_density is None:
        raise PreconditionError("problem has no closed-form density")
    values = ex.evaluate_array(p.exact_density, g.mesh(), strict=True)
    if np.any(values < 0):
        k = np.unravel_index(int(np.argmin(values)), values.shape)
        raise EvaluationDomainError("closed-form density is negative", [m[k] for m in g.mesh()])
    mass = DensityGrid(g, values).mass()
    if not mass > 0:
        raise PreconditionError(f"closed-form density has nonpositive mass ({mass})")
    d = DensityGrid(g, values / mass)
    d.diagnostics.update(method="closed-form", boundary_mass=d.boundary_mass())
    return d


# ---------------------------------------------------------------------------
# weak formulation


def _test_function_derivatives(f: ex.Expression, n: int, coords, support):
    """Values, gradient and Hessian of f on the nodes, zero outside ``support``."""
    shape = np.shape(coords[0])
    inside = np.ones(shape, dtype=bool)
    if support is not None:
        for c, (lo, hi) in zip(coords, support):
            inside &= (c > lo) & (c < hi)
    pts = [c[inside] for c in coords]
    val = np.zeros(shape)
    grad = np.zeros((n,) + shape)
    hess = np.zeros((n, n) + shape)
    val[inside] = ex.evaluate_array(f, pts)
    for i in range(n):
        gi = ex.differentiate(f, i + 1)
        grad[i][inside] = ex.evaluate_array(gi, pts)
        for j in range(n):
            hess[i, j][inside] = ex.evaluate_array(ex.differentiate(gi, j + 1), pts)
    return val, grad, hess


def weak_residual(p: ProblemSpec, d: DensityGrid, f: ex.Expression, support=None, tol: float = 1e-12) -> float:
    """Quadrature of (Lf) u over the box for a compactly supported test function.

    ``support`` optionally gives per-axis open intervals outside which f is
    taken to be identically zero (so bump functions need no piecewise
    syntax).  f and its first two derivatives must vanish on the two
    outermost node layers.
    """
    g = d.grid
    mesh = g.mesh()
    val, grad, hess = _test_function_derivatives(f, p.n, mesh, support)
    outer = g.outer_mask(layers=2)
    worst = max(np.max(np.abs(val[outer])), np.max(np.abs(grad[:, outer])), np.max(np.abs(hess[:, :, outer])))
    if worst > tol:
        raise PreconditionError(f"test function does not vanish on the two outer layers (max {worst:.3e})")
    a = p.diffusion_at(mesh)
    v = p.drift_at(mesh)
    lf = np.einsum("ij...,ij...->...", a, hess) + np.einsum("i...,i...->...", v, grad)
    integrand = g.pad_constant(lf * d.values)
    return lattice_trapezoid(integrand, g.lattice_axes())
