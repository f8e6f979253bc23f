"""Fokker-Planck problem data, compact functions and Lyapunov classification."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from .errors import PreconditionError

log = logging.getLogger(__name__)

REFLECTING = "reflecting"
OPEN = "open"
BOUNDARY_KINDS = (REFLECTING, OPEN)


def _as_expr(e, n: int) -> ex.Expression:
    if isinstance(e, ex.Expression):
        if ex.max_index(e) > n:
            raise ValueError(f"expression {ex.render(e)!r} uses variables beyond dimension {n}")
        return e
    if isinstance(e, (int, float)):
        return ex.Num(float(e))
    return ex.parse(str(e), n)


def axis_nodes(lo: float, hi: float, count: int, kind: str) -> np.ndarray:
    """Uniform nodes on one axis.

    Reflecting axes put nodes on both walls; open axes are cell centred so
    every node sits half a cell inside the domain.
    """
    if count < 3:
        raise ValueError("need at least 3 nodes per axis")
    if kind == REFLECTING:
        return np.linspace(lo, hi, count)
    h = (hi - lo) / count
    return lo + (np.arange(count) + 0.5) * h


@dataclass(frozen=True)
class ProblemSpec:
    """Diffusion matrix ``A``, drift ``V`` and computational box.

    ``A`` is an n-by-n tuple of expressions (the a^{ij}), ``V`` an n-tuple.
    ``boundary`` holds one of ``"reflecting"``/``"open"`` per axis.
    ``sobolev_p`` is carried as metadata only; it is never checked.
    """

    n: int
    box: tuple[tuple[float, float], ...]
    A: tuple[tuple[ex.Expression, ...], ...]
    V: tuple[ex.Expression, ...]
    boundary: tuple[str, ...]
    exact_density: ex.Expression | None = None
    sobolev_p: float | None = None

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if len(self.box) != self.n or any(hi <= lo for lo, hi in self.box):
            raise ValueError("box must hold one nondegenerate interval per axis")
        if len(self.A) != self.n or any(len(row) != self.n for row in self.A):
            raise ValueError("A must be n x n")
        if len(self.V) != self.n:
            raise ValueError("V must have n components")
        if len(self.boundary) != self.n or any(b not in BOUNDARY_KINDS for b in self.boundary):
            raise ValueError(f"boundary kinds must be one of {BOUNDARY_KINDS} per axis")

    @classmethod
    def build(cls, n, box, A, V, boundary=None, exact_density=None, sobolev_p=None):
        """Convenience constructor accepting expression sources as strings."""
        box = tuple((float(lo), float(hi)) for lo, hi in box)
        if n == 1 and not isinstance(A, (list, tuple)):
            A = [[A]]
        if n == 1 and not isinstance(V, (list, tuple)):
            V = [V]
        A = tuple(tuple(_as_expr(a, n) for a in row) for row in A)
        V = tuple(_as_expr(v, n) for v in V)
        if boundary is None:
            boundary = (REFLECTING,) * n
        elif isinstance(boundary, str):
            boundary = (boundary,) * n
        dens = None if exact_density is None else _as_expr(exact_density, n)
        return cls(n, box, A, V, tuple(boundary), dens, sobolev_p)

    def sample_axes(self, count: int) -> list[np.ndarray]:
        return [axis_nodes(lo, hi, count, kind) for (lo, hi), kind in zip(self.box, self.boundary)]

    def diffusion_at(self, coords) -> np.ndarray:
        """Array of shape ``(n, n) + pts`` with a^{ij} at the given points."""
        shape = np.broadcast_shapes(*(np.shape(c) for c in coords))
        out = np.empty((self.n, self.n) + shape)
        for i in range(self.n):
            for j in range(self.n):
                out[i, j] = ex.evaluate_array(self.A[i][j], coords)
        return out

    def drift_at(self, coords) -> np.ndarray:
        shape = np.broadcast_shapes(*(np.shape(c) for c in coords))
        out = np.empty((self.n,) + shape)
        for i in range(self.n):
            out[i] = ex.evaluate_array(self.V[i], coords)
        return out

    def validate(self, coords, psd_tol: float = 1e-10, sym_tol: float = 1e-12) -> None:
        """Check symmetry and positive semidefiniteness of ``A`` at points."""
        a = self.diffusion_at(coords)
        if self.n == 2:
            asym = np.max(np.abs(a[0, 1] - a[1, 0]))
            if asym > sym_tol:
                raise PreconditionError(f"diffusion matrix not symmetric (max |a12 - a21| = {asym:.3e})")
        mat = np.moveaxis(a.reshape(self.n, self.n, -1), -1, 0)
        lam = np.linalg.eigvalsh(0.5 * (mat + np.swapaxes(mat, 1, 2)))[:, 0]
        if lam.min() < -psd_tol:
            raise PreconditionError(f"diffusion matrix not positive semidefinite (min eigenvalue {lam.min():.3e})")


@dataclass(frozen=True)
class CompactFunction:
    """A C^2 compact function ``U`` with its exact gradient and Hessian."""

    U: ex.Expression
    n: int
    rho_m: float
    rho_M: float = math.inf
    gradU: tuple[ex.Expression, ...] = field(default=(), repr=False)
    hessU: tuple[tuple[ex.Expression, ...], ...] = field(default=(), repr=False)

    @classmethod
    def build(cls, U, n: int, rho_m: float, rho_M: float | None = None) -> "CompactFunction":
        U = _as_expr(U, n)
        bad = ex.functions(U) & ex.NONSMOOTH
        if bad:
            raise ValueError(f"U must be C² (found {', '.join(sorted(bad))})")
        grad = tuple(ex.differentiate(U, i + 1) for i in range(n))
        hess = tuple(tuple(ex.differentiate(grad[i], j + 1) for j in range(n)) for i in range(n))
        rho_M = math.inf if rho_M is None else float(rho_M)
        if not rho_m < rho_M:
            raise ValueError("rho_m must be below rho_M")
        return cls(U, n, float(rho_m), rho_M, grad, hess)

    def with_rho_M(self, rho_M: float) -> "CompactFunction":
        return CompactFunction(self.U, self.n, self.rho_m, rho_M, self.gradU, self.hessU)

    def value(self, coords, strict: bool = True) -> np.ndarray:
        return ex.evaluate_array(self.U, coords, strict=strict)

    def gradient(self, coords) -> np.ndarray:
        return np.stack([ex.evaluate_array(g, coords) for g in self.gradU])

    def hessian(self, coords) -> np.ndarray:
        return np.stack([np.stack([ex.evaluate_array(h, coords) for h in row]) for row in self.hessU])

    def check_compactness(self, coords, outer_mask) -> tuple[bool, str]:
        """Sampled checks standing in for compactness on a truncated domain.

        ``outer_mask`` marks the outermost layer of the sample grid.  Returns
        ``(ok, message)``; the message explains the first failed condition.
        """
        u = self.value(coords, strict=False)
        finite = np.isfinite(u)
        if np.any(u[finite] < 0):
            return False, "U takes negative values"
        interior = finite & ~outer_mask
        if np.any(u[interior] >= self.rho_M):
            return False, "U reaches rho_M inside the domain"
        if math.isinf(self.rho_M):
            top = np.max(u[finite])
            outer = np.max(u[finite & outer_mask])
            if outer < 0.99 * top:
                return False, "U does not grow towards the box boundary"
        return True, "ok"


def default_rho_M(cf: CompactFunction, coords) -> float:
    """Sampled supremum of U, used when a bounded domain gives no rho_M."""
    u = cf.value(coords, strict=False)
    finite = u[np.isfinite(u)]
    return math.inf if finite.size < u.size else float(finite.max())


def generator(p: ProblemSpec, cf: CompactFunction, coords) -> np.ndarray:
    """Vectorised a^{ij} d_ij U + V^i d_i U."""
    a = p.diffusion_at(coords)
    v = p.drift_at(coords)
    g = cf.gradient(coords)
    h = cf.hessian(coords)
    return np.einsum("ij...,ij...->...", a, h) + np.einsum("i...,i...->...", v, g)


def quadratic(p: ProblemSpec, cf: CompactFunction, coords) -> np.ndarray:
    """Vectorised a^{ij} d_i U d_j U."""
    a = p.diffusion_at(coords)
    g = cf.gradient(coords)
    return np.einsum("ij...,i...,j...->...", a, g, g)


def generator_apply(p: ProblemSpec, cf: CompactFunction, x: Sequence[float]) -> float:
    return float(generator(p, cf, [np.float64(c) for c in x]))


def quadratic_form(p: ProblemSpec, cf: CompactFunction, x: Sequence[float]) -> float:
    return float(quadratic(p, cf, [np.float64(c) for c in x]))


# ---------------------------------------------------------------------------
# classification

LYAPUNOV = "Lyapunov"
WEAK_LYAPUNOV = "WeakLyapunov"
ANTI_LYAPUNOV = "AntiLyapunov"
WEAK_ANTI_LYAPUNOV = "WeakAntiLyapunov"
NONE = "None"


@dataclass(frozen=True)
class LyapunovClassification:
    kind: str
    gamma: float
    witness: tuple[float, ...]
    sup_LU: float
    inf_LU: float
    samples: int


def _boundary_level_points(p: ProblemSpec, cf: CompactFunction, axes) -> list[np.ndarray]:
    """Points on U = rho_m, located on grid lines and polished by Newton."""
    from .levelset import level_points  # local import: levelset depends on problem

    return level_points(cf, axes, cf.rho_m)


def classify(p: ProblemSpec, cf: CompactFunction, sample_density: int, tol: float = 1e-8) -> LyapunovClassification:
    """Classify U by the extremes of LU over the closure of {U > rho_m}.

    Samples are the grid nodes with U >= rho_m plus points on the level set
    U = rho_m itself (the closure of the essential domain), so that the
    supremum on the boundary level is not missed by the sampling.
    """
    axes = p.sample_axes(sample_density)
    mesh = np.meshgrid(*axes, indexing="ij")
    u = cf.value(mesh, strict=False)
    keep = np.isfinite(u) & (u >= cf.rho_m)
    pts = [m[keep] for m in mesh]
    extra = _boundary_level_points(p, cf, axes)
    if extra and extra[0].size:
        pts = [np.concatenate([a, b]) for a, b in zip(pts, extra)]
    if pts[0].size == 0:
        raise PreconditionError("no sample of the essential domain {U > rho_m} inside the box (rho_m too large)")
    lu = generator(p, cf, pts)
    ok = np.isfinite(lu)
    if not np.all(ok):
        log.warning("dropping %d non-finite generator samples", int((~ok).sum()))
        pts = [c[ok] for c in pts]
        lu = lu[ok]
    k_sup = int(np.argmax(lu))
    k_inf = int(np.argmin(lu))
    s_sup, s_inf = float(lu[k_sup]), float(lu[k_inf])

    def at(k):
        return tuple(float(c[k]) for c in pts)

    if s_sup < -tol:
        kind, gamma, wit = LYAPUNOV, -s_sup, at(k_sup)
    elif s_inf > tol:
        kind, gamma, wit = ANTI_LYAPUNOV, s_inf, at(k_inf)
    elif s_sup <= tol:
        kind, gamma, wit = WEAK_LYAPUNOV, 0.0, at(k_sup)
    elif s_inf >= -tol:
        kind, gamma, wit = WEAK_ANTI_LYAPUNOV, 0.0, at(k_inf)
    else:
        kind, gamma, wit = NONE, 0.0, at(k_sup)
    return LyapunovClassification(kind, gamma, wit, s_sup, s_inf, int(lu.size))


def classify_refined(p: ProblemSpec, cf: CompactFunction, sample_density: int, tol: float = 1e-8):
    """Classify at ``sample_density`` and at roughly twice that density.

    Returns both classifications so the caller can judge convergence.
    """
    coarse = classify(p, cf, sample_density, tol)
    fine = classify(p, cf, 2 * sample_density - 1, tol)
    return coarse, fine
