"""Integral identity checks for boundary-constant test functions F = phi(U).

For a stationary density u and a sublevel set {U < rho},

    int_{U<rho} (L F) u dx  =  int_{U=rho} a(grad F, nu) u ds,

with L F = phi'(U) L U + phi''(U) a(grad U, grad U) by the chain rule and
grad F = phi'(rho) grad U on the level.  Both sides are computed from the
same density grid so the report measures the identity error alone.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import IrregularLevelError, PreconditionError
from .grid import DensityGrid, fmt
from .levelset import REGULAR_TOL, LevelGeometry
from .problem import CompactFunction, ProblemSpec, generator, quadratic


class PhiMap:
    """A scalar map phi with first and second derivatives, vectorised."""

    knots: tuple[float, ...] = ()

    def value(self, t):
        raise NotImplementedError

    def d1(self, t):
        raise NotImplementedError

    def d2(self, t):
        raise NotImplementedError

    def __add__(self, other: "PhiMap") -> "PhiMap":
        return SumMap(self, other)


class IdentityMap(PhiMap):
    def value(self, t):
        return np.asarray(t, dtype=float)

    def d1(self, t):
        return np.ones_like(np.asarray(t, dtype=float))

    def d2(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class ConstantMap(PhiMap):
    c: float = 0.0

    def value(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.c)

    def d1(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def d2(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))


class SumMap(PhiMap):
    def __init__(self, a: PhiMap, b: PhiMap):
        self.a, self.b = a, b
        self.knots = tuple(sorted(set(a.knots) | set(b.knots)))

    def value(self, t):
        return self.a.value(t) + self.b.value(t)

    def d1(self, t):
        return self.a.d1(t) + self.b.d1(t)

    def d2(self, t):
        return self.a.d2(t) + self.b.d2(t)


def check_c2(phi: PhiMap, rho: float, tol: float = 1e-6) -> None:
    """Raise unless phi, phi', phi'' are continuous at every knot in [0, rho].

    A jump keeps its size when the probe offset shrinks, while the gap of a
    steep but continuous function shrinks with it.
    """
    for k in phi.knots:
        if not 0.0 <= k <= rho:
            continue
        eps = 1e-9 * max(1.0, abs(k))
        for fn in (phi.value, phi.d1, phi.d2):
            wide = abs(float(fn(k + eps)) - float(fn(k - eps)))
            left, right = float(fn(k - eps / 4)), float(fn(k + eps / 4))
            narrow = abs(right - left)
            if narrow > tol * max(1.0, abs(left)) and narrow > 0.5 * wide:
                raise PreconditionError(f"phi is not C2 at knot {k!r}")


@dataclass
class IdentityReport:
    rho: float
    lhs: float
    rhs: float
    residual: float
    rel_residual: float
    skipped: bool = False
    note: str = ""


def _lhs_field(geo: LevelGeometry, p: ProblemSpec, cf: CompactFunction, phi: PhiMap) -> np.ndarray:
    g = geo.grid
    mesh = g.mesh()
    U = cf.value(mesh)
    integrand = phi.d1(U) * generator(p, cf, mesh) + phi.d2(U) * quadratic(p, cf, mesh)
    return g.pad_constant(integrand) * geo.density


def _report(geo, lhs_field, phi, rho, regular_tol) -> IdentityReport:
    check_c2(phi, rho)
    c = geo.contour(rho, regular_tol)
    if not c.regular:
        raise IrregularLevelError(f"level {rho!r} is irregular: {c.message}")
    lhs = geo.region_integral(lhs_field, rho, below=True)
    rhs = float(phi.d1(rho)) * c.integrate(c.form)
    res = abs(lhs - rhs)
    note = "sublevel set reaches the box boundary" if c.truncated else ""
    return IdentityReport(float(rho), lhs, rhs, res, res / (abs(lhs) + abs(rhs) + 1e-300), False, note)


def verify_identity(d: DensityGrid, cf: CompactFunction, p: ProblemSpec, phi: PhiMap, rho: float,
                    regular_tol: float = REGULAR_TOL) -> IdentityReport:
    geo = LevelGeometry(d, cf, p)
    return _report(geo, _lhs_field(geo, p, cf, phi), phi, rho, regular_tol)


def identity_sweep(d: DensityGrid, cf: CompactFunction, p: ProblemSpec, phi: PhiMap, rho_grid,
                   regular_tol: float = REGULAR_TOL, threads: int | None = None) -> list[IdentityReport]:
    """One report per level, ordered by rho; irregular levels become skip records."""
    levels = sorted(float(r) for r in rho_grid)
    if not levels:
        return []
    geo = LevelGeometry(d, cf, p)
    field = _lhs_field(geo, p, cf, phi)

    def one(r):
        local = LevelGeometry.__new__(LevelGeometry)
        local.__dict__.update({k: v for k, v in geo.__dict__.items() if k != "_cross_cache"})
        try:
            return _report(local, field, phi, r, regular_tol)
        except IrregularLevelError as err:
            return IdentityReport(r, math.nan, math.nan, math.nan, math.nan, True, str(err))

    if threads is not None and threads <= 1:
        return [one(r) for r in levels]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, levels))


IDENTITY_HEADER = ["rho", "lhs", "rhs", "residual", "rel_residual", "skipped"]


def write_identity_csv(reports: list[IdentityReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IDENTITY_HEADER)
        for r in reports:
            w.writerow([fmt(r.rho), fmt(r.lhs), fmt(r.rhs), fmt(r.residual), fmt(r.rel_residual),
                        "true" if r.skipped else "false"])


def write_identity_json(reports: list[IdentityReport], path) -> None:
    rows = [{k: (v if not isinstance(v, float) or math.isfinite(v) else None) for k, v in asdict(r).items()}
            for r in reports]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")
