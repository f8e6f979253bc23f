"""Sublevel-set measures, level-surface integrals and level profiles.

All quantities are computed on the padded quadrature lattice of a grid
(nodes plus wall points on open axes).  Fields are interpolated
(bi)linearly between lattice points; the level set of U is located with
the exact expression for U, not with its interpolant.

Region integrals split every lattice cell into the part with U < rho and
the rest.  Crossings on cell edges are polished roots of U - rho along the
edge; the cut cell is the polygon through inside corners and crossings,
over which the bilinear field is integrated exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import expr as ex
from .errors import IrregularLevelError
from .grid import DensityGrid, Grid, fmt
from .problem import CompactFunction, ProblemSpec, quadratic

log = logging.getLogger(__name__)

REGULAR_TOL = 1e-6
LEVEL_TOL = 1e-8
NEWTON_ITER = 60


# ---------------------------------------------------------------------------
# roots along grid lines


def _u_values(cf: CompactFunction, coords) -> np.ndarray:
    u = cf.value(coords, strict=False)
    return np.where(np.isnan(u), np.inf, u)


def _polish_on_lines(cf: CompactFunction, base, axis: int, lo, hi, ulo, uhi, rho: float) -> np.ndarray:
    """Roots of U = rho along ``axis`` inside brackets [lo, hi].

    ``base`` holds the fixed coordinates of every line.  Safeguarded Newton
    with the exact derivative, falling back to bisection whenever a step
    leaves the bracket.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    if lo.size == 0:
        return lo
    f_lo_neg = np.asarray(ulo) < rho
    finite = np.isfinite(ulo) & np.isfinite(uhi)
    with np.errstate(all="ignore"):
        t = np.where(finite, lo + (rho - ulo) / (uhi - ulo) * (hi - lo), 0.5 * (lo + hi))
    t = np.where(np.isfinite(t), np.clip(t, lo, hi), 0.5 * (lo + hi))
    grad = cf.gradU[axis]
    scale = 1.0 + abs(rho)
    coords = [np.array(b, dtype=float) for b in base]
    for _ in range(NEWTON_ITER):
        coords[axis] = t
        f = _u_values(cf, coords) - rho
        done = np.abs(f) <= 1e-15 * scale
        if np.all(done | (hi - lo <= 4 * np.finfo(float).eps * np.maximum(np.abs(lo), np.abs(hi)))):
            break
        neg = f < 0
        same = neg == f_lo_neg
        lo = np.where(same & ~done, t, lo)
        hi = np.where(~same & ~done, t, hi)
        with np.errstate(all="ignore"):
            g = ex.evaluate_array(grad, coords, strict=False)
            step = t - f / g
        ok = np.isfinite(step) & (step > lo) & (step < hi)
        t = np.where(done, t, np.where(ok, step, 0.5 * (lo + hi)))
    return t


def _edge_crossings(cf: CompactFunction, axes, U: np.ndarray, rho: float):
    """Polished crossing coordinate on every cut lattice edge.

    Returns one array per axis, shaped like the edges along that axis, with
    the crossing coordinate on cut edges and nan elsewhere.
    """
    inside = U < rho
    mesh = np.meshgrid(*axes, indexing="ij")
    out = []
    for k in range(len(axes)):
        lo_sl = [slice(None)] * len(axes)
        hi_sl = [slice(None)] * len(axes)
        lo_sl[k] = slice(0, -1)
        hi_sl[k] = slice(1, None)
        lo_sl, hi_sl = tuple(lo_sl), tuple(hi_sl)
        cut = inside[lo_sl] != inside[hi_sl]
        res = np.full(cut.shape, np.nan)
        if np.any(cut):
            base = [m[lo_sl][cut] for m in mesh]
            lo = mesh[k][lo_sl][cut]
            hi = mesh[k][hi_sl][cut]
            res[cut] = _polish_on_lines(cf, base, k, lo, hi, U[lo_sl][cut], U[hi_sl][cut], rho)
        out.append(res)
    return out


def level_points(cf: CompactFunction, axes, rho: float) -> list[np.ndarray]:
    """Points on U = rho found on the grid lines of ``axes``, polished."""
    axes = [np.asarray(a, dtype=float) for a in axes]
    mesh = np.meshgrid(*axes, indexing="ij")
    U = _u_values(cf, mesh)
    n = len(axes)
    pts: list[list[np.ndarray]] = [[] for _ in range(n)]
    for k, cross in enumerate(_edge_crossings(cf, axes, U, rho)):
        cut = np.isfinite(cross)
        lo_sl = [slice(None)] * n
        lo_sl[k] = slice(0, -1)
        for j in range(n):
            pts[j].append(cross[cut] if j == k else mesh[j][tuple(lo_sl)][cut])
    return [np.concatenate(p) for p in pts]


# ---------------------------------------------------------------------------
# geometry shared by all levels of one (grid, U) pair


class LevelGeometry:
    """Lattice, U on the lattice and density interpolant for one density."""

    def __init__(self, d: DensityGrid, cf: CompactFunction, p: ProblemSpec | None = None):
        self.d = d
        self.cf = cf
        self.p = p
        g = d.grid
        self.grid = g
        self.axes = [np.asarray(a, dtype=float) for a in g.lattice_axes()]
        self.mesh = np.meshgrid(*self.axes, indexing="ij")
        self.U = _u_values(cf, self.mesh)
        self.density = d.padded()
        self._interp = None
        # lattice boundary layer: U < rho there means the sublevel set reaches the box
        self.edge_mask = np.zeros(self.U.shape, dtype=bool)
        for k in range(g.n):
            sl = [slice(None)] * g.n
            sl[k] = 0
            self.edge_mask[tuple(sl)] = True
            sl[k] = -1
            self.edge_mask[tuple(sl)] = True
        finite = self.U[np.isfinite(self.U)]
        self.u_max = float(finite.max()) if finite.size else math.inf

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """(Bi)linear interpolation of lattice ``values`` at points (m, n)."""
        if self.grid.n == 1:
            return np.interp(pts[:, 0], self.axes[0], values)
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        q = np.clip(pts, lo, hi)
        if values is self.density:
            if self._interp is None:
                self._interp = RegularGridInterpolator(self.axes, self.density, method="linear")
            return self._interp(q)
        return RegularGridInterpolator(self.axes, values, method="linear")(q)

    def truncated(self, rho: float) -> bool:
        return bool(np.any(self.U[self.edge_mask] < rho))

    # -- region integrals ---------------------------------------------------
    def region_integral(self, values: np.ndarray, rho: float, below: bool = True) -> float:
        """Integral of the interpolated lattice field over {U < rho} (or >=)."""
        if self.grid.n == 1:
            return self._region_1d(values, rho, below)
        return self._region_2d(values, rho, below)

    def _region_1d(self, f, rho, below):
        x = self.axes[0]
        U = self.U
        ins = (U < rho) if below else ~(U < rho)
        dx = np.diff(x)
        full = ins[:-1] & ins[1:]
        total = float(np.sum(0.5 * (f[:-1] + f[1:])[full] * dx[full]))
        cut = ins[:-1] != ins[1:]
        if np.any(cut):
            k = np.nonzero(cut)[0]
            t = _polish_on_lines(self.cf, [x[k]], 0, x[k], x[k + 1], U[k], U[k + 1], rho)
            s = (t - x[k]) / dx[k]
            ft = f[k] + s * (f[k + 1] - f[k])
            left_in = ins[k]
            part = np.where(left_in, 0.5 * (f[k] + ft) * (t - x[k]), 0.5 * (ft + f[k + 1]) * (x[k + 1] - t))
            total += float(np.sum(part))
        return total

    def _cell_data(self, rho):
        U = self.U
        below = U < rho
        corners = np.stack([below[:-1, :-1], below[1:, :-1], below[1:, 1:], below[:-1, 1:]], axis=-1)
        return below, corners

    def _crossings_2d(self, rho):
        cache = getattr(self, "_cross_cache", None)
        if cache is not None and cache[0] == rho:
            return cache[1]
        cx = _edge_crossings(self.cf, self.axes, self.U, rho)
        self._cross_cache = (rho, cx)
        return cx

    def _cell_vertices(self, rho, ii, jj):
        """Corner and edge-crossing coordinates of cells (ii, jj), perimeter order."""
        x, y = self.axes
        cx0, cx1 = self._crossings_2d(rho)
        c = np.stack([
            np.stack([x[ii], y[jj]], -1),
            np.stack([x[ii + 1], y[jj]], -1),
            np.stack([x[ii + 1], y[jj + 1]], -1),
            np.stack([x[ii], y[jj + 1]], -1),
        ], axis=1)
        e = np.stack([
            np.stack([cx0[ii, jj], y[jj]], -1),
            np.stack([x[ii + 1], cx1[ii + 1, jj]], -1),
            np.stack([cx0[ii, jj + 1], y[jj + 1]], -1),
            np.stack([x[ii], cx1[ii, jj]], -1),
        ], axis=1)
        return c, e

    def _centre_below(self, rho, ii, jj):
        x, y = self.axes
        cx = 0.5 * (x[ii] + x[ii + 1])
        cy = 0.5 * (y[jj] + y[jj + 1])
        return _u_values(self.cf, [cx, cy]) < rho

    def _bilinear(self, f, ii, jj, pts):
        x, y = self.axes
        s = (pts[..., 0] - x[ii][:, None]) / (x[ii + 1] - x[ii])[:, None]
        t = (pts[..., 1] - y[jj][:, None]) / (y[jj + 1] - y[jj])[:, None]
        f0 = f[ii, jj][:, None]
        f1 = f[ii + 1, jj][:, None]
        f2 = f[ii + 1, jj + 1][:, None]
        f3 = f[ii, jj + 1][:, None]
        return (1 - s) * (1 - t) * f0 + s * (1 - t) * f1 + s * t * f2 + (1 - s) * t * f3

    def _triangles(self, f, ii, jj, a, b, c):
        """Exact integral of the bilinear field over triangles (a, b, c)."""
        area = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))
        mids = np.stack([0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)], axis=1)
        vals = self._bilinear(f, ii, jj, mids)
        return area * vals.mean(axis=1)

    def _region_2d(self, f, rho, below):
        x, y = self.axes
        _, corners = self._cell_data(rho)
        side = corners if below else ~corners
        count = side.sum(axis=-1)
        area = np.multiply.outer(np.diff(x), np.diff(y))
        cell_mean = 0.25 * (f[:-1, :-1] + f[1:, :-1] + f[1:, 1:] + f[:-1, 1:])
        total = float(np.sum((cell_mean * area)[count == 4]))
        cut = (count > 0) & (count < 4)
        if not np.any(cut):
            return total
        ii, jj = np.nonzero(cut)
        s = side[ii, jj]
        c, e = self._cell_vertices(rho, ii, jj)
        edge_cut = np.stack([s[:, 0] != s[:, 1], s[:, 1] != s[:, 2], s[:, 2] != s[:, 3], s[:, 3] != s[:, 0]], -1)
        saddle = (s[:, 0] == s[:, 2]) & (s[:, 1] == s[:, 3]) & (s[:, 0] != s[:, 1])
        cb = self._centre_below(rho, ii[saddle], jj[saddle]) if np.any(saddle) else np.zeros(0, bool)
        centre_side = cb if below else ~cb
        # on the saddle side that does not contain the centre the region is two corner triangles
        split = np.zeros(ii.size, dtype=bool)
        split[np.nonzero(saddle)[0]] = ~centre_side
        poly = ~split
        if np.any(poly):
            verts = np.empty((ii.size, 8, 2))
            valid = np.zeros((ii.size, 8), dtype=bool)
            for k in range(4):
                verts[:, 2 * k] = c[:, k]
                valid[:, 2 * k] = s[:, k]
                verts[:, 2 * k + 1] = e[:, k]
                valid[:, 2 * k + 1] = edge_cut[:, k]
            verts, valid = verts[poly], valid[poly]
            order = np.argsort(~valid, axis=1, kind="stable")
            verts = np.take_along_axis(verts, order[:, :, None], axis=1)
            nvalid = valid.sum(axis=1)
            last = verts[np.arange(verts.shape[0]), nvalid - 1]
            pad = np.arange(8)[None, :] >= nvalid[:, None]
            verts = np.where(pad[:, :, None], last[:, None, :], verts)
            pi, pj = ii[poly], jj[poly]
            for k in range(1, 7):
                total += float(np.sum(self._triangles(f, pi, pj, verts[:, 0], verts[:, k], verts[:, k + 1])))
        if np.any(split):
            si, sj = ii[split], jj[split]
            cs, es, ss = c[split], e[split], s[split]
            for k in range(4):
                # corner k is adjacent to edges k and k-1
                m = ss[:, k]
                if np.any(m):
                    total += float(np.sum(self._triangles(f, si[m], sj[m], cs[m, k], es[m, k], es[m, (k - 1) % 4])))
        return total

    # -- contours -----------------------------------------------------------
    def contour(self, rho: float, regular_tol: float = REGULAR_TOL) -> "ContourSet":
        if self.grid.n == 1:
            return self._contour_1d(rho, regular_tol)
        return self._contour_2d(rho, regular_tol)

    def _finish(self, rho, pts, ds, vertices, regular_tol) -> "ContourSet":
        cf = self.cf
        coords = [pts[:, k] for k in range(pts.shape[1])]
        grad = cf.gradient(coords).T if pts.shape[0] else np.zeros((0, pts.shape[1]))
        gnorm = np.linalg.norm(grad, axis=1)
        dens = self.interpolate(self.density, pts) if pts.shape[0] else np.zeros(0)
        resid = np.abs(_u_values(cf, coords) - rho) if pts.shape[0] else np.zeros(0)
        message = ""
        regular = pts.shape[0] > 0
        if not regular:
            message = "empty contour"
        elif np.any(gnorm <= regular_tol):
            k = int(np.argmin(gnorm))
            regular = False
            message = f"|grad U| = {gnorm[k]:.3e} at {tuple(float(c) for c in pts[k])}"
        elif np.any(resid > LEVEL_TOL * (1 + abs(rho))):
            k = int(np.argmax(resid))
            regular = False
            message = f"|U - rho| = {resid[k]:.3e} after polishing at {tuple(float(c) for c in pts[k])}"
        form = np.full(pts.shape[0], np.nan)
        vform = np.full(vertices.shape[0], np.nan)
        if self.p is not None and pts.shape[0]:
            form = quadratic(self.p, cf, coords)
            vform = quadratic(self.p, cf, [vertices[:, k] for k in range(vertices.shape[1])])
        with np.errstate(divide="ignore", invalid="ignore"):
            normal = grad / gnorm[:, None]
        return ContourSet(rho, pts, ds, normal, gnorm, dens, form, vform, regular, self.truncated(rho), message)

    def _contour_1d(self, rho, regular_tol):
        x = self.axes[0]
        U = self.U
        ins = U < rho
        k = np.nonzero(ins[:-1] != ins[1:])[0]
        t = _polish_on_lines(self.cf, [x[k]], 0, x[k], x[k + 1], U[k], U[k + 1], rho)
        pts = t[:, None]
        return self._finish(rho, pts, np.ones(pts.shape[0]), pts, regular_tol)

    def _contour_2d(self, rho, regular_tol):
        _, corners = self._cell_data(rho)
        count = corners.sum(axis=-1)
        cut = (count > 0) & (count < 4)
        ii, jj = np.nonzero(cut)
        if ii.size == 0:
            return self._finish(rho, np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), regular_tol)
        s = corners[ii, jj]
        _, e = self._cell_vertices(rho, ii, jj)
        edge_cut = np.stack([s[:, 0] != s[:, 1], s[:, 1] != s[:, 2], s[:, 2] != s[:, 3], s[:, 3] != s[:, 0]], -1)
        saddle = edge_cut.all(axis=1)
        segs_a, segs_b = [], []
        plain = ~saddle
        if np.any(plain):
            ec = edge_cut[plain]
            first = np.argmax(ec, axis=1)
            second = 3 - np.argmax(ec[:, ::-1], axis=1)
            rows = np.arange(ec.shape[0])
            ep = e[plain]
            segs_a.append(ep[rows, first])
            segs_b.append(ep[rows, second])
        if np.any(saddle):
            es = e[saddle]
            cb = self._centre_below(rho, ii[saddle], jj[saddle])
            joined = cb == s[saddle, 0]
            # centre with corner 0: corners 1 and 3 are cut off, else corners 0 and 2
            pa = np.where(joined[:, None, None], es[:, [0, 2]], es[:, [3, 1]])
            pb = np.where(joined[:, None, None], es[:, [1, 3]], es[:, [0, 2]])
            segs_a.append(pa.reshape(-1, 2))
            segs_b.append(pb.reshape(-1, 2))
        a = np.concatenate(segs_a)
        b = np.concatenate(segs_b)
        ds = np.linalg.norm(b - a, axis=1)
        mid = self._project(0.5 * (a + b), rho)
        vertices = np.concatenate([a, b])
        return self._finish(rho, mid, ds, vertices, regular_tol)

    def _project(self, pts, rho):
        """Newton projection along grad U onto U = rho."""
        cf = self.cf
        lo = np.array([ax[0] for ax in self.axes])
        hi = np.array([ax[-1] for ax in self.axes])
        x = pts.copy()
        for _ in range(20):
            coords = [x[:, 0], x[:, 1]]
            f = _u_values(cf, coords) - rho
            if np.all(np.abs(f) <= 1e-14 * (1 + abs(rho))):
                break
            g = cf.gradient(coords).T
            g2 = np.sum(g * g, axis=1)
            with np.errstate(all="ignore"):
                step = (f / g2)[:, None] * g
            new = np.clip(x - step, lo, hi)
            ok = np.all(np.isfinite(new), axis=1) & (g2 > 0)
            ok &= np.isfinite(_u_values(cf, [new[:, 0], new[:, 1]]))
            x = np.where(ok[:, None], new, x)
        return x


@dataclass
class ContourSet:
    """Discretised level set {U = rho}.

    ``points`` are crossing points (1D) or projected segment midpoints
    (2D); ``ds`` is 1 per point in 1D and the segment length in 2D.
    ``vertex_form`` holds the quadratic form at segment end points, used
    only for the envelopes h and H.
    """

    rho: float
    points: np.ndarray
    ds: np.ndarray
    normal: np.ndarray
    grad_norm: np.ndarray
    density: np.ndarray
    form: np.ndarray
    vertex_form: np.ndarray
    regular: bool
    truncated: bool
    message: str = ""

    @property
    def length(self) -> float:
        return float(np.sum(self.ds))

    def envelopes(self) -> tuple[float, float]:
        vals = np.concatenate([self.form, self.vertex_form])
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            return math.nan, math.nan
        return float(vals.min()), float(vals.max())

    def integrate(self, weight: np.ndarray | float = 1.0) -> float:
        """Sum of ds * u * weight / |grad U| over the elements."""
        if not self.regular:
            raise IrregularLevelError(f"level {self.rho!r} is irregular: {self.message}")
        return float(np.sum(self.ds * self.density * weight / self.grad_norm))


# ---------------------------------------------------------------------------
# single-level API


def sublevel_measure(d: DensityGrid, cf: CompactFunction, rho: float, geometry: LevelGeometry | None = None) -> float:
    """mu({U < rho}) by cut-cell quadrature of the interpolated density."""
    geo = geometry or LevelGeometry(d, cf)
    return geo.region_integral(geo.density, rho, below=True)


def superlevel_measure(d: DensityGrid, cf: CompactFunction, rho: float, geometry: LevelGeometry | None = None) -> float:
    """mu({U >= rho}) on the same lattice, the complement of :func:`sublevel_measure`."""
    geo = geometry or LevelGeometry(d, cf)
    return geo.region_integral(geo.density, rho, below=False)


def contour(d: DensityGrid, cf: CompactFunction, rho: float, p: ProblemSpec | None = None,
            regular_tol: float = REGULAR_TOL) -> ContourSet:
    return LevelGeometry(d, cf, p).contour(rho, regular_tol)


def surface_integral(d: DensityGrid, cf: CompactFunction, rho: float, weight: str = "inv_grad",
                     p: ProblemSpec | None = None, regular_tol: float = REGULAR_TOL,
                     geometry: LevelGeometry | None = None) -> float:
    """Integral of u / |grad U| (``inv_grad``) or u a(grad U, grad U) / |grad U|
    (``flux_form``, needs ``p``) over {U = rho}."""
    if weight not in ("inv_grad", "flux_form"):
        raise ValueError("weight must be 'inv_grad' or 'flux_form'")
    if weight == "flux_form" and p is None and (geometry is None or geometry.p is None):
        raise ValueError("flux_form needs the problem data")
    geo = geometry or LevelGeometry(d, cf, p)
    c = geo.contour(rho, regular_tol)
    return c.integrate(1.0 if weight == "inv_grad" else c.form)


# ---------------------------------------------------------------------------
# profiles


@dataclass
class LevelProfile:
    rho: np.ndarray
    y: np.ndarray
    yprime: np.ndarray
    h: np.ndarray
    H: np.ndarray
    regular: np.ndarray
    truncated: np.ndarray
    cum_inv_H: np.ndarray
    cum_inv_h: np.ndarray
    rho_m: float
    notes: list[str] = field(default_factory=list)
    # levels added by build_profile rather than requested (rho_m)
    inserted: np.ndarray | None = None

    @property
    def Htilde_A(self) -> np.ndarray:
        return self.h * self.cum_inv_H

    @property
    def Htilde_B(self) -> np.ndarray:
        return self.H * self.cum_inv_h

    def index(self, rho: float) -> int | None:
        """Index of a profiled level equal to ``rho`` (relative 1e-12), else None."""
        k = int(np.argmin(np.abs(self.rho - rho)))
        return k if abs(self.rho[k] - rho) <= 1e-12 * max(1.0, abs(rho)) else None


def _cumulative(rho, vals, regular, origin):
    """Signed trapezoid integral of vals from ``origin`` over regular levels."""
    use = regular & np.isfinite(vals)
    out = np.full(rho.size, np.nan)
    if use.sum() < 2:
        return out
    r, v = rho[use], vals[use]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(r))])
    all_cum = np.interp(rho, r, cum)
    base = np.interp(origin, r, cum)
    out = all_cum - base
    out[~use & ((rho < r[0]) | (rho > r[-1]))] = np.nan
    return out


def build_profile(d: DensityGrid, cf: CompactFunction, rho_grid, p: ProblemSpec,
                  regular_tol: float = REGULAR_TOL, threads: int | None = None, extra=()) -> LevelProfile:
    """Evaluate y, y', h, H and the cumulative envelope integrals on a level grid.

    ``rho_m`` of ``cf`` (when positive) and the levels in ``extra`` are
    added to the grid and flagged as inserted; cumulative integrals then
    start on a profiled level and bound checks find their levels exactly.
    """
    requested = np.unique(np.asarray(rho_grid, dtype=float))
    if requested.size == 0:
        raise ValueError("empty level grid")
    rho = requested
    added = [float(r) for r in extra] + ([cf.rho_m] if cf.rho_m > 0 else [])
    for r in added:
        if not np.any(np.isclose(rho, r, rtol=1e-12, atol=0)):
            rho = np.unique(np.append(rho, r))
    inserted = ~np.isin(rho, requested)
    geo = LevelGeometry(d, cf, p)
    notes: list[str] = []
    if rho[-1] > geo.u_max:
        notes.append(f"levels above the sampled maximum of U ({geo.u_max:.6g}) cover the whole box")

    def one(r):
        local = LevelGeometry.__new__(LevelGeometry)
        local.__dict__.update({k: v for k, v in geo.__dict__.items() if k != "_cross_cache"})
        y = local.region_integral(local.density, r, below=True)
        c = local.contour(r, regular_tol)
        yp = c.integrate() if c.regular else math.nan
        h, H = c.envelopes()
        return y, yp, h, H, c.regular, c.truncated, c.message

    if threads is not None and threads <= 1:
        rows = [one(r) for r in rho]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, rho))
    y = np.array([r[0] for r in rows])
    yprime = np.array([r[1] for r in rows])
    h = np.array([r[2] for r in rows])
    H = np.array([r[3] for r in rows])
    regular = np.array([r[4] for r in rows], dtype=bool)
    truncated = np.array([r[5] for r in rows], dtype=bool)
    for r, row in zip(rho, rows):
        if row[5]:
            notes.append(f"level {r:.6g}: sublevel set reaches the box boundary (truncated)")
        if not row[4]:
            notes.append(f"level {r:.6g}: irregular ({row[6]})")
    with np.errstate(divide="ignore"):
        inv_H = np.where(H > 0, 1.0 / H, np.inf)
        inv_h = np.where(h > 0, 1.0 / h, np.inf)
    cum_H = _cumulative(rho, inv_H, regular, cf.rho_m)
    cum_h = _cumulative(rho, inv_h, regular, cf.rho_m)
    return LevelProfile(rho, y, yprime, h, H, regular, truncated, cum_H, cum_h, cf.rho_m, notes, inserted)


def derivative_check(profile: LevelProfile) -> float:
    """Max relative gap between y' and centred differences of y.

    Only interior levels whose two neighbours are regular as well count.
    Levels inserted by :func:`build_profile` are left out so the stencil
    follows the requested grid.
    """
    keep = np.ones(profile.rho.size, dtype=bool) if profile.inserted is None else ~profile.inserted
    r, y, yp, reg = profile.rho[keep], profile.y[keep], profile.yprime[keep], profile.regular[keep]
    worst = 0.0
    used = 0
    for k in range(1, r.size - 1):
        if not (reg[k - 1] and reg[k] and reg[k + 1]):
            continue
        cd = (y[k + 1] - y[k - 1]) / (r[k + 1] - r[k - 1])
        worst = max(worst, abs(yp[k] - cd) / (abs(yp[k]) + 1e-12))
        used += 1
    if used == 0:
        raise ValueError("derivative check needs three consecutive regular levels")
    return worst


def level_grid(rho_min: float, rho_max: float, count: int, spacing: str = "linear") -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    if spacing == "log":
        if rho_min <= 0:
            raise ValueError("log spacing needs rho_min > 0")
        return np.geomspace(rho_min, rho_max, count)
    if spacing != "linear":
        raise ValueError("spacing must be 'linear' or 'log'")
    return np.linspace(rho_min, rho_max, count)


PROFILE_HEADER = ["rho", "y", "yprime", "h", "H", "Htilde_A", "Htilde_B", "regular"]


def profile_rows(profile: LevelProfile):
    ha, hb = profile.Htilde_A, profile.Htilde_B
    for k in range(profile.rho.size):
        yield [fmt(profile.rho[k]), fmt(profile.y[k]), fmt(profile.yprime[k]), fmt(profile.h[k]), fmt(profile.H[k]),
               fmt(ha[k]), fmt(hb[k]), "true" if profile.regular[k] else "false"]


def write_profile_csv(profile: LevelProfile, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        w.writerows(profile_rows(profile))
