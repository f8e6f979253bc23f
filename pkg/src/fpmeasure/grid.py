"""Tensor grids, density grids and the quadrature lattice built on them.

Every node owns a control volume.  On reflecting axes nodes sit on the
walls, so the end control volumes are half cells and node quadrature is the
trapezoid rule.  On open axes nodes are cell centred; the half cell between
the last node and the wall is covered by a *pad* point on the wall whose
value extends the node data (see :func:`pad_density`).  Integrals over the
whole box are then the trapezoid rule on the padded lattice.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problem import OPEN, REFLECTING, ProblemSpec, axis_nodes

PAD_FIT_CELLS = 32


@dataclass(frozen=True)
class Grid:
    axes: tuple[np.ndarray, ...]
    box: tuple[tuple[float, float], ...]
    boundary: tuple[str, ...]

    def __post_init__(self):
        for x in self.axes:
            if x.size < 3:
                raise ValueError("need at least 3 nodes per axis")
            d = np.diff(x)
            if np.any(d <= 0):
                raise ValueError("grid nodes must be strictly increasing")
            # relative to the coordinate magnitude: linspace rounding scales with |x|
            if np.max(np.abs(d - d.mean())) > 1e-12 * max(np.max(np.abs(x)), d.mean()) * 10:
                raise ValueError("grid spacing is not uniform")

    @classmethod
    def for_problem(cls, p: ProblemSpec, counts) -> "Grid":
        if isinstance(counts, int):
            counts = [counts] * p.n
        if len(counts) != p.n:
            raise ValueError("one node count per axis required")
        axes = tuple(axis_nodes(lo, hi, int(c), kind) for (lo, hi), c, kind in zip(p.box, counts, p.boundary))
        return cls(axes, p.box, p.boundary)

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(x.size for x in self.axes)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (x.size - 1 if kind == REFLECTING else x.size)
                     for x, (lo, hi), kind in zip(self.axes, self.box, self.boundary))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    def axis_weights(self, k: int) -> np.ndarray:
        """Control-volume fraction of each node along axis ``k``."""
        w = np.ones(self.axes[k].size)
        if self.boundary[k] == REFLECTING:
            w[0] = w[-1] = 0.5
        return w

    def cv_weights(self) -> np.ndarray:
        """Control-volume size of every node (fractions times cell volume)."""
        w = self.axis_weights(0)
        for k in range(1, self.n):
            w = np.multiply.outer(w, self.axis_weights(k))
        return w * self.cell_volume

    def outer_mask(self, layers: int = 1) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.n):
            sl = [slice(None)] * self.n
            sl[k] = slice(0, layers)
            mask[tuple(sl)] = True
            sl[k] = slice(-layers, None)
            mask[tuple(sl)] = True
        return mask

    # -- padded lattice -------------------------------------------------
    def lattice_axes(self) -> list[np.ndarray]:
        out = []
        for x, (lo, hi), kind in zip(self.axes, self.box, self.boundary):
            out.append(np.concatenate([[lo], x, [hi]]) if kind == OPEN else x.copy())
        return out

    def lattice_real(self) -> np.ndarray:
        """Boolean mask over the padded lattice marking genuine nodes."""
        masks = []
        for x, kind in zip(self.axes, self.boundary):
            m = np.ones(x.size + (2 if kind == OPEN else 0), dtype=bool)
            if kind == OPEN:
                m[0] = m[-1] = False
            masks.append(m)
        out = masks[0]
        for m in masks[1:]:
            out = np.logical_and.outer(out, m)
        return out

    def pad_constant(self, values: np.ndarray) -> np.ndarray:
        width = [(1, 1) if kind == OPEN else (0, 0) for kind in self.boundary]
        return np.pad(values, width, mode="edge")

    def pad_linear(self, values: np.ndarray) -> np.ndarray:
        """Pad open axes by linear extrapolation from the two outer nodes."""
        out = values
        for k, kind in enumerate(self.boundary):
            if kind != OPEN:
                continue
            first = np.take(out, [0], axis=k)
            second = np.take(out, [1], axis=k)
            last = np.take(out, [-1], axis=k)
            prev = np.take(out, [-2], axis=k)
            # wall is half a cell beyond the outer node
            left = first + 0.5 * (first - second)
            right = last + 0.5 * (last - prev)
            out = np.concatenate([left, out, right], axis=k)
        return out

    def pad_density(self, values: np.ndarray) -> np.ndarray:
        """Pad open axes for a probability density.

        Where the density grows towards the wall like ``c t^alpha`` with
        ``-1 < alpha < 0`` (t = distance to the wall) the wall value is chosen
        so that the padded trapezoid rule integrates that power law exactly
        over the outer ``PAD_FIT_CELLS`` cells.  Otherwise the outer node
        value is copied.
        """
        out = values
        for k, kind in enumerate(self.boundary):
            if kind != OPEN:
                continue
            h = self.spacing[k]
            kk = min(PAD_FIT_CELLS, out.shape[k] // 2)
            left = _singular_pad(np.take(out, 0, axis=k), np.take(out, 1, axis=k), h, kk)
            right = _singular_pad(np.take(out, -1, axis=k), np.take(out, -2, axis=k), h, kk)
            out = np.concatenate([np.expand_dims(left, k), out, np.expand_dims(right, k)], axis=k)
        return out


def _singular_pad(u0, u1, h: float, kk: int):
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    ghost = u0.copy()
    with np.errstate(all="ignore"):
        alpha = np.log(u0 / u1) / math.log(1.0 / 3.0)
    sing = (u1 > 0) & (u0 > u1) & np.isfinite(alpha)
    if not np.any(sing):
        return ghost
    a = np.clip(alpha[sing], -1 + 1e-9, 0.0)
    s = np.arange(kk + 1) + 0.5
    pw = s[None, :] ** a[:, None]
    trap = pw[:, 1:-1].sum(axis=1) + 0.5 * (pw[:, 0] + pw[:, -1])
    exact = (kk + 0.5) ** (1 + a) / (1 + a)
    # slab mass in units of c * h^(1+a); c = u0 / (h/2)^a
    m_slab = u0[sing] * h * 0.5 ** (-a) * (exact - trap)
    ghost[sing] = 4.0 * m_slab / h - u0[sing]
    return ghost


def lattice_trapezoid(values: np.ndarray, axes) -> float:
    out = values
    for k in reversed(range(len(axes))):
        out = np.trapezoid(out, axes[k], axis=k)
    return float(out)


@dataclass
class DensityGrid:
    """Normalised nonnegative density values on the nodes of ``grid``."""

    grid: Grid
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def padded(self) -> np.ndarray:
        return self.grid.pad_density(self.values)

    def mass(self) -> float:
        return lattice_trapezoid(self.padded(), self.grid.lattice_axes())

    def normalized(self) -> "DensityGrid":
        m = self.mass()
        if not m > 0 or not math.isfinite(m):
            raise ValueError(f"density has nonpositive or non-finite mass ({m})")
        return DensityGrid(self.grid, self.values / m, dict(self.diagnostics))

    def boundary_mass(self) -> float:
        """Mass carried by the outermost node layer (truncation indicator)."""
        w = self.grid.cv_weights()
        return float(np.sum((self.values * w)[self.grid.outer_mask()]))


# ---------------------------------------------------------------------------
# CSV


def fmt(v) -> str:
    """17 significant digits: float64 round-trips exactly."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def write_density_csv(d: DensityGrid, path) -> None:
    path = Path(path)
    names = [f"x{k + 1}" for k in range(d.grid.n)] + ["u"]
    mesh = d.grid.mesh()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for idx in np.ndindex(*d.grid.shape):
            w.writerow([fmt(m[idx]) for m in mesh] + [fmt(d.values[idx])])


def read_density_csv(path, grid: Grid) -> DensityGrid:
    """Read a density written by :func:`write_density_csv` onto ``grid``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    expected = [f"x{k + 1}" for k in range(grid.n)] + ["u"]
    if header != expected:
        raise ValueError(f"density CSV header {header} does not match {expected}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.shape[0] != int(np.prod(grid.shape)):
        raise ValueError("density CSV node count does not match the grid")
    mesh = grid.mesh()
    for k in range(grid.n):
        ref = mesh[k].ravel()
        if np.max(np.abs(data[:, k] - ref)) > 1e-12 * max(1.0, np.max(np.abs(ref))):
            raise ValueError("density CSV coordinates do not match the grid")
    return DensityGrid(grid, data[:, -1].reshape(grid.shape))
