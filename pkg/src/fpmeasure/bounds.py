"""Measure bounds for Lyapunov and anti-Lyapunov functions.

Each ``bound_*`` function reads a :class:`~fpmeasure.levelset.LevelProfile`
and returns a :class:`BoundReport` comparing the measured quantity with
the bound.  Upper bounds (Aa, Ab, Ac) count as satisfied when
``measured <= bound * (1 + slack)``, lower bounds (Ba, Bb) when
``measured >= bound / (1 + slack)``.

All integrals over levels are trapezoid sums over regular profiled levels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import PreconditionError
from .grid import fmt
from .levelset import LevelProfile
from .verifier import PhiMap

DEFAULT_SLACK = 1e-2
MIN_REGULAR_FRACTION = 0.9
TAIL_FRACTION = 0.1


# ---------------------------------------------------------------------------
# cutoff


@dataclass(frozen=True)
class CutoffFunction(PhiMap):
    """C2 monotone map: 0 below rho_m, identity above rho_0, quintic between.

    With s = (t - rho_m) / w and w = rho_0 - rho_m the bridge is
    ``w * (b3 s^3 + b4 s^4 + b5 s^5)``.
    """

    rho_m: float
    rho_0: float
    coeffs: tuple[float, float, float]
    C: float

    @property
    def knots(self):
        return (self.rho_m, self.rho_0)

    @property
    def width(self) -> float:
        return self.rho_0 - self.rho_m

    def _s(self, t):
        return (np.asarray(t, dtype=float) - self.rho_m) / self.width

    def value(self, t):
        t = np.asarray(t, dtype=float)
        s = self._s(t)
        b3, b4, b5 = self.coeffs
        mid = self.width * s**3 * (b3 + s * (b4 + s * b5))
        return np.where(t <= self.rho_m, 0.0, np.where(t >= self.rho_0, t, mid))

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        s = self._s(t)
        b3, b4, b5 = self.coeffs
        mid = s**2 * (3 * b3 + s * (4 * b4 + s * 5 * b5))
        return np.where(t <= self.rho_m, 0.0, np.where(t >= self.rho_0, 1.0, mid))

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        s = self._s(t)
        b3, b4, b5 = self.coeffs
        mid = s * (6 * b3 + s * (12 * b4 + s * 20 * b5)) / self.width
        return np.where(t <= self.rho_m, 0.0, np.where(t >= self.rho_0, 0.0, mid))


def build_cutoff(rho_m: float, rho_0: float) -> CutoffFunction:
    """Quintic bridge matching (0, 0, 0) at rho_m and (rho_0, 1, 0) at rho_0."""
    rho_m, rho_0 = float(rho_m), float(rho_0)
    if not rho_m < rho_0:
        raise ValueError("need rho_m < rho_0")
    w = rho_0 - rho_m
    R = rho_0 / w
    coeffs = (10 * R - 4, 7 - 15 * R, 6 * R - 3)
    proto = CutoffFunction(rho_m, rho_0, coeffs, math.nan)
    t = np.linspace(rho_m, rho_0, 1000)
    if np.min(proto.d1(t)) < -1e-12:
        raise RuntimeError("cutoff is not monotone")  # cannot happen for R >= 1
    b3, b4, b5 = coeffs
    # phi''' is quadratic in s: 6 b3 + 24 b4 s + 60 b5 s^2
    crit = np.roots([60 * b5, 24 * b4, 6 * b3]) if b5 != 0 or b4 != 0 else np.zeros(0)
    crit = crit[np.isreal(crit)].real
    crit = crit[(crit >= 0) & (crit <= 1)]
    s = np.concatenate([np.linspace(0.0, 1.0, 10001), crit])
    C = float(np.max(np.abs(proto.d2(rho_m + s * w))))
    return CutoffFunction(rho_m, rho_0, coeffs, C)


# ---------------------------------------------------------------------------
# reports


@dataclass
class BoundReport:
    theorem: str
    rho_m: float
    rho_0: float
    rho: float
    gamma: float
    measured: float
    bound: float
    satisfied: bool
    slack: float
    notes: list[str] = field(default_factory=list)


def _upper(measured, bound, slack):
    return bool(measured <= 0.0 or measured <= bound * (1 + slack))


def _lower(measured, bound, slack):
    return bool(measured >= bound / (1 + slack))


def _y(profile: LevelProfile, rho: float, notes: list[str]) -> float:
    k = profile.index(rho)
    if k is not None:
        return float(profile.y[k])
    if not profile.rho[0] <= rho <= profile.rho[-1]:
        raise PreconditionError(f"level {rho!r} outside the profiled range")
    notes.append(f"y({rho:.6g}) interpolated between profiled levels")
    return float(np.interp(rho, profile.rho, profile.y))


def _window(profile: LevelProfile, a: float, b: float):
    tol = 1e-12 * max(1.0, abs(a), abs(b))
    return (profile.rho >= a - tol) & (profile.rho <= b + tol)


def _regular_fraction(profile: LevelProfile, a: float, b: float) -> float:
    w = _window(profile, a, b)
    return float(profile.regular[w].mean()) if np.any(w) else 0.0


def _level_integral(profile: LevelProfile, vals: np.ndarray, a: float, b: float, what: str) -> float:
    """Trapezoid integral of vals over regular levels in [a, b]."""
    if b <= a:
        return 0.0
    w = _window(profile, a, b) & profile.regular
    r, v = profile.rho[w], vals[w]
    if np.any(~np.isfinite(v)):
        k = int(np.argmax(~np.isfinite(v)))
        raise PreconditionError(f"{what} is not finite at regular level {r[k]:.6g}")
    if r.size < 2:
        raise PreconditionError(f"fewer than two regular levels in [{a:.6g}, {b:.6g}]")
    total = float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(r)))
    # ends that are not profiled levels: extend the end values
    total += v[0] * max(0.0, r[0] - a) + v[-1] * max(0.0, b - r[-1])
    return total


def _inverse(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, 1.0 / x, np.inf)


def bound_Aa(profile: LevelProfile, gamma: float, rho_m: float, rho_0: float,
             slack: float = DEFAULT_SLACK) -> BoundReport:
    """mu(U >= rho_0) <= C H_max (y(rho_0) - y(rho_m)) / gamma."""
    if not gamma > 0:
        raise PreconditionError("Lyapunov constant gamma must be positive")
    notes: list[str] = []
    measured = 1.0 - _y(profile, rho_0, notes)
    w = rho_0 - rho_m
    if w <= 1e-12 * max(1.0, abs(rho_0)):
        notes.append("bound diverges (rho_0 -> rho_m)")
        return BoundReport("Aa", rho_m, rho_0, rho_0, gamma, measured, math.inf, True, slack, notes)
    cut = build_cutoff(rho_m, rho_0)
    win = _window(profile, rho_m, rho_0) & profile.regular & np.isfinite(profile.H)
    if not np.any(win):
        raise PreconditionError(f"no regular profiled level in [{rho_m:.6g}, {rho_0:.6g}]")
    h_max = float(np.max(profile.H[win]))
    bound = cut.C * h_max * (_y(profile, rho_0, notes) - _y(profile, rho_m, notes)) / gamma
    if not math.isfinite(bound):
        bound = math.inf
        notes.append("bound diverges")
    notes.append(f"C = {cut.C:.17g}, max H = {h_max:.17g}")
    return BoundReport("Aa", rho_m, rho_0, rho_0, gamma, measured, bound, _upper(measured, bound, slack), slack, notes)


def bound_Ab(profile: LevelProfile, gamma: float, rho_m: float, rho: float,
             slack: float = DEFAULT_SLACK) -> BoundReport:
    """mu(U >= rho) <= exp(-gamma int_{rho_m}^{rho} 1/H)."""
    if not gamma > 0:
        raise PreconditionError("Lyapunov constant gamma must be positive")
    notes: list[str] = []
    measured = 1.0 - _y(profile, rho, notes)
    if rho <= rho_m:
        return BoundReport("Ab", rho_m, math.nan, rho, gamma, measured, 1.0, _upper(measured, 1.0, slack), slack, notes)
    frac = _regular_fraction(profile, rho_m, rho)
    if frac < MIN_REGULAR_FRACTION:
        raise PreconditionError(f"only {frac:.0%} of levels in [{rho_m:.6g}, {rho:.6g}] are regular")
    T = _level_integral(profile, _inverse(profile.H), rho_m, rho, "1/H")
    bound = math.exp(-gamma * T)
    return BoundReport("Ab", rho_m, math.nan, rho, gamma, measured, bound, _upper(measured, bound, slack), slack, notes)


def _tail_estimate(r: np.ndarray, g: np.ndarray, rho_cap: float):
    """Power-law fit of g over the last decade of levels; returns (p, tail)."""
    last = r >= rho_cap / 10.0
    if last.sum() < 3:
        last = np.ones(r.size, dtype=bool)
    if last.sum() < 3 or np.any(g[last] <= 0):
        return math.nan, math.inf
    p = float(np.polyfit(np.log(r[last]), np.log(g[last]), 1)[0])
    if p >= -1.0:
        return p, math.inf
    return p, float(r[-1] * g[-1] / (-p - 1.0))


def bound_Ac(profile: LevelProfile, rho_0: float, rho_cap: float | None = None,
             slack: float = DEFAULT_SLACK) -> BoundReport:
    """mu(U >= rho_m) <= (y(rho_0) - y(rho_m)) exp(int_{rho_0}^{rho_cap} 1/Htilde_A).

    The integral is cut at ``rho_cap`` (default: top profiled level), which
    makes the bound smaller and the check stricter.  The integral counts as
    divergent when a power law fitted to the integrand over the last decade
    of levels decays no faster than 1/rho, or when the extrapolated tail
    beyond rho_cap exceeds ``TAIL_FRACTION`` of the computed part; the bound
    is then +inf.
    """
    rho_m = profile.rho_m
    rho_cap = float(profile.rho[-1]) if rho_cap is None else float(rho_cap)
    notes: list[str] = []
    measured = 1.0 - _y(profile, rho_m, notes)
    ref = _y(profile, rho_0, notes) - _y(profile, rho_m, notes)
    win = _window(profile, rho_0, rho_cap) & profile.regular
    h = profile.h[win]
    if np.any(~(h > 0)):
        raise PreconditionError("h must be positive on the regular levels used")
    ht = profile.Htilde_A
    k0 = profile.index(rho_0)
    ht0 = float(ht[k0]) if k0 is not None else float(np.interp(rho_0, profile.rho, ht))
    if not ht0 > 0:
        notes.append("integral of 1/Htilde diverges at rho_0 (Htilde vanishes); bound is +inf")
        return BoundReport("Ac", rho_m, rho_0, rho_cap, math.nan, measured, math.inf, True, slack, notes)
    I = _level_integral(profile, _inverse(ht), rho_0, rho_cap, "1/Htilde_A")
    r, g = profile.rho[win], _inverse(ht)[win]
    p, tail = _tail_estimate(r, g, rho_cap)
    notes.append(f"integral truncated at rho_cap = {rho_cap:.6g}; truncation lowers the bound (stricter check)")
    if not tail <= TAIL_FRACTION * I:
        notes.append(f"integral of 1/Htilde judged divergent (fitted decay exponent {p:.3g}); bound is +inf")
        return BoundReport("Ac", rho_m, rho_0, rho_cap, math.nan, measured, math.inf, True, slack, notes)
    notes.append(f"heuristic tail estimate beyond rho_cap {tail:.3g} (decay exponent {p:.3g})")
    bound = ref * math.exp(I)
    return BoundReport("Ac", rho_m, rho_0, rho_cap, math.nan, measured, bound, _upper(measured, bound, slack), slack,
                       notes)


OMEGA_STAR_NOTE = "mu(closed rho_m-sublevel set) taken equal to mu(open one): the level set is null"


def _lower_bound(theorem, profile, rho_m, rho_0, rho, exponent, gamma, slack, notes) -> BoundReport:
    measured = _y(profile, rho, notes) - _y(profile, rho_m, notes)
    ref = _y(profile, rho_0, notes) - _y(profile, rho_m, notes)
    bound = ref * math.exp(exponent)
    notes.append(OMEGA_STAR_NOTE)
    return BoundReport(theorem, rho_m, rho_0, rho, gamma, measured, bound, _lower(measured, bound, slack), slack, notes)


def bound_Ba(profile: LevelProfile, gamma: float, rho_m: float, rho_0: float, rho: float,
             slack: float = DEFAULT_SLACK) -> BoundReport:
    """y(rho) - y(rho_m) >= (y(rho_0) - y(rho_m)) exp(gamma int_{rho_0}^{rho} 1/H)."""
    if not gamma > 0:
        raise PreconditionError("anti-Lyapunov constant gamma must be positive")
    if rho < rho_0:
        raise PreconditionError("need rho >= rho_0")
    notes: list[str] = []
    if rho > rho_0:
        frac = _regular_fraction(profile, rho_0, rho)
        if frac < MIN_REGULAR_FRACTION:
            raise PreconditionError(f"only {frac:.0%} of levels in [{rho_0:.6g}, {rho:.6g}] are regular")
    T = _level_integral(profile, _inverse(profile.H), rho_0, rho, "1/H")
    return _lower_bound("Ba", profile, rho_m, rho_0, rho, gamma * T, gamma, slack, notes)


def bound_Bb(profile: LevelProfile, rho_m: float, rho_0: float, rho: float,
             slack: float = DEFAULT_SLACK) -> BoundReport:
    """y(rho) - y(rho_m) >= (y(rho_0) - y(rho_m)) exp(int_{rho_0}^{rho} 1/Htilde_B)."""
    if not math.isclose(rho_m, profile.rho_m, rel_tol=1e-12, abs_tol=1e-15):
        raise PreconditionError("profile was built for a different rho_m")
    if rho < rho_0:
        raise PreconditionError("need rho >= rho_0")
    win = _window(profile, rho_0, rho) & profile.regular
    if np.any(~(profile.h[win] > 0)):
        raise PreconditionError("h must be positive on the regular levels used")
    T = _level_integral(profile, _inverse(profile.Htilde_B), rho_0, rho, "1/Htilde_B")
    return _lower_bound("Bb", profile, rho_m, rho_0, rho, T, math.nan, slack, [])


# ---------------------------------------------------------------------------
# output

BOUNDS_HEADER = ["theorem", "rho_m", "rho_0", "rho", "gamma", "measured", "bound", "satisfied", "slack", "notes"]


def write_bounds_csv(reports: list[BoundReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUNDS_HEADER)
        for r in reports:
            w.writerow([r.theorem, fmt(r.rho_m), fmt(r.rho_0), fmt(r.rho), fmt(r.gamma), fmt(r.measured),
                        fmt(r.bound), "true" if r.satisfied else "false", fmt(r.slack), "; ".join(r.notes)])


def _json_number(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def bounds_to_json(reports: list[BoundReport]) -> list[dict]:
    return [{k: _json_number(v) for k, v in asdict(r).items()} for r in reports]


def write_bounds_json(reports: list[BoundReport], path) -> None:
    Path(path).write_text(json.dumps(bounds_to_json(reports), indent=2) + "\n")
