"""Command line driver: config loading, pipeline and report files.

Stages run in the order solve, profile, identity, bounds; each subcommand
runs the stages up to and including its own (``all`` runs every stage).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import expr as ex
from .bounds import (BoundReport, bound_Aa, bound_Ab, bound_Ac, bound_Ba, bound_Bb, bounds_to_json, write_bounds_csv,
                     write_bounds_json)
from .errors import ClassificationMismatch, ConfigError, ExpressionSyntaxError, FPMeasureError, SolverError
from .grid import DensityGrid, Grid, read_density_csv, write_density_csv
from .levelset import LevelProfile, build_profile, derivative_check, level_grid, profile_rows, write_profile_csv, \
    PROFILE_HEADER
from .problem import (ANTI_LYAPUNOV, LYAPUNOV, WEAK_ANTI_LYAPUNOV, WEAK_LYAPUNOV, CompactFunction,
                      LyapunovClassification, ProblemSpec, classify_refined, default_rho_M)
from .solver import analytic_density, solve_stationary
from .verifier import IdentityMap, identity_sweep, write_identity_csv, write_identity_json

log = logging.getLogger("fpmeasure")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4
STAGES = ("solve", "profile", "identity", "bounds")
BOUND_CHECKS = ("Aa", "Ab", "Ac", "Ba", "Bb")
CHECK_STAGE = {"derivative": "profile", "identity": "identity", **{b: "bounds" for b in BOUND_CHECKS}}
REQUIRED_KIND = {
    "Aa": (LYAPUNOV,),
    "Ab": (LYAPUNOV,),
    "Ac": (LYAPUNOV, WEAK_LYAPUNOV),
    "Ba": (ANTI_LYAPUNOV,),
    "Bb": (ANTI_LYAPUNOV, WEAK_ANTI_LYAPUNOV),
}

_expr = {"type": "string", "minLength": 1}
_number_or_list = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}, "minItems": 1}]}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["problem", "compact_function", "grid"],
    "additionalProperties": False,
    "properties": {
        "problem": {
            "type": "object",
            "required": ["dimension", "box", "A", "V"],
            "additionalProperties": False,
            "properties": {
                "dimension": {"enum": [1, 2]},
                "box": {"type": "array", "minItems": 1, "maxItems": 2,
                        "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
                "A": {"oneOf": [_expr, {"type": "array", "items": {"type": "array", "items": _expr}}]},
                "V": {"oneOf": [_expr, {"type": "array", "items": _expr}]},
                "boundary": {"oneOf": [{"enum": ["reflecting", "open"]},
                                       {"type": "array", "items": {"enum": ["reflecting", "open"]}}]},
                "exact_density": _expr,
                "sobolev_p": {"type": "number"},
            },
        },
        "compact_function": {
            "type": "object",
            "required": ["U"],
            "additionalProperties": False,
            "properties": {
                "U": _expr,
                "rho_m": {"type": "number", "minimum": 0},
                "rho_M": {"type": ["number", "null"]},
            },
        },
        "grid": {
            "type": "object",
            "required": ["N"],
            "additionalProperties": False,
            "properties": {"N": {"oneOf": [{"type": "integer", "minimum": 3},
                                           {"type": "array", "items": {"type": "integer", "minimum": 3}}]}},
        },
        "density": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"source": {"enum": ["solve", "exact"]}},
        },
        "levels": {
            "type": "object",
            "required": ["rho_min", "rho_max", "count"],
            "additionalProperties": False,
            "properties": {
                "rho_min": {"type": "number"},
                "rho_max": {"type": "number"},
                "count": {"type": "integer", "minimum": 1},
                "spacing": {"enum": ["linear", "log"]},
            },
        },
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type"],
                "additionalProperties": False,
                "properties": {
                    "type": {"enum": ["identity", "derivative", *BOUND_CHECKS]},
                    "rho_0": {"type": "number"},
                    "rho": _number_or_list,
                    "rho_cap": {"type": "number"},
                    "gamma": {"type": "number", "exclusiveMinimum": 0},
                    "tolerance": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps_disc": {"type": "number", "minimum": 0},
                "regular_tol": {"type": "number", "exclusiveMinimum": 0},
                "identity": {"type": "number", "exclusiveMinimum": 0},
                "derivative": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}, "minItems": 1},
            },
        },
    },
}


@dataclass
class Check:
    type: str
    pointer: str
    rho_0: float | None = None
    rho: list[float] | None = None
    rho_cap: float | None = None
    gamma: float | None = None
    tolerance: float | None = None


@dataclass
class RunConfig:
    problem: ProblemSpec
    compact: CompactFunction
    counts: list[int]
    density_source: str
    levels: np.ndarray | None
    checks: list[Check]
    eps_disc: float = 1e-2
    regular_tol: float = 1e-6
    identity_tol: float = 2e-3
    derivative_tol: float = 2e-2
    out_dir: Path = Path("out")
    formats: tuple[str, ...] = ("csv", "json")
    rho_m_given: bool = True


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


def _parse_field(source: str, n: int, pointer: str) -> ex.Expression:
    try:
        return ex.parse(source, n)
    except ExpressionSyntaxError as err:
        raise ConfigError(str(err), pointer) from err


def load_config(path) -> RunConfig:
    """Read, schema-check and build a run configuration from a JSON file."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err}") from err
    return config_from_dict(doc, base=Path(path).parent)


def config_from_dict(doc: dict, base: Path | None = None) -> RunConfig:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "required":
            m = re.match(r"'([^']+)' is a required property", err.message)
            if m:
                path.append(m.group(1))
        raise ConfigError(err.message, _pointer(path))

    pd = doc["problem"]
    n = pd["dimension"]
    if len(pd["box"]) != n:
        raise ConfigError("box needs one interval per axis", "/problem/box")
    for k, (lo, hi) in enumerate(pd["box"]):
        if not hi > lo:
            raise ConfigError("box interval must satisfy hi > lo", f"/problem/box/{k}")
    A = pd["A"]
    if isinstance(A, str):
        if n != 1:
            raise ConfigError("A must be an n x n array of expressions", "/problem/A")
        A = [[A]]
    if len(A) != n or any(len(row) != n for row in A):
        raise ConfigError("A must be an n x n array of expressions", "/problem/A")
    V = [pd["V"]] if isinstance(pd["V"], str) else pd["V"]
    if len(V) != n:
        raise ConfigError("V needs one expression per axis", "/problem/V")
    A_e = tuple(tuple(_parse_field(a, n, f"/problem/A/{i}/{j}") for j, a in enumerate(row)) for i, row in enumerate(A))
    V_e = tuple(_parse_field(v, n, f"/problem/V/{i}") for i, v in enumerate(V))
    dens = _parse_field(pd["exact_density"], n, "/problem/exact_density") if "exact_density" in pd else None
    boundary = pd.get("boundary", "reflecting")
    boundary = [boundary] * n if isinstance(boundary, str) else boundary
    if len(boundary) != n:
        raise ConfigError("boundary needs one kind per axis", "/problem/boundary")
    problem = ProblemSpec(n, tuple((float(lo), float(hi)) for lo, hi in pd["box"]), A_e, V_e, tuple(boundary), dens,
                          pd.get("sobolev_p"))

    checks = []
    for k, c in enumerate(doc.get("checks", [])):
        rho = c.get("rho")
        checks.append(Check(c["type"], f"/checks/{k}", c.get("rho_0"),
                            None if rho is None else [float(r) for r in np.atleast_1d(rho)],
                            c.get("rho_cap"), c.get("gamma"), c.get("tolerance")))

    cd = doc["compact_function"]
    needs_rho_m = any(c.type in BOUND_CHECKS for c in checks)
    if needs_rho_m and "rho_m" not in cd:
        raise ConfigError("rho_m is required by the requested bound checks", "/compact_function/rho_m")
    U = _parse_field(cd["U"], n, "/compact_function/U")
    try:
        compact = CompactFunction.build(U, n, cd.get("rho_m", 0.0), cd.get("rho_M"))
    except ValueError as err:
        raise ConfigError(str(err), "/compact_function/U" if "C²" in str(err) else "/compact_function") from err

    for c in checks:
        if c.type in ("Aa", "Ac", "Ba", "Bb") and c.rho_0 is None:
            raise ConfigError(f"check {c.type} needs rho_0", f"{c.pointer}/rho_0")
        if c.rho_0 is not None and c.type in BOUND_CHECKS and not c.rho_0 > compact.rho_m:
            raise ConfigError("rho_0 must exceed rho_m", f"{c.pointer}/rho_0")

    counts = doc["grid"]["N"]
    counts = [counts] * n if isinstance(counts, int) else counts
    if len(counts) != n:
        raise ConfigError("grid needs one node count per axis", "/grid/N")

    levels = None
    if "levels" in doc:
        lv = doc["levels"]
        if any(c.type == "derivative" for c in checks) and lv["count"] < 3:
            raise ConfigError("derivative checks need at least 3 levels", "/levels/count")
        if not lv["rho_max"] > lv["rho_min"] and lv["count"] > 1:
            raise ConfigError("rho_max must exceed rho_min", "/levels/rho_max")
        try:
            levels = level_grid(lv["rho_min"], lv["rho_max"], lv["count"], lv.get("spacing", "linear"))
        except ValueError as err:
            raise ConfigError(str(err), "/levels") from err
    elif any(CHECK_STAGE[c.type] != "identity" for c in checks):
        if any(c.type == "derivative" or (c.type in ("Ab", "Ba", "Bb") and c.rho is None) for c in checks):
            raise ConfigError("'levels' is a required property for the requested checks", "/levels")

    source = doc.get("density", {}).get("source", "solve")
    if source == "exact" and dens is None:
        raise ConfigError("density source 'exact' needs problem.exact_density", "/density/source")
    tol = doc.get("tolerances", {})
    out = doc.get("output", {})
    out_dir = Path(out.get("directory", "out"))
    if base is not None and not out_dir.is_absolute() and "directory" in out:
        out_dir = base / out_dir
    return RunConfig(problem, compact, [int(c) for c in counts], source, levels, checks,
                     float(tol.get("eps_disc", 1e-2)), float(tol.get("regular_tol", 1e-6)),
                     float(tol.get("identity", 2e-3)), float(tol.get("derivative", 2e-2)),
                     out_dir, tuple(out.get("formats", ["csv", "json"])), "rho_m" in cd)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class RunResult:
    exit_code: int
    summary: dict
    files: list[Path] = field(default_factory=list)


def _clean(v):
    if isinstance(v, float):
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2) + "\n")


class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def _level_set(cfg: RunConfig) -> np.ndarray:
    extra = [cfg.compact.rho_m] if cfg.compact.rho_m > 0 else []
    for c in cfg.checks:
        if c.rho_0 is not None:
            extra.append(c.rho_0)
        if c.rho:
            extra.extend(c.rho)
    base = cfg.levels if cfg.levels is not None else np.zeros(0)
    return np.unique(np.concatenate([base, np.asarray(extra, dtype=float)]))


def _bound_reports(cfg: RunConfig, profile: LevelProfile, cls: LyapunovClassification, warnings: list[str]):
    reports: list[BoundReport] = []
    rho_m = cfg.compact.rho_m
    top = float(profile.rho[-1])
    for c in cfg.checks:
        if c.type not in BOUND_CHECKS:
            continue
        if cls.kind not in REQUIRED_KIND[c.type]:
            raise ClassificationMismatch(
                f"classification mismatch: check {c.type} needs {' or '.join(REQUIRED_KIND[c.type])}, "
                f"U classified as {cls.kind}")
        gamma = c.gamma if c.gamma is not None else cls.gamma
        if c.gamma is not None and cls.gamma > 0 and c.gamma > cls.gamma * (1 + 1e-9):
            warnings.append(f"{c.type}: gamma override {c.gamma:g} exceeds the sampled constant {cls.gamma:g}")
        eps = cfg.eps_disc
        if c.type == "Aa":
            reports.append(bound_Aa(profile, gamma, rho_m, c.rho_0, eps))
        elif c.type == "Ab":
            rhos = c.rho or [float(r) for r in profile.rho if r > rho_m]
            reports.extend(bound_Ab(profile, gamma, rho_m, r, eps) for r in rhos)
        elif c.type == "Ac":
            reports.append(bound_Ac(profile, c.rho_0, c.rho_cap if c.rho_cap is not None else top, eps))
        elif c.type == "Ba":
            rhos = c.rho or [float(r) for r in profile.rho if r >= c.rho_0]
            reports.extend(bound_Ba(profile, gamma, rho_m, c.rho_0, r, eps) for r in rhos)
        else:
            rhos = c.rho or [float(r) for r in profile.rho if r >= c.rho_0]
            reports.extend(bound_Bb(profile, rho_m, c.rho_0, r, eps) for r in rhos)
    return reports


def _density(cfg: RunConfig, grid: Grid, density_path) -> DensityGrid:
    if density_path is not None:
        return read_density_csv(density_path, grid).normalized()
    if cfg.density_source == "exact":
        return analytic_density(cfg.problem, grid)
    return solve_stationary(cfg.problem, grid)


def run(cfg: RunConfig, command: str = "all", threads: int | None = None, density_path=None) -> RunResult:
    """Execute the pipeline up to ``command`` and write the report files."""
    stage = len(STAGES) if command == "all" else STAGES.index(command) + 1
    active = set(STAGES[:stage])
    checks = [c for c in cfg.checks if CHECK_STAGE[c.type] in active]
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    csv_out = "csv" in cfg.formats
    json_out = "json" in cfg.formats
    files: list[Path] = []
    collector = _Collector()
    root = logging.getLogger("fpmeasure")
    root.addHandler(collector)
    summary: dict = {"command": command, "checks_run": 0, "checks_satisfied": 0, "max_identity_residual": None,
                     "warnings": []}
    other: list[dict] = []
    failed = False
    try:
        p, cf = cfg.problem, cfg.compact
        grid = Grid.for_problem(p, cfg.counts)
        try:
            d = _density(cfg, grid, density_path)
        except (SolverError, FPMeasureError, ValueError) as err:
            raise _Abort(EXIT_SOLVER, "solver", str(err)) from err
        summary["density"] = {"source": "file" if density_path else cfg.density_source, **d.diagnostics}
        if d.diagnostics.get("boundary_mass", 0.0) > 1e-6:
            summary["warnings"].append(
                f"density mass near the box boundary {d.diagnostics['boundary_mass']:.3e} exceeds 1e-6")
        if csv_out:
            files.append(out / "density.csv")
            write_density_csv(d, files[-1])
        if json_out:
            files.append(out / "density.json")
            mesh = d.grid.mesh()
            _write_json(files[-1], {"header": [f"x{k + 1}" for k in range(grid.n)] + ["u"],
                                    "rows": [[float(m[i]) for m in mesh] + [float(d.values[i])]
                                             for i in np.ndindex(*grid.shape)]})
        if stage == 1:
            return _finish(summary, other, files, out, failed, collector)

        try:
            ok, msg = cf.check_compactness(grid.mesh(), grid.outer_mask())
            if not ok:
                summary["warnings"].append(f"compactness proxy failed: {msg}")
            levels = _level_set(cfg)
            if levels.size == 0:
                raise _Abort(EXIT_CONFIG, "config", "no levels to profile", "/levels")
            requested = cfg.levels if cfg.levels is not None else levels
            profile = build_profile(d, cf, requested, p, cfg.regular_tol, threads, extra=levels)
            summary["warnings"].extend(profile.notes)
            summary["rho_M"] = default_rho_M(cf, grid.mesh()) if math.isinf(cf.rho_M) else cf.rho_M
            if csv_out:
                files.append(out / "profile.csv")
                write_profile_csv(profile, files[-1])
            if json_out:
                files.append(out / "profile.json")
                _write_json(files[-1], {"header": PROFILE_HEADER, "rows": [
                    [float(v) if k < 7 else v == "true" for k, v in enumerate(row)] for row in profile_rows(profile)]})
            for c in checks:
                if c.type == "derivative":
                    gap = derivative_check(profile)
                    tol = c.tolerance or cfg.derivative_tol
                    other.append({"type": "derivative", "value": gap, "tolerance": tol, "passed": gap <= tol})

            if "identity" in active and any(c.type == "identity" for c in checks):
                lv = cfg.levels if cfg.levels is not None else levels
                reports = identity_sweep(d, cf, p, IdentityMap(), lv, cfg.regular_tol, threads)
                done = [r.rel_residual for r in reports if not r.skipped]
                worst = max(done) if done else math.nan
                summary["max_identity_residual"] = worst
                for c in checks:
                    if c.type == "identity":
                        tol = c.tolerance or cfg.identity_tol
                        other.append({"type": "identity", "value": worst, "tolerance": tol,
                                      "passed": bool(done) and worst <= tol})
                if csv_out:
                    files.append(out / "identity.csv")
                    write_identity_csv(reports, files[-1])
                if json_out:
                    files.append(out / "identity.json")
                    write_identity_json(reports, files[-1])

            bounds: list[BoundReport] = []
            if "bounds" in active and any(c.type in BOUND_CHECKS for c in checks):
                coarse, fine = classify_refined(p, cf, max(cfg.counts))
                summary["classification"] = {"kind": coarse.kind, "gamma": coarse.gamma,
                                             "witness": list(coarse.witness), "sup_LU": coarse.sup_LU,
                                             "inf_LU": coarse.inf_LU, "refined_kind": fine.kind,
                                             "refined_gamma": fine.gamma}
                if fine.kind != coarse.kind:
                    summary["warnings"].append(f"classification changes under refinement ({coarse.kind} -> {fine.kind})")
                sub = RunConfig(**{**cfg.__dict__, "checks": checks})
                bounds = _bound_reports(sub, profile, coarse, summary["warnings"])
                if csv_out:
                    files.append(out / "bounds.csv")
                    write_bounds_csv(bounds, files[-1])
                if json_out:
                    files.append(out / "bounds.json")
                    write_bounds_json(bounds, files[-1])
            summary["checks_run"] = len(bounds)
            summary["checks_satisfied"] = sum(1 for b in bounds if b.satisfied)
            if bounds:
                summary["bounds"] = bounds_to_json(bounds)
            failed = summary["checks_satisfied"] < summary["checks_run"] or not all(o["passed"] for o in other)
            return _finish(summary, other, files, out, failed, collector)
        except ClassificationMismatch as err:
            raise _Abort(EXIT_CHECK, "classification mismatch", str(err)) from err
        except _Abort:
            raise
        except FPMeasureError as err:
            raise _Abort(EXIT_CHECK, type(err).__name__, str(err)) from err
    except _Abort as abort:
        summary["error"] = {"kind": abort.kind, "message": abort.message, **({"pointer": abort.pointer}
                                                                           if abort.pointer else {})}
        summary["status"] = "error"
        summary["exit_code"] = abort.code
        summary["other_checks"] = other
        summary["warnings"] = _dedupe(summary["warnings"] + collector.messages)
        files.append(out / "summary.json")
        _write_json(files[-1], summary)
        return RunResult(abort.code, summary, files)
    finally:
        root.removeHandler(collector)


def _dedupe(items):
    seen, out = set(), []
    for s in items:
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


class _Abort(Exception):
    def __init__(self, code: int, kind: str, message: str, pointer: str = ""):
        super().__init__(message)
        self.code, self.kind, self.message, self.pointer = code, kind, message, pointer


def _finish(summary, other, files, out, failed, collector) -> RunResult:
    summary["other_checks"] = other
    summary["warnings"] = _dedupe(summary["warnings"] + collector.messages)
    summary["status"] = "check_failure" if failed else "ok"
    summary["exit_code"] = EXIT_CHECK if failed else EXIT_OK
    files.append(out / "summary.json")
    _write_json(files[-1], summary)
    return RunResult(summary["exit_code"], summary, files)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpmeasure", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        sp = sub.add_parser(name, help=f"run the pipeline up to '{name}'" if name != "all" else "run every stage")
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        sp.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
        sp.add_argument("--format", help="comma separated subset of csv,json")
        sp.add_argument("--density", help="precomputed density CSV to use instead of solving")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.out_dir = Path(args.out)
        if args.format:
            fmts = tuple(f.strip() for f in args.format.split(",") if f.strip())
            if not fmts or any(f not in ("csv", "json") for f in fmts):
                raise ConfigError("--format must be a comma separated subset of csv,json")
            cfg.formats = fmts
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads or os.cpu_count() or 1
    result = run(cfg, args.command, threads, args.density)
    s = result.summary
    if "error" in s:
        print(f"error: {s['error']['message']}", file=sys.stderr)
    else:
        print(f"{s['status']}: {s['checks_satisfied']}/{s['checks_run']} bound checks satisfied; "
              f"reports in {cfg.out_dir}")
    return result.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
