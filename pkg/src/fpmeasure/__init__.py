"""Stationary Fokker-Planck densities, level-set measures and Lyapunov-type measure bounds."""

from __future__ import annotations

from .bounds import (BoundReport, CutoffFunction, bound_Aa, bound_Ab, bound_Ac, bound_Ba, bound_Bb, build_cutoff)
from .errors import (ClassificationMismatch, ConfigError, EvaluationDomainError, ExpressionSyntaxError, FPMeasureError,
                     IrregularLevelError, NonUniquenessError, PositivityError, PreconditionError, SolverError)
from .expr import differentiate, evaluate, parse, render
from .grid import DensityGrid, Grid
from .levelset import (ContourSet, LevelProfile, build_profile, contour, derivative_check, level_grid,
                       sublevel_measure, superlevel_measure, surface_integral)
from .problem import (CompactFunction, LyapunovClassification, ProblemSpec, classify, classify_refined,
                      generator_apply, quadratic_form)
from .solver import analytic_density, solve_stationary, weak_residual
from .verifier import ConstantMap, IdentityMap, IdentityReport, identity_sweep, verify_identity

__version__ = "0.1.0"
