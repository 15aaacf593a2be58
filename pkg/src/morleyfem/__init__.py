"""Adaptive Morley finite elements for the clamped Kirchhoff plate."""

from .adapt import (AdaptiveHistory, MarkingConfig, anfem, doerfler_mark,
                    marked_vs_refined_check, uniform_run)
from .bench import (ProblemSpec, RateReport, problem_lshape,
                    problem_square_smooth, rate_fit, reference_solution)
from .element import (MorleyFunction, PiecewiseQuadratic,
                      interpolate_canonical, kernel_check,
                      local_shape_functions, prolong_by_averaging,
                      restrict_to_coarse)
from .estimator import (IndicatorField, eta_tilde, eta_total, indicators,
                        oscillation, residual)
from .mesh import (MeshError, Triangulation, build_initial, load_mesh,
                   nvb_min_angle_bound, unit_square_mesh)
from .system import (DiscreteSystem, PlateMaterial, SolverError, assemble,
                     biharmonic_material, default_material, energy_error,
                     energy_norm, local_stiffness, solve)

__version__ = "0.1.0"
