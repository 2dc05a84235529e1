"""Numerical laboratory for 1-D stochastic degenerate parabolic equations.

Everything runs on a binary filtration tree, so expectations are exact and
the backward solver is the exact adjoint of the forward one; see the module
docstrings for the individual pieces:

  tree      exact probability space (binary increments, martingale split)
  mesh      finite-volume degenerate operator, Hardy check, weighted norms
  weights   cut-offs, admissible exponents, singular/regular weight systems
  solvers   semi-implicit forward solver, exact-adjoint backward solver
  carleman  weighted-inequality reports and parameter sweeps
  control   penalized construction of adapted null controls
  inverse   time-dependent source recovery and stability studies
  cli       experiment runner with CSV/JSON artifacts
"""

from .carleman import (InequalityReport, ObservabilityReport,
                       check_backward_singular, check_cacciopoli,
                       check_convection, check_forward_regular,
                       check_observability, sweep_estimate)
from .control import (ControlPair, HumConfig, HumDiagnostics, decay_study,
                      epsilon_uniformity_study, hum_solve)
from .inverse import (LipschitzReport, Observation, SourceSpec, forward_map,
                      lipschitz_study, reconstruct)
from .mesh import (DegenerateOperator, SpatialMesh, build_mesh, build_operator,
                   hardy_check, weighted_h1_norm)
from .solvers import (EnergyReport, ProblemSpec, Trajectory, duality_residual,
                      energy_report, epsilon_convergence, solve_backward,
                      solve_forward)
from .tree import (AdaptedField, FiltrationTree, TreeDepthError, build_tree,
                   expectation, martingale_decomposition)
from .weights import (ConfigurationError, WeightSystem, beta0, beta_admissible,
                      build_eta2, build_weight_system, xi)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
