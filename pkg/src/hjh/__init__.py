"""Numerical workbench for higher-order periodic homogenization of viscous
Hamilton-Jacobi equations: cell problems, the effective Hamiltonian and its
linearization, corrector hierarchies, two-scale expansions, a fine-grid
reference solver, and a convergence-study harness."""

from .problem import (Diffusion, InitialData, ProblemBounds, ProblemSpec,
                      SeparableQuadratic, AnisotropicQuadratic, TrigSeries,
                      default_bounds, load_problem, save_problem,
                      validate_initial_data, validate_problem)
from .cell import (CellSolution, EffectiveTable, LinearCellOperator, TorusGrid,
                   effective_table, hbar_via_eigenvalue, solve_cell,
                   solve_cell_discounted)
from .effective import (CharacteristicFan, eval_u0, fan_invariants,
                        invert_characteristics, solve_effective)
from .correctors import Hierarchy, SlowGrid, build_hierarchy
from .reference import (FineGrid1D, ReferenceSolution, compare_expansion,
                        reference_margin, solve_reference, speed_bound)
from .harness import (StudyConfig, StudyError, StudyReport, emit_report,
                      fit_rates, run_study)
from .serialize import (load_hierarchy, load_reference, load_table,
                        save_hierarchy, save_reference, save_table)

__version__ = "0.1.0"
