"""Mean-field control with absorption at the boundary, at desk scale.

The package solves the coupled N-particle HJB hierarchy whose levels meet
on boundary faces, the limiting control problem over sub-probability
measures, and the boundary-aware transport metric relating the two, all on
the 1D domain (0,1).
"""

from .barrier import BarrierPair, build_barrier, differential_residuals, verify_sandwich
from .errors import (
    BarrierConstructionError,
    CFLError,
    MemoryGuardError,
    SchemeFailureError,
    SolverDivergenceError,
)
from .fp import DriftField, FPPath, l2_energy_residual, solve_backward_transport, solve_fp
from .geometry import (
    EmpiricalConfig,
    GridDensity,
    SpaceGrid,
    TimeGrid,
    dist_boundary,
    rho,
)
from .harness import (
    ConvergenceReport,
    ExperimentConfig,
    load_config,
    run_convergence,
    run_estimate_tables,
)
from .hierarchy import (
    HierarchySolution,
    check_crude_bound,
    check_gradient_scaling,
    eval_value,
    monte_carlo_value,
    read_level_dump,
    solve_hierarchy,
    write_level_dump,
)
from .metric import (
    compare_metrics,
    embed_empirical,
    matching_oracle,
    metric_d_fast,
    metric_d_lp,
    metric_d_rho_empirical,
    mollify_empirical,
    projected_l2_derivatives,
)
from .mfc import (
    MFCSolution,
    dpp_residual,
    evaluate_cost,
    regularity_modulus,
    solve_hjb_backward,
    solve_mfc,
    truncation_gap,
)
from .model import (
    ModelSpec,
    eval_cost_functionals,
    hamiltonian,
    optimal_feedback,
    quadratic_model,
    truncated_hamiltonian,
    zero_cost_model,
)

__version__ = "0.1.0"
