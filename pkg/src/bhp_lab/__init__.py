"""bhp-lab: a simulation and verification laboratory for branching
symmetric Hunt processes with additive-functional branching clocks."""

__version__ = "0.1.0"

from .model import (
    BINARY_LAW,
    BranchingRate,
    IntervalMotion,
    ModelSpec,
    OffspringLaw,
    OuMotion,
    SpectralTriple,
    catalog_interval,
    catalog_ou,
    mean_offspring,
    size_biased,
    validate_offspring,
)
from .forest import Forest, Snapshot, martingale_value, simulate_forest, snapshot, weigh
from .spine import (
    SpineTree,
    WeightLedger,
    fission_count_given_path,
    importance_estimate,
    simulate_spine_tree,
    spine_decomposition,
)
from .spectral import (
    check_condition_AIU,
    check_condition_W,
    check_poincare,
    discretize,
    kernel_table,
    llogl_value,
    lowest_two_eigenpairs,
    make_grid,
    many_to_one_quadrature,
    solve_model_spectrum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
