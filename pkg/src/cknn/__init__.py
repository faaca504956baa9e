"""Calibrated k-nearest-neighbour hybrid small-area estimation.

A big data source covers part of a population; a probability sample
covers all of it. This package imputes the missed stratum by kNN over the
sampled donors the big data missed (Hassanat distance on categorical
features), calibrates the imputed mass to a design-unbiased national
total with closed-form chi-square-minimal rank weights, and reports
per-area totals with bootstrap variance, leave-one-out bias, and normal
intervals. A Fay-Herriot EBLUP baseline and a synthetic-population Monte
Carlo lab round out the toolkit.
"""

from __future__ import annotations

__version__ = "1.0.0"

from .calibration import (
    CalibrationDiagnostics,
    CalibrationResult,
    HybridEstimate,
    IntegratorEstimate,
    calibrate_imputation,
    calibration_weights,
    data_integrator,
    hybrid_estimate,
    small_area_totals,
)
from .errors import (
    AlignmentError,
    CapacityError,
    CknnError,
    CollinearityError,
    ConvergenceError,
    DegenerateDesignError,
    DomainError,
    SchemaError,
    SpecError,
    ValidationError,
)
from .fh import (
    FhInputs,
    FhModel,
    FhPrediction,
    direct_estimates,
    fh_predict_mse,
    fit_fh,
)
from .frame import (
    AreaSlice,
    PopulationFrame,
    UnitRecord,
    load_frame,
    partition_by_area,
    save_frame,
)
from .hasd import FeatureMask, hasd_component, hasd_distance, pairwise_hasd
from .imputer import (
    DonorUsage,
    ImputationResult,
    NeighborSet,
    find_neighbors,
    impute_all,
    loo_impute,
    rank_totals,
)
from .simlab import (
    EfficiencyDiagnostics,
    PopulationSpec,
    Scenario,
    SimulationConfig,
    apply_undercoverage,
    compute_efficiency,
    draw_srs,
    parse_scenario,
    realize_scenario,
    reference_scenario,
    reference_spec,
    run_monte_carlo,
    select_big_data,
    synthesize_population,
    write_scenario,
)
from .tuning import (
    FoldAssignment,
    GridPoint,
    GridSearchResult,
    all_feature_subsets,
    assign_folds,
    cv_objective,
    grid_search,
)
from .uncertainty import (
    BiasEstimate,
    BootstrapEstimate,
    PseudoValueSet,
    SmallAreaReport,
    assemble_report,
    bootstrap_size,
    estimate_bias,
    fixed_k_bootstrap,
    pseudo_values,
)

__all__ = [
    "__version__",
    # frame
    "PopulationFrame",
    "UnitRecord",
    "AreaSlice",
    "load_frame",
    "save_frame",
    "partition_by_area",
    # distance
    "FeatureMask",
    "hasd_component",
    "hasd_distance",
    "pairwise_hasd",
    # imputation
    "NeighborSet",
    "DonorUsage",
    "ImputationResult",
    "find_neighbors",
    "impute_all",
    "loo_impute",
    "rank_totals",
    # calibration
    "IntegratorEstimate",
    "CalibrationDiagnostics",
    "CalibrationResult",
    "HybridEstimate",
    "data_integrator",
    "calibration_weights",
    "small_area_totals",
    "calibrate_imputation",
    "hybrid_estimate",
    # tuning
    "FoldAssignment",
    "GridPoint",
    "GridSearchResult",
    "assign_folds",
    "cv_objective",
    "grid_search",
    "all_feature_subsets",
    # uncertainty
    "PseudoValueSet",
    "BootstrapEstimate",
    "BiasEstimate",
    "SmallAreaReport",
    "pseudo_values",
    "fixed_k_bootstrap",
    "bootstrap_size",
    "estimate_bias",
    "assemble_report",
    # fh
    "FhInputs",
    "FhModel",
    "FhPrediction",
    "direct_estimates",
    "fit_fh",
    "fh_predict_mse",
    # simlab
    "PopulationSpec",
    "SimulationConfig",
    "Scenario",
    "EfficiencyDiagnostics",
    "synthesize_population",
    "select_big_data",
    "draw_srs",
    "apply_undercoverage",
    "compute_efficiency",
    "run_monte_carlo",
    "realize_scenario",
    "reference_spec",
    "reference_scenario",
    "parse_scenario",
    "write_scenario",
    # errors
    "CknnError",
    "SchemaError",
    "ValidationError",
    "DomainError",
    "CapacityError",
    "DegenerateDesignError",
    "CollinearityError",
    "ConvergenceError",
    "AlignmentError",
    "SpecError",
]
