"""Continuous-time longitudinal item response theory.

Fits a latent-process linear mixed model linked to repeated ordinal item
responses through a graded-response probit measurement model, with
individual-specific observation times; provides item curves, Fisher
information, measurement-invariance tests and predicted trajectories.
"""

from ._kernels import available_backends, backend_name
from .dataset import (
    ColumnSchema,
    ItemDef,
    LongDataset,
    Observation,
    RowError,
    SchemaError,
    ValidationReport,
    load_long_csv,
    save_long_csv,
    validate,
)
from .inference import (
    InvarianceReport,
    NestingError,
    TestResult,
    invariance_report,
    lrt,
    wald_test,
    wald_test_fit,
)
from .likelihood import (
    LikelihoodEngine,
    NonFiniteObjectiveError,
    PreparedData,
    QmcNodes,
    numeric_gradient_hessian,
    qmc_nodes,
    subject_loglik,
    total_loglik,
)
from .measurement import (
    ItemParams,
    category_information,
    category_prob,
    cum_prob,
    item_expectation,
    item_information,
)
from .optimizer import (
    FitOptions,
    FitResult,
    InitializationError,
    OptimizationFailure,
    convergence_check,
    fit,
    maximize,
    variance_of_estimates,
)
from .parameters import (
    LayoutError,
    NaturalParams,
    ParameterLayout,
    delta_method_se,
    initial_theta,
    pack,
    unpack,
)
from .posterior import (
    PosteriorSummary,
    eb_random_effects,
    individual_trajectory,
    item_trajectory,
    latent_population_interval,
    marginal_trajectory,
)
from .simulate import SimDesign, simulate_dataset, tutorial_design
from .timebasis import (
    ModelSpec,
    SpecificationError,
    TimeBasis,
    basis_matrix,
    design_matrices,
    design_rows,
    ncs_basis,
    tertile_knots,
)

__version__ = "0.1.0"

__all__ = [
    "available_backends",
    "backend_name",
    "ColumnSchema",
    "ItemDef",
    "LongDataset",
    "Observation",
    "RowError",
    "SchemaError",
    "ValidationReport",
    "load_long_csv",
    "save_long_csv",
    "validate",
    "InvarianceReport",
    "NestingError",
    "TestResult",
    "invariance_report",
    "lrt",
    "wald_test",
    "wald_test_fit",
    "LikelihoodEngine",
    "NonFiniteObjectiveError",
    "PreparedData",
    "QmcNodes",
    "numeric_gradient_hessian",
    "qmc_nodes",
    "subject_loglik",
    "total_loglik",
    "ItemParams",
    "category_information",
    "category_prob",
    "cum_prob",
    "item_expectation",
    "item_information",
    "FitOptions",
    "FitResult",
    "InitializationError",
    "OptimizationFailure",
    "convergence_check",
    "fit",
    "maximize",
    "variance_of_estimates",
    "LayoutError",
    "NaturalParams",
    "ParameterLayout",
    "delta_method_se",
    "initial_theta",
    "pack",
    "unpack",
    "PosteriorSummary",
    "eb_random_effects",
    "individual_trajectory",
    "item_trajectory",
    "latent_population_interval",
    "marginal_trajectory",
    "SimDesign",
    "simulate_dataset",
    "tutorial_design",
    "ModelSpec",
    "SpecificationError",
    "TimeBasis",
    "basis_matrix",
    "design_matrices",
    "design_rows",
    "ncs_basis",
    "tertile_knots",
    "__version__",
]
