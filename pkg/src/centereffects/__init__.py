"""Center-specific treatment effects from multicenter randomized trials.

Estimates the average treatment effect in the population underlying each
center of a multicenter trial, with influence-curve and bootstrap inference,
assumption diagnostics, and a full Monte Carlo evaluation harness.
"""
from .dataset import (
    CellCounts,
    TrialDataset,
    cell_counts,
    from_arrays,
    load_csv,
    save_csv,
    validate_positivity,
)
from .errors import (
    AliasedColumnsWarning,
    BootstrapError,
    CenterEffectsError,
    ComparatorError,
    ConfigError,
    ConvergenceWarning,
    DataError,
    DegenerateFitError,
    DivisionError,
    EmptyFitError,
    EmptyInputError,
    InsufficientDataError,
    MissingDataError,
    NoDonorError,
    NumericalError,
    ParameterError,
    ParseError,
    PositivityError,
    SaturatedModelError,
    SchemaError,
    SeparationWarning,
    ShapeError,
    SpecError,
    StudyError,
    TestError,
    UsageError,
)
from .estimators import (
    EstimateRecord,
    FittedNuisances,
    FixedNuisances,
    KnownProbabilities,
    NuisanceConfig,
    estimate_chi,
    estimate_comparators,
    estimate_contrast,
    estimate_phi,
    estimate_psi,
    estimate_tau,
    fit_nuisances,
    with_interval_fields,
)
from .inference import (
    EstimandSpec,
    IntervalEstimate,
    TestResult,
    add_interval,
    ancova_center_outcome_test,
    bootstrap_se,
    default_assumption_specs,
    evaluate_estimand,
    homogeneity_test,
    normal_quantile,
    se_from_influence,
    wald_ci,
)
from .nuisance import (
    DesignSpec,
    LinearFit,
    LogisticFit,
    MultinomialFit,
    Term,
    build_design,
    fit_logistic,
    fit_multinomial,
    fit_ols,
    main_effects,
    parse_term,
    predict,
    reference_softmax,
)
from .simulation import (
    OracleReport,
    Scenario,
    StudyReport,
    default_nuisance_configs,
    generate_dataset,
    run_study,
    true_center_ate,
    true_center_ates,
    true_center_ates_quadrature,
)

__version__ = "1.0.0"

__all__ = [
    "AliasedColumnsWarning",
    "BootstrapError",
    "CellCounts",
    "CenterEffectsError",
    "ComparatorError",
    "ConfigError",
    "ConvergenceWarning",
    "DataError",
    "DegenerateFitError",
    "DesignSpec",
    "DivisionError",
    "EmptyFitError",
    "EmptyInputError",
    "EstimandSpec",
    "EstimateRecord",
    "FittedNuisances",
    "FixedNuisances",
    "InsufficientDataError",
    "IntervalEstimate",
    "KnownProbabilities",
    "LinearFit",
    "LogisticFit",
    "MissingDataError",
    "MultinomialFit",
    "NoDonorError",
    "NuisanceConfig",
    "NumericalError",
    "OracleReport",
    "ParameterError",
    "ParseError",
    "PositivityError",
    "SaturatedModelError",
    "Scenario",
    "SchemaError",
    "SeparationWarning",
    "ShapeError",
    "SpecError",
    "StudyError",
    "StudyReport",
    "Term",
    "TestResult",
    "TrialDataset",
    "UsageError",
    "add_interval",
    "ancova_center_outcome_test",
    "bootstrap_se",
    "build_design",
    "cell_counts",
    "default_assumption_specs",
    "default_nuisance_configs",
    "estimate_chi",
    "estimate_comparators",
    "estimate_contrast",
    "estimate_phi",
    "estimate_psi",
    "estimate_tau",
    "evaluate_estimand",
    "fit_logistic",
    "fit_multinomial",
    "fit_nuisances",
    "fit_ols",
    "from_arrays",
    "generate_dataset",
    "homogeneity_test",
    "load_csv",
    "main_effects",
    "normal_quantile",
    "parse_term",
    "predict",
    "reference_softmax",
    "run_study",
    "save_csv",
    "se_from_influence",
    "true_center_ate",
    "true_center_ates",
    "true_center_ates_quadrature",
    "validate_positivity",
    "wald_ci",
    "with_interval_fields",
]
