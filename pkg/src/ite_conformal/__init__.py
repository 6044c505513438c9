"""Conformal prediction intervals for individual treatment effects.

Build arm-conditional conformal prediction intervals for an outcome (full
grid-refit or split calibration), then combine the two arms into an
interval for the treatment-minus-control effect of a new subject. A Monte
Carlo harness reproduces the accompanying coverage and length study.
"""

from .core import (
    ARMS,
    ArmIntervalPair,
    CsvFormatError,
    Dataset,
    ExtInterval,
    Observation,
    TreatmentArm,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .predictors import (
    RegressionFn,
    TrainConfig,
    VarianceFn,
    fit_kernel,
    fit_nn,
    fit_ols_interaction,
    fit_variance_estimator,
)
from .nonconformity import (
    ConformalProcedure,
    NonconformityMeasure,
    abs_residual_measure,
    kernel_procedure,
    nn_procedure,
    ols_procedure,
    std_residual_measure,
)
from .conformal import (
    ConformalSetResult,
    GridSpec,
    SplitCalibration,
    conformal_rank,
    coverage_upper_bound,
    full_conformal_set,
    split_calibration,
    split_conformal_interval,
)
from .ite import (
    CombineRule,
    CoverViolation,
    IteInterval,
    IteMethod,
    PipelineConfig,
    arm_level,
    combine_difference,
    combine_pair,
    ite_interval,
    shrink_toward_center,
    split_point,
)
from .sim import (
    ErrorDist,
    Method,
    Regression,
    Scenario,
    SimOptions,
    SimResult,
    gen_covariates,
    oracle_interval,
    regression_value,
    run_experiment,
    run_replication,
    sample_error,
)

__version__ = "0.1.0"

__all__ = [
    "ARMS",
    "ArmIntervalPair",
    "CombineRule",
    "ConformalProcedure",
    "ConformalSetResult",
    "CoverViolation",
    "CsvFormatError",
    "Dataset",
    "ErrorDist",
    "ExtInterval",
    "GridSpec",
    "IteInterval",
    "IteMethod",
    "Method",
    "NonconformityMeasure",
    "Observation",
    "PipelineConfig",
    "Regression",
    "RegressionFn",
    "Scenario",
    "SimOptions",
    "SimResult",
    "SplitCalibration",
    "TrainConfig",
    "TreatmentArm",
    "VarianceFn",
    "abs_residual_measure",
    "arm_level",
    "combine_difference",
    "combine_pair",
    "conformal_rank",
    "coverage_upper_bound",
    "fit_kernel",
    "fit_nn",
    "fit_ols_interaction",
    "fit_variance_estimator",
    "full_conformal_set",
    "gen_covariates",
    "ite_interval",
    "kernel_procedure",
    "nn_procedure",
    "ols_procedure",
    "oracle_interval",
    "read_dataset_csv",
    "regression_value",
    "run_experiment",
    "run_replication",
    "sample_error",
    "shrink_toward_center",
    "split_calibration",
    "split_conformal_interval",
    "split_point",
    "std_residual_measure",
    "validate_dataset",
    "write_dataset_csv",
]
