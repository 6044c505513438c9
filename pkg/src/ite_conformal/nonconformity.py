"""Nonconformity measures and the procedures that fit them.

A fitted measure maps (x, y, t) to a score >= 0; small scores conform. Both
measures here are residual shaped,

    score(x, y, t) = |y - center(x, t)| / scale(x, t),

which makes them convex in y with minimum at the fitted value, and gives
calibration intervals the closed form center +- q * scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import Dataset
from .predictors import (
    RegressionFn,
    TrainConfig,
    VarianceFn,
    fit_kernel,
    fit_nn,
    fit_ols_interaction,
    fit_variance_estimator,
    ols_augmented_affine,
)

__all__ = [
    "ConformalProcedure",
    "NonconformityMeasure",
    "abs_residual_measure",
    "std_residual_measure",
    "kernel_procedure",
    "nn_procedure",
    "ols_procedure",
    "residual_procedure",
]


@dataclass(frozen=True)
class NonconformityMeasure:
    """A fitted score function (x, y, t) -> |y - f(x,t)| / scale(x,t)."""

    kind: str  # "abs" | "std"
    regression: RegressionFn
    variance: Optional[VarianceFn] = None

    def __post_init__(self) -> None:
        if self.kind not in ("abs", "std"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.kind == "std" and self.variance is None:
            raise ValueError("standardized measure needs a variance estimate")

    def center(self, x: np.ndarray, t: int) -> float:
        return self.regression(x, t)

    def scale(self, x: np.ndarray, t: int) -> float:
        if self.kind == "abs":
            return 1.0
        return float(np.sqrt(self.variance(x, t)))

    def score(self, x: np.ndarray, y: float, t: int) -> float:
        return abs(float(y) - self.center(x, t)) / self.scale(x, t)

    def score_batch(self, x: np.ndarray, y: np.ndarray, t: np.ndarray) -> np.ndarray:
        resid = np.abs(np.asarray(y, dtype=float) - self.regression.predict(x, t))
        if self.kind == "abs":
            return resid
        return resid / np.sqrt(self.variance.predict(x, t))


def abs_residual_measure(f: RegressionFn) -> NonconformityMeasure:
    """Absolute residual |y - f(x,t)|."""
    return NonconformityMeasure("abs", f)


def std_residual_measure(f: RegressionFn, v: VarianceFn) -> NonconformityMeasure:
    """Standardized residual |y - f(x,t)| / sigma(x,t)."""
    return NonconformityMeasure("std", f, v)


@dataclass(frozen=True)
class ConformalProcedure:
    """Fits a nonconformity measure from a dataset.

    ``affine_abs_residuals``, when present, returns coefficient arrays
    (a, b) such that refitting on the dataset augmented with (x, y, t)
    gives residuals a + b * y (candidate last). Only valid for absolute
    residuals of fitters whose predictions are linear in the outcomes; it
    lets the full conformal construction skip the per-candidate refits.
    """

    name: str
    fit: Callable[[Dataset], NonconformityMeasure]
    affine_abs_residuals: Optional[
        Callable[[Dataset, np.ndarray, int], tuple[np.ndarray, np.ndarray]]
    ] = None


def residual_procedure(
    fit_regression: Callable[[Dataset], RegressionFn],
    kind: str = "abs",
    variance_bandwidth: float | None = None,
    name: str = "custom",
) -> ConformalProcedure:
    """Wrap a regression fitter into a conformal procedure.

    ``kind="std"`` additionally fits a kernel variance estimator on the
    same data (bandwidth ``variance_bandwidth``, default rule-of-thumb).
    """

    def fit(ds: Dataset) -> NonconformityMeasure:
        f = fit_regression(ds)
        if kind == "abs":
            return abs_residual_measure(f)
        v = fit_variance_estimator(ds, f, variance_bandwidth)
        return std_residual_measure(f, v)

    return ConformalProcedure(f"{name}_{kind}", fit)


def ols_procedure(kind: str = "abs", variance_bandwidth: float | None = None) -> ConformalProcedure:
    """Least squares with interactions; the "abs" variant carries the
    affine shortcut used by the full conformal construction."""
    proc = residual_procedure(fit_ols_interaction, kind, variance_bandwidth, name="ols")
    if kind == "abs":
        return ConformalProcedure(proc.name, proc.fit, ols_augmented_affine)
    return proc


def kernel_procedure(
    bandwidth: float | None = None,
    kind: str = "abs",
    variance_bandwidth: float | None = None,
) -> ConformalProcedure:
    return residual_procedure(
        lambda ds: fit_kernel(ds, bandwidth), kind, variance_bandwidth, name="kernel"
    )


def nn_procedure(
    hidden: int = 10,
    cfg: TrainConfig = TrainConfig(),
    kind: str = "abs",
    variance_bandwidth: float | None = None,
) -> ConformalProcedure:
    return residual_procedure(
        lambda ds: fit_nn(ds, hidden, cfg), kind, variance_bandwidth, name="nn"
    )
