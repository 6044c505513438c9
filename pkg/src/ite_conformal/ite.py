"""Combining per-arm outcome intervals into treatment-effect intervals.

The effect of switching a subject from control to treatment is bracketed by
differencing a treated-arm interval and a control-arm interval. The three
rules differ in the per-arm level they require and in an optional
sqrt(2) shrinkage toward the fitted values:

============  ==================  ===========================================
rule token    per-arm level       assumption bought
============  ==================  ===========================================
``th1``       1 - alpha/2         none beyond i.i.d. sampling
``th1b``      sqrt(1 - alpha)     arm errors conditionally independent
``th2``       1 - alpha           consistent fit, equal-variance Gaussian
                                  errors, non-negative correlation; arms are
                                  shrunk by sqrt(2) around the fitted value
``th2neg``    1 - alpha           as ``th2`` with negatively correlated
                                  errors; no shrinkage
============  ==================  ===========================================

The ``th2`` rules require each arm interval to contain its fitted value;
that is checked, not assumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .core import ArmIntervalPair, Dataset, ExtInterval
from .conformal import (
    ConformalSetResult,
    GridSpec,
    full_conformal_set,
    split_calibration,
)
from .nonconformity import (
    ConformalProcedure,
    kernel_procedure,
    nn_procedure,
    ols_procedure,
)
from .predictors import TrainConfig

__all__ = [
    "CombineRule",
    "CoverViolation",
    "IteInterval",
    "IteMethod",
    "PipelineConfig",
    "arm_level",
    "combine_difference",
    "combine_pair",
    "ite_interval",
    "make_procedure",
    "shrink_toward_center",
    "split_point",
]

SQRT2 = math.sqrt(2.0)


class CombineRule(Enum):
    """How two per-arm intervals become one effect interval."""

    BONFERRONI = "th1"
    PRODUCT = "th1b"
    SHRINK = "th2"
    SHRINK_NEG = "th2neg"

    @classmethod
    def from_token(cls, token: str) -> "CombineRule":
        try:
            return cls(token.strip().lower())
        except ValueError:
            valid = ", ".join(r.value for r in cls)
            raise ValueError(f"unknown combine rule {token!r}; expected one of {valid}") from None


class CoverViolation(ValueError):
    """An arm interval does not contain its fitted value, so the
    shrinkage rules do not apply."""


@dataclass(frozen=True)
class IteMethod:
    """A combine rule together with the overall miscoverage budget."""

    rule: CombineRule
    alpha: float

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class IteInterval:
    """An effect interval plus the per-arm intervals it came from."""

    interval: ExtInterval
    method: IteMethod
    arm_pair: ArmIntervalPair

    @property
    def degenerate(self) -> bool:
        return self.interval.is_infinite


def arm_level(alpha: float, rule: CombineRule) -> float:
    """Per-arm coverage level needed so the combined level is 1 - alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if rule is CombineRule.BONFERRONI:
        return 1.0 - alpha / 2.0
    if rule is CombineRule.PRODUCT:
        return math.sqrt(1.0 - alpha)
    return 1.0 - alpha


def combine_difference(pair: ArmIntervalPair) -> ExtInterval:
    """Interval for (treated outcome) - (control outcome).

    Endpoints are differenced crosswise; infinite endpoints propagate.
    """
    return ExtInterval(
        pair.interval_plus.lo - pair.interval_minus.hi,
        pair.interval_plus.hi - pair.interval_minus.lo,
    )


def shrink_toward_center(interval: ExtInterval, center: float, rule: CombineRule) -> ExtInterval:
    """Pull both endpoints toward ``center`` by a factor sqrt(2).

    Applies to the ``th2`` rules only; the negative-correlation variant
    returns the interval unchanged. The center must lie inside the
    interval; a violation means the arm procedure does not bracket its own
    fit and the shrinkage rules are unsound for it.
    """
    if rule not in (CombineRule.SHRINK, CombineRule.SHRINK_NEG):
        raise ValueError(f"shrinkage only applies to th2 rules, got {rule}")
    if not interval.contains(center):
        raise CoverViolation(
            f"fitted value {center} outside arm interval [{interval.lo}, {interval.hi}]"
        )
    if rule is CombineRule.SHRINK_NEG:
        return interval
    return ExtInterval(
        center - (center - interval.lo) / SQRT2,
        center + (interval.hi - center) / SQRT2,
    )


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """How per-arm intervals are produced.

    ``predictor`` is one of "ols", "kernel", "nn"; ``nonconformity`` is
    "abs" or "std"; ``mode`` is "full" (grid refits) or "split" (first
    ``split_frac`` of the rows train, the rest calibrate).
    """

    predictor: str = "ols"
    nonconformity: str = "abs"
    mode: str = "full"
    split_frac: float = 2.0 / 3.0
    grid: Optional[GridSpec] = None
    grid_step: float = 0.1
    kernel_bandwidth: Optional[float] = None
    variance_bandwidth: Optional[float] = None
    nn_hidden: int = 10
    nn_train: TrainConfig = TrainConfig()

    def __post_init__(self) -> None:
        if self.predictor not in ("ols", "kernel", "nn"):
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.nonconformity not in ("abs", "std"):
            raise ValueError(f"unknown nonconformity kind {self.nonconformity!r}")
        if self.mode not in ("full", "split"):
            raise ValueError(f"unknown conformal mode {self.mode!r}")
        if not 0.0 < self.split_frac < 1.0:
            raise ValueError(f"split_frac must be in (0, 1), got {self.split_frac}")


def make_procedure(cfg: PipelineConfig) -> ConformalProcedure:
    if cfg.predictor == "ols":
        return ols_procedure(cfg.nonconformity, cfg.variance_bandwidth)
    if cfg.predictor == "kernel":
        return kernel_procedure(cfg.kernel_bandwidth, cfg.nonconformity, cfg.variance_bandwidth)
    return nn_procedure(cfg.nn_hidden, cfg.nn_train, cfg.nonconformity, cfg.variance_bandwidth)


def split_point(n: int, frac: float = 2.0 / 3.0) -> int:
    """Number of leading rows used for fitting, floor(frac * n), clamped
    so at least one row lands on each side."""
    return min(max(int(math.floor(frac * n)), 1), n - 1)


def _arm_results(
    ds: Dataset, proc: ConformalProcedure, cfg: PipelineConfig, x: np.ndarray, alpha_arm: float
) -> tuple[ConformalSetResult, ConformalSetResult, float, float]:
    """Per-arm conformal results and fitted centers at one probe."""
    if cfg.mode == "split":
        cal = split_calibration(ds, split_point(ds.n, cfg.split_frac), proc)
        res_plus = cal.interval(x, 1, alpha_arm)
        res_minus = cal.interval(x, -1, alpha_arm)
        center_plus = cal.measure.center(x, 1)
        center_minus = cal.measure.center(x, -1)
    else:
        measure = proc.fit(ds)
        res_plus = full_conformal_set(ds, proc, x, 1, alpha_arm, cfg.grid, cfg.grid_step)
        res_minus = full_conformal_set(ds, proc, x, -1, alpha_arm, cfg.grid, cfg.grid_step)
        center_plus = measure.center(x, 1)
        center_minus = measure.center(x, -1)
    return res_plus, res_minus, center_plus, center_minus


def combine_pair(pair: ArmIntervalPair, rule: CombineRule) -> ExtInterval:
    """Apply the rule's shrinkage (if any) to both arms, then difference."""
    if rule in (CombineRule.SHRINK, CombineRule.SHRINK_NEG):
        pair = ArmIntervalPair(
            shrink_toward_center(pair.interval_plus, pair.center_plus, rule),
            shrink_toward_center(pair.interval_minus, pair.center_minus, rule),
            pair.center_plus,
            pair.center_minus,
        )
    return combine_difference(pair)


def ite_interval(
    ds: Dataset, method: IteMethod, pipeline: PipelineConfig, x: np.ndarray
) -> IteInterval:
    """Effect interval at covariates ``x`` for the configured pipeline.

    Both arms are evaluated at the probe with the per-arm level implied by
    the rule, shrunk toward the fitted values for the ``th2`` rules, and
    differenced. Degenerate arms (too little arm-matched data) propagate to
    a degenerate effect interval.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    alpha_arm = 1.0 - arm_level(method.alpha, method.rule)
    proc = make_procedure(pipeline)
    res_plus, res_minus, center_plus, center_minus = _arm_results(
        ds, proc, pipeline, x, alpha_arm
    )
    if res_plus.hull is None or res_minus.hull is None:
        raise RuntimeError("empty conformal set on the grid; widen the grid or coarsen alpha")
    pair = ArmIntervalPair(res_plus.hull, res_minus.hull, center_plus, center_minus)
    return IteInterval(combine_pair(pair, method.rule), method, pair)
