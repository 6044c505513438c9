"""Monte Carlo harness: synthetic trials, oracle intervals, coverage runs.

Data generating processes follow a fixed recipe: equicorrelated Gaussian
covariates, a random +-1 arm assignment independent of the covariates, one
of two regression surfaces (a linear one and a signed-square of it), and
unit-variance noise that is either Gaussian or Laplace. A replication
draws a trial dataset, builds an effect interval for a fresh subject with
one of the configured methods, then draws that subject's actual effect and
scores coverage and length relative to the oracle that knows the truth.

Replication seeds are derived from the scenario seed with a counter, so
results are bitwise reproducible and independent of scheduling.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .core import Dataset, ExtInterval
from .ite import CombineRule, IteMethod, PipelineConfig, ite_interval
from .predictors import TrainConfig

__all__ = [
    "ErrorDist",
    "Method",
    "NotPositiveDefinite",
    "Regression",
    "Scenario",
    "SimOptions",
    "SimResult",
    "gen_covariates",
    "oracle_half_width",
    "oracle_interval",
    "regression_value",
    "regression_values",
    "run_experiment",
    "run_replication",
    "sample_error",
    "sample_errors",
]


class NotPositiveDefinite(ValueError):
    """The requested equicorrelation matrix is not positive definite."""


class Regression(Enum):
    F1 = "F1"  # x1 + x2 + x3 + t
    F2 = "F2"  # sign(f1) * f1^2


class ErrorDist(Enum):
    NORMAL = "NORMAL"
    LAPLACE = "LAPLACE"


class Method(Enum):
    """Interval methods of the study, plus the oracle used for validation.

    LM methods fit least squares and use the grid-refit conformal
    construction; NN methods fit the small network and use the split
    construction with two thirds of the rows for training. The suffix picks
    the combination rule: 1 pairs with ``th1b``, 2 with ``th2``.
    """

    LM1 = "LM1"
    LM2 = "LM2"
    NN1 = "NN1"
    NN2 = "NN2"
    ORACLE = "ORACLE"


#: Laplace scale with unit variance (variance of Laplace(b) is 2 b^2).
LAPLACE_SCALE = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class Scenario:
    """One cell of the simulation grid."""

    n: int
    method: Method
    regression: Regression = Regression.F1
    error_dist: ErrorDist = ErrorDist.NORMAL
    rho: float = 0.2
    d: int = 10
    p_treat: float = 0.5
    alpha: float = 0.1
    replications: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "regression", Regression(self.regression))
        object.__setattr__(self, "error_dist", ErrorDist(self.error_dist))
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.d < 3:
            raise ValueError(f"d must be >= 3, got {self.d}")
        if self.replications < 1:
            raise ValueError(f"replications must be >= 1, got {self.replications}")
        if not 0.0 < self.p_treat < 1.0:
            raise ValueError(f"p_treat must be in (0, 1), got {self.p_treat}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.d > 1 and not (-1.0 / (self.d - 1) < self.rho < 1.0):
            raise ValueError(f"rho={self.rho} outside (-1/(d-1), 1) for d={self.d}")


@dataclass(frozen=True)
class SimResult:
    """Aggregated coverage and relative-length statistics.

    Infinite interval lengths are excluded from ``mean_rel_length`` and
    counted in ``frac_infinite`` instead. ``runtime`` is wall-clock
    telemetry and does not take part in equality comparisons.
    """

    coverage: float
    coverage_se: float
    mean_rel_length: float
    frac_infinite: float
    runtime: float = field(compare=False, default=0.0)


@dataclass(frozen=True)
class SimOptions:
    """Knobs shared across scenarios: grid step for the grid-refit
    construction and the network architecture/training settings."""

    grid_step: float = 0.1
    nn_hidden: int = 10
    nn_train: TrainConfig = TrainConfig()


DEFAULT_OPTIONS = SimOptions()


# ---------------------------------------------------------------------------
# Data generating process
# ---------------------------------------------------------------------------


def gen_covariates(n: int, d: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Rows i.i.d. N(0, S) with unit variances and constant correlation rho.

    The equicorrelation matrix has eigenvalues 1 + (d-1) rho and 1 - rho,
    so it is positive definite exactly when -1/(d-1) < rho < 1.
    """
    if d > 1 and not (-1.0 / (d - 1) < rho < 1.0):
        raise NotPositiveDefinite(f"rho={rho} not in (-1/(d-1), 1) for d={d}")
    if d == 1:
        return rng.standard_normal((n, 1))
    sigma = np.full((d, d), float(rho))
    np.fill_diagonal(sigma, 1.0)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    return rng.standard_normal((n, d)) @ chol.T


def regression_values(reg: Regression, x: np.ndarray, t) -> np.ndarray:
    """Vectorized true regression surface."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    f1 = x[:, 0] + x[:, 1] + x[:, 2] + t
    if Regression(reg) is Regression.F1:
        return f1
    return np.sign(f1) * f1 * f1


def regression_value(reg: Regression, x: np.ndarray, t: int) -> float:
    return float(regression_values(reg, np.asarray(x, dtype=float).reshape(1, -1), t)[0])


def sample_errors(dist: ErrorDist, size: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise draws."""
    if ErrorDist(dist) is ErrorDist.NORMAL:
        return rng.standard_normal(size)
    return rng.laplace(0.0, LAPLACE_SCALE, size)


def sample_error(dist: ErrorDist, rng: np.random.Generator) -> float:
    return float(sample_errors(dist, 1, rng)[0])


def _laplace_diff_cdf(z: float, b: float = LAPLACE_SCALE) -> float:
    """CDF of the difference of two independent Laplace(b) variables."""
    w = abs(z) / b
    tail = math.exp(-w) * (2.0 + w) / 4.0
    return 1.0 - tail if z >= 0 else tail


@lru_cache(maxsize=None)
def oracle_half_width(dist: ErrorDist, alpha: float) -> float:
    """Half width of the central 1-alpha interval for the error difference.

    The two arm errors are independent, so the difference is N(0, 2) for
    Gaussian noise; for Laplace noise the quantile comes from inverting the
    difference CDF numerically.
    """
    target = 1.0 - alpha / 2.0
    if ErrorDist(dist) is ErrorDist.NORMAL:
        return math.sqrt(2.0) * float(norm.ppf(target))
    return float(brentq(lambda z: _laplace_diff_cdf(z) - target, 0.0, 100.0, xtol=1e-10))


def oracle_interval(reg: Regression, dist: ErrorDist, x: np.ndarray, alpha: float) -> ExtInterval:
    """Interval of the process that knows the truth: centered at the true
    effect difference, half width the exact error-difference quantile."""
    delta = regression_value(reg, x, 1) - regression_value(reg, x, -1)
    half = oracle_half_width(ErrorDist(dist), float(alpha))
    return ExtInterval(delta - half, delta + half)


def draw_dataset(scn: Scenario, rng: np.random.Generator) -> Dataset:
    """One synthetic trial: arms, covariates, outcomes."""
    t = np.where(rng.random(scn.n) < scn.p_treat, 1, -1)
    x = gen_covariates(scn.n, scn.d, scn.rho, rng)
    e = sample_errors(scn.error_dist, scn.n, rng)
    y = regression_values(scn.regression, x, t) + e
    return Dataset(x, t, y)


# ---------------------------------------------------------------------------
# Replication engine
# ---------------------------------------------------------------------------

_RULE_FOR_METHOD = {
    Method.LM1: CombineRule.PRODUCT,
    Method.NN1: CombineRule.PRODUCT,
    Method.LM2: CombineRule.SHRINK,
    Method.NN2: CombineRule.SHRINK,
}


def method_pipeline(
    method: Method, options: SimOptions, nn_seed: int = 0
) -> Optional[PipelineConfig]:
    """Pipeline settings for a method; None for the oracle."""
    method = Method(method)
    if method is Method.ORACLE:
        return None
    if method in (Method.LM1, Method.LM2):
        return PipelineConfig(
            predictor="ols", nonconformity="abs", mode="full", grid_step=options.grid_step
        )
    return PipelineConfig(
        predictor="nn",
        nonconformity="abs",
        mode="split",
        nn_hidden=options.nn_hidden,
        nn_train=replace(options.nn_train, seed=nn_seed),
    )


def run_replication(
    scn: Scenario, rep_seed, options: SimOptions = DEFAULT_OPTIONS
) -> tuple[bool, float]:
    """One replication: (covered, length relative to the oracle).

    ``rep_seed`` may be anything ``numpy.random.default_rng`` accepts.
    The result is a pure function of (scenario, rep_seed, options).
    """
    rng = np.random.default_rng(rep_seed)
    ds = draw_dataset(scn, rng)
    x_new = gen_covariates(1, scn.d, scn.rho, rng)[0]

    if scn.method is Method.ORACLE:
        interval = oracle_interval(scn.regression, scn.error_dist, x_new, scn.alpha)
    else:
        nn_seed = int(rng.integers(np.iinfo(np.int64).max))
        pipeline = method_pipeline(scn.method, options, nn_seed)
        method = IteMethod(_RULE_FOR_METHOD[scn.method], scn.alpha)
        interval = ite_interval(ds, method, pipeline, x_new).interval

    delta = regression_value(scn.regression, x_new, 1) - regression_value(
        scn.regression, x_new, -1
    )
    e_plus = sample_error(scn.error_dist, rng)
    e_minus = sample_error(scn.error_dist, rng)
    tau = delta + e_plus - e_minus

    covered = interval.contains(tau)
    oracle_len = 2.0 * oracle_half_width(scn.error_dist, scn.alpha)
    rel_length = interval.length / oracle_len
    return covered, float(rel_length)


def replication_seeds(scn: Scenario) -> list[np.random.SeedSequence]:
    """Counter-derived per-replication seeds; independent of run order."""
    return [
        np.random.SeedSequence(entropy=scn.seed, spawn_key=(i,))
        for i in range(scn.replications)
    ]


def run_experiment(
    scn: Scenario, options: SimOptions = DEFAULT_OPTIONS, threads: int = 1
) -> SimResult:
    """Run all replications of a scenario and aggregate.

    Replications are independent work items; with ``threads > 1`` they run
    on a thread pool. Results are identical for any thread count.
    """
    seeds = replication_seeds(scn)
    start = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda s: run_replication(scn, s, options), seeds))
    else:
        outcomes = [run_replication(scn, s, options) for s in seeds]
    runtime = time.perf_counter() - start

    covered = np.array([c for c, _ in outcomes], dtype=float)
    lengths = np.array([l for _, l in outcomes], dtype=float)
    coverage = float(covered.mean())
    coverage_se = math.sqrt(coverage * (1.0 - coverage) / len(covered))
    finite = np.isfinite(lengths)
    mean_rel = float(lengths[finite].mean()) if finite.any() else math.nan
    return SimResult(
        coverage=coverage,
        coverage_se=coverage_se,
        mean_rel_length=mean_rel,
        frac_infinite=float(1.0 - finite.mean()),
        runtime=runtime,
    )
