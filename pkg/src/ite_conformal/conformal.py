"""Arm-conditional conformal prediction sets.

Two constructions of a prediction set for the outcome of a new observation
with covariates x and arm t, both calibrated only against observations in
the same arm:

* :func:`full_conformal_set` -- for each candidate outcome y on a grid,
  refit the nonconformity measure with the pseudo observation (x, y, t)
  included and accept y when its score ranks low enough among the arm's
  augmented scores.
* :func:`split_conformal_interval` -- fit once on the first m observations,
  calibrate on arm-matched scores of the rest; residual-shaped measures
  admit a closed-form interval, no grid.

Ranks break ties against the candidate (a fixed, data-independent rule),
so with R = 1 + #{others < s} + #{others = s} a candidate is accepted when
R <= ceil((1 - alpha) * (n_arm + 1)). When alpha * (n_arm + 1) < 1 that
bound exceeds n_arm, every candidate would be accepted and the set is the
whole real line; this degenerate case is flagged without grid work.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Dataset, ExtInterval, as_arm
from .nonconformity import ConformalProcedure, NonconformityMeasure

__all__ = [
    "ConformalSetResult",
    "EmptyGrid",
    "GridSpec",
    "InvalidProbability",
    "InvalidSplit",
    "NonFiniteScore",
    "SplitCalibration",
    "conformal_rank",
    "coverage_upper_bound",
    "full_conformal_set",
    "rank_threshold",
    "split_calibration",
    "split_conformal_interval",
]


class NonFiniteScore(ValueError):
    """A nonconformity score or candidate was NaN."""


class EmptyGrid(ValueError):
    """Grid specification is unusable (empty, inverted, or too fine)."""


class InvalidSplit(ValueError):
    """Split point m must satisfy 1 <= m < n."""


class InvalidProbability(ValueError):
    """Arm probability must lie strictly between 0 and 1."""


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return alpha


def rank_threshold(alpha: float, n_arm: int) -> int:
    """ceil((1 - alpha) * (n_arm + 1)), the largest accepted rank.

    A value above ``n_arm`` means every candidate is accepted (degenerate
    set). The small slack keeps exact products like 0.8 * 10 from being
    pushed to the next integer by floating point.
    """
    v = (1.0 - _check_alpha(alpha)) * (n_arm + 1)
    return max(1, math.ceil(v - 1e-9))


def conformal_rank(scores, candidate: float) -> int:
    """Rank of ``candidate`` among ``scores`` plus itself, ties last.

    ``scores`` holds the other observations' scores; the candidate is
    counted once implicitly. Equal scores rank ahead of the candidate.
    """
    arr = np.asarray(scores, dtype=float)
    candidate = float(candidate)
    if math.isnan(candidate) or np.isnan(arr).any():
        raise NonFiniteScore("scores must not be NaN")
    return 1 + int((arr < candidate).sum()) + int((arr == candidate).sum())


def coverage_upper_bound(n_eff: int, p_t: float, alpha: float) -> float:
    """Upper end of the coverage sandwich for arm probability ``p_t``.

    ``n_eff`` is the number of draws feeding the arm count: n for the full
    construction, n - m for the split one. The excess over 1 - alpha is the
    expected value of 1/(count+1) for a binomial count, in closed form.
    The result may exceed 1; clip when reporting probabilities.
    """
    p_t = float(p_t)
    if not 0.0 < p_t < 1.0:
        raise InvalidProbability(f"p_t must be in (0, 1), got {p_t}")
    n_eff = int(n_eff)
    if n_eff < 0:
        raise ValueError(f"n_eff must be >= 0, got {n_eff}")
    alpha = _check_alpha(alpha)
    return 1.0 - alpha + (1.0 - (1.0 - p_t) ** (n_eff + 1)) / ((n_eff + 1) * p_t)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform candidate grid lo, lo+step, ..., up to hi."""

    lo: float
    hi: float
    step: float
    max_points: int = 200_000

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and math.isfinite(self.step)):
            raise EmptyGrid("grid bounds and step must be finite")
        if self.step <= 0:
            raise EmptyGrid(f"grid step must be > 0, got {self.step}")
        if self.lo >= self.hi:
            raise EmptyGrid(f"grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if (self.hi - self.lo) / self.step > self.max_points:
            raise EmptyGrid(
                f"grid would exceed {self.max_points} points; "
                "coarsen the step or narrow the range"
            )

    @property
    def count(self) -> int:
        return int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1

    def values(self) -> np.ndarray:
        return self.lo + self.step * np.arange(self.count)

    @classmethod
    def from_data(cls, y: np.ndarray, step: float = 0.1, pad: float = 3.0) -> "GridSpec":
        """Grid spanning [min y - pad*range, max y + pad*range]."""
        y = np.asarray(y, dtype=float)
        if y.size == 0:
            raise EmptyGrid("cannot build a grid from an empty sample")
        lo, hi = float(y.min()), float(y.max())
        span = hi - lo if hi > lo else 1.0
        return cls(lo - pad * span, hi + pad * span, step)

    def widened(self, factor: float = 2.0) -> "GridSpec":
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo) * factor
        return GridSpec(mid - half, mid + half, self.step, self.max_points)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConformalSetResult:
    """Outcome of one conformal set construction for a single (x, t).

    ``accepted`` is the array of accepted grid values (None when no grid
    was scanned: closed-form split intervals and degenerate sets).
    ``hull`` is [min accepted, max accepted], the whole real line when
    degenerate, or None when nothing on the grid was accepted.
    """

    accepted: Optional[np.ndarray]
    hull: Optional[ExtInterval]
    n_arm: int
    degenerate: bool
    threshold: int
    boundary_touch: bool = False
    quantile: Optional[float] = None
    grid: Optional[GridSpec] = None


def _degenerate_result(n_arm: int, threshold: int) -> ConformalSetResult:
    return ConformalSetResult(
        accepted=None,
        hull=ExtInterval.real_line(),
        n_arm=n_arm,
        degenerate=True,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# Full conformal
# ---------------------------------------------------------------------------


def _accept_mask_affine(a, b, arm_mask, k, ys) -> np.ndarray:
    """Vectorized accept decisions when augmented residuals are a + b*y."""
    a_others = a[:-1][arm_mask]
    b_others = b[:-1][arm_mask]
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NonFiniteScore("non-finite augmented residual coefficients")
    accept = np.empty(ys.shape[0], dtype=bool)
    chunk = max(1, 4_000_000 // max(1, a_others.shape[0]))
    for start in range(0, ys.shape[0], chunk):
        yc = ys[start : start + chunk]
        s_others = np.abs(a_others[:, None] + b_others[:, None] * yc[None, :])
        s_cand = np.abs(a[-1] + b[-1] * yc)
        rank = 1 + (s_others < s_cand).sum(axis=0) + (s_others == s_cand).sum(axis=0)
        accept[start : start + chunk] = rank <= k
    return accept


def _accept_mask_refit(ds, proc, x, t, k, ys) -> np.ndarray:
    """Reference path: refit the measure for every candidate outcome."""
    arm_mask = ds.arm_mask(t)
    x_arm = ds.x[arm_mask]
    y_arm = ds.y[arm_mask]
    t_arm = ds.t[arm_mask]
    accept = np.empty(ys.shape[0], dtype=bool)
    for i, yv in enumerate(ys):
        measure = proc.fit(ds.append(x, float(yv), t))
        others = measure.score_batch(x_arm, y_arm, t_arm)
        cand = measure.score(x, float(yv), t)
        accept[i] = conformal_rank(others, cand) <= k
    return accept


def full_conformal_set(
    ds: Dataset,
    proc: ConformalProcedure,
    x: np.ndarray,
    t: int,
    alpha: float,
    grid: Optional[GridSpec] = None,
    grid_step: float = 0.1,
    use_affine: bool = True,
) -> ConformalSetResult:
    """Conformal set from refits on the augmented dataset.

    Every grid value y is accepted when the score of (x, y, t) under the
    measure refitted on dataset + (x, y, t) ranks at most
    ceil((1-alpha)(n_arm+1)) among the arm's augmented scores. With
    ``grid=None`` a grid is built from the outcomes (``grid_step``, padding
    of 3 ranges each side) and widened once, with a warning, if the
    accepted set touches a boundary; an explicit grid is never widened but
    the boundary flag is still reported.

    ``use_affine`` enables the procedure's linear-algebra shortcut when it
    advertises one; the refit path is used otherwise.
    """
    t = as_arm(t)
    alpha = _check_alpha(alpha)
    x = np.asarray(x, dtype=float).reshape(-1)
    n_arm = ds.arm_count(t)
    k = rank_threshold(alpha, n_arm)
    if k > n_arm:
        return _degenerate_result(n_arm, k)

    auto = grid is None
    if auto:
        grid = GridSpec.from_data(ds.y, step=grid_step)

    affine = proc.affine_abs_residuals if use_affine else None
    for _ in range(2):
        ys = grid.values()
        if affine is not None:
            a, b = affine(ds, x, t)
            accept = _accept_mask_affine(a, b, ds.arm_mask(t), k, ys)
        else:
            accept = _accept_mask_refit(ds, proc, x, t, k, ys)
        idx = np.nonzero(accept)[0]
        touch = bool(idx.size) and (idx[0] == 0 or idx[-1] == ys.shape[0] - 1)
        if touch and auto:
            warnings.warn(
                "accepted set touches the grid boundary; widening the grid once",
                stacklevel=2,
            )
            grid = grid.widened(2.0)
            auto = False  # widen only once
            continue
        break

    accepted = ys[idx]
    hull = ExtInterval(float(accepted[0]), float(accepted[-1])) if idx.size else None
    if touch:
        warnings.warn("accepted set still touches the grid boundary", stacklevel=2)
    return ConformalSetResult(
        accepted=accepted,
        hull=hull,
        n_arm=n_arm,
        degenerate=False,
        threshold=k,
        boundary_touch=touch,
        grid=grid,
    )


# ---------------------------------------------------------------------------
# Split conformal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitCalibration:
    """A measure fitted on the first m rows plus per-arm calibration scores.

    Fit once, then ask for intervals at any probe and level; both arms of
    an effect interval share the same fitted measure this way.
    """

    measure: NonconformityMeasure
    m: int
    scores: dict

    def interval(self, x: np.ndarray, t: int, alpha: float) -> ConformalSetResult:
        t = as_arm(t)
        alpha = _check_alpha(alpha)
        x = np.asarray(x, dtype=float).reshape(-1)
        sorted_scores = self.scores[int(t)]
        n_arm = int(sorted_scores.shape[0])
        k = rank_threshold(alpha, n_arm)
        if k > n_arm:
            return _degenerate_result(n_arm, k)
        q = float(sorted_scores[k - 1])
        center = self.measure.center(x, t)
        half = q * self.measure.scale(x, t)
        return ConformalSetResult(
            accepted=None,
            hull=ExtInterval(center - half, center + half),
            n_arm=n_arm,
            degenerate=False,
            threshold=k,
            quantile=q,
        )


def split_calibration(ds: Dataset, m: int, proc: ConformalProcedure) -> SplitCalibration:
    """Fit on the first m observations, score the arm-split remainder."""
    if not 1 <= m < ds.n:
        raise InvalidSplit(f"split point m={m} must satisfy 1 <= m < n={ds.n}")
    measure = proc.fit(ds.head(m))
    calib = ds.tail(m)
    scores = {}
    for arm in (-1, 1):
        mask = calib.t == arm
        s = measure.score_batch(calib.x[mask], calib.y[mask], calib.t[mask])
        if np.isnan(s).any():
            raise NonFiniteScore("calibration produced NaN scores")
        scores[arm] = np.sort(s)
    return SplitCalibration(measure, m, scores)


def split_conformal_interval(
    ds: Dataset,
    m: int,
    proc: ConformalProcedure,
    x: np.ndarray,
    t: int,
    alpha: float,
) -> ConformalSetResult:
    """Closed-form split conformal interval for one probe.

    With q the k-th smallest arm-matched calibration score, the interval
    is center +- q * scale at the probe; when k exceeds the number of
    calibration scores the result is the whole real line.
    """
    return split_calibration(ds, m, proc).interval(x, t, alpha)
