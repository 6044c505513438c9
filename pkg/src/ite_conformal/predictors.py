"""Prediction procedures: fit a dataset, get back a regression surface.

Three fitters are provided, all returning a :class:`RegressionFn` over
(x, t) with t in {-1, +1}:

* :func:`fit_ols_interaction` -- least squares on [1, t, x, t*x],
* :func:`fit_kernel` -- Nadaraya-Watson with a Gaussian kernel,
* :func:`fit_nn` -- a one-hidden-layer network trained by mini-batch
  gradient descent.

Degenerate inputs (too few rows, rank-deficient designs) fall back to the
zero function rather than raising. :func:`fit_variance_estimator` smooths
squared residuals into a strictly positive conditional-variance surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np
import scipy.linalg

from .core import Dataset

__all__ = [
    "EPS_VAR",
    "InvalidBandwidth",
    "NonFiniteLoss",
    "RegressionFn",
    "TrainConfig",
    "VarianceFn",
    "fit_kernel",
    "fit_nn",
    "fit_ols_interaction",
    "fit_variance_estimator",
    "interaction_design",
    "ols_augmented_affine",
    "silverman_bandwidth",
]

#: Floor for estimated conditional variances.
EPS_VAR = 1e-6

#: Relative tolerance for declaring a pivoted-QR design rank deficient.
RANK_RTOL = 1e-10


class InvalidBandwidth(ValueError):
    """Kernel bandwidth must be strictly positive."""


class NonFiniteLoss(RuntimeError):
    """Network training produced a non-finite loss (learning rate too high)."""


@dataclass(frozen=True)
class RegressionFn:
    """A fitted regression surface f(x, t).

    ``predict`` evaluates a batch; calling the object evaluates one point.
    Instances are immutable and deterministic given their fitted state.
    """

    name: str
    params: Mapping[str, Any]
    _batch: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return self._batch(x, t)

    def __call__(self, x: np.ndarray, t: int) -> float:
        return float(self.predict(np.asarray(x, dtype=float).reshape(1, -1), t)[0])


@dataclass(frozen=True)
class VarianceFn:
    """A fitted conditional-variance surface, floored at ``floor``."""

    name: str
    params: Mapping[str, Any]
    _batch: Callable[[np.ndarray, np.ndarray], np.ndarray]
    floor: float = EPS_VAR

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return np.maximum(self._batch(x, t), self.floor)

    def __call__(self, x: np.ndarray, t: int) -> float:
        return float(self.predict(np.asarray(x, dtype=float).reshape(1, -1), t)[0])


def zero_regression(name: str = "zero") -> RegressionFn:
    return RegressionFn(name, {"fallback": "zero"}, lambda x, t: np.zeros(x.shape[0]))


# ---------------------------------------------------------------------------
# Least squares with treatment interactions
# ---------------------------------------------------------------------------


def interaction_design(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Design matrix [1, t, x, t*x] of width 2d + 2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    ones = np.ones((x.shape[0], 1))
    return np.hstack([ones, t, x, t * x])


def _qr_solve(z: np.ndarray, rhs: np.ndarray) -> np.ndarray | None:
    """Solve min ||z b - rhs|| via pivoted QR; None if z is rank deficient."""
    p = z.shape[1]
    if z.shape[0] < p:
        return None
    q, r, piv = scipy.linalg.qr(z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[0] == 0.0 or np.any(diag < RANK_RTOL * diag[0]):
        return None
    sol = scipy.linalg.solve_triangular(r, q.T @ rhs)
    out = np.empty_like(sol)
    out[piv] = sol
    return out


def fit_ols_interaction(ds: Dataset) -> RegressionFn:
    """Least squares fit of b0 + b1*t + g'x + t * (h'x).

    Falls back to the zero function when n < 2d + 2 or the design is rank
    deficient (relative pivot tolerance ``RANK_RTOL``).
    """
    p = 2 * ds.d + 2
    if ds.n < p:
        return zero_regression("ols_interaction")
    beta = _qr_solve(interaction_design(ds.x, ds.t), ds.y)
    if beta is None:
        return zero_regression("ols_interaction")

    def batch(x: np.ndarray, t: np.ndarray, beta=beta) -> np.ndarray:
        return interaction_design(x, t) @ beta

    return RegressionFn("ols_interaction", {"coef": beta}, batch)


def ols_augmented_affine(ds: Dataset, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of the OLS fit on ds + one pseudo observation (x, y, t).

    The fitted values of least squares are linear in the outcomes, so every
    residual of the augmented fit is an affine function of the pseudo
    outcome y. Returns arrays (a, b) of length n + 1, candidate last, with

        residual_i(y) = a[i] + b[i] * y.

    Uses the same design, rank rule and fallback as
    :func:`fit_ols_interaction` applied to the augmented dataset, so the
    result matches refitting at each candidate y.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    z = np.vstack([interaction_design(ds.x, ds.t), interaction_design(x, np.array([t]))])
    n = ds.n
    rhs = np.zeros((n + 1, 2))
    rhs[:n, 0] = ds.y
    rhs[n, 1] = 1.0
    beta = _qr_solve(z, rhs) if n + 1 >= z.shape[1] else None
    if beta is None:
        # Zero-function fallback: residuals are the outcomes themselves.
        a = np.concatenate([ds.y, [0.0]])
        b = np.zeros(n + 1)
        b[n] = 1.0
        return a, b
    fitted = z @ beta  # column 0: response [Y; 0], column 1: unit pseudo outcome
    a = np.concatenate([ds.y, [0.0]]) - fitted[:, 0]
    b = -fitted[:, 1]
    b[n] += 1.0
    return a, b


# ---------------------------------------------------------------------------
# Nadaraya-Watson kernel regression
# ---------------------------------------------------------------------------


def silverman_bandwidth(n: int, d: int) -> float:
    """Rule-of-thumb bandwidth 1.06 * n^(-1/(d+5)) on standardized inputs."""
    if n <= 0:
        return 1.0
    return 1.06 * n ** (-1.0 / (d + 5))


def _standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0) if x.size else np.zeros(x.shape[1])
    sd = x.std(axis=0) if x.size else np.ones(x.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    return mean, sd


def _augment(x: np.ndarray, t: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """Standardized covariates with the raw +-1 arm code appended."""
    return np.hstack([(x - mean) / sd, np.asarray(t, dtype=float).reshape(-1, 1)])


def _nw_smoother(
    ds: Dataset, values: np.ndarray, bandwidth: float, fallback_zero: float
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Weighted average of ``values`` with Gaussian weights on (x, t).

    Per-probe fallback when every weight underflows: the mean of ``values``
    over the probe's arm, or ``fallback_zero`` if that arm is empty.
    """
    mean, sd = _standardizer(ds.x)
    z_train = _augment(ds.x, ds.t, mean, sd)
    arm_means = {}
    for arm in (-1, 1):
        mask = ds.t == arm
        arm_means[arm] = float(values[mask].mean()) if mask.any() else fallback_zero

    def batch(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        z = _augment(x, t, mean, sd)
        # squared distances probe-by-training, (k, n)
        d2 = ((z[:, None, :] - z_train[None, :, :]) ** 2).sum(axis=2)
        logw = -0.5 * d2 / (bandwidth * bandwidth)
        top = logw.max(axis=1)
        out = np.empty(x.shape[0])
        ok = np.isfinite(top)
        if ok.any():
            w = np.exp(logw[ok] - top[ok, None])
            out[ok] = (w * values[None, :]).sum(axis=1) / w.sum(axis=1)
        for i in np.nonzero(~ok)[0]:
            out[i] = arm_means[1 if t[i] > 0 else -1]
        return out

    return batch


def fit_kernel(ds: Dataset, bandwidth: float | None = None) -> RegressionFn:
    """Nadaraya-Watson regression on the concatenated (x, t) point.

    Covariates are standardized by their training mean/sd and the arm code
    stays at +-1; a single Gaussian bandwidth applies to all coordinates of
    that standardized vector. ``bandwidth=None`` selects the Silverman-style
    default. When all kernel weights underflow at a probe, the probe's arm
    mean is returned; an empty arm gives 0.
    """
    if bandwidth is None:
        bandwidth = silverman_bandwidth(ds.n, ds.d)
    if bandwidth <= 0:
        raise InvalidBandwidth(f"bandwidth must be > 0, got {bandwidth}")
    if ds.n == 0:
        return zero_regression("kernel")
    batch = _nw_smoother(ds, ds.y, bandwidth, fallback_zero=0.0)
    return RegressionFn("kernel", {"bandwidth": bandwidth, "n": ds.n}, batch)


def fit_variance_estimator(
    ds: Dataset, f: RegressionFn, bandwidth: float | None = None
) -> VarianceFn:
    """Kernel-smoothed squared residuals of ``f``, floored at ``EPS_VAR``."""
    if bandwidth is None:
        bandwidth = silverman_bandwidth(ds.n, ds.d)
    if bandwidth <= 0:
        raise InvalidBandwidth(f"bandwidth must be > 0, got {bandwidth}")
    if ds.n == 0:
        return VarianceFn("kernel_variance", {"bandwidth": bandwidth},
                          lambda x, t: np.full(x.shape[0], EPS_VAR))
    resid2 = (ds.y - f.predict(ds.x, ds.t)) ** 2
    batch = _nw_smoother(ds, resid2, bandwidth, fallback_zero=EPS_VAR)
    return VarianceFn("kernel_variance", {"bandwidth": bandwidth}, batch)


# ---------------------------------------------------------------------------
# One-hidden-layer network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch gradient descent settings for :func:`fit_nn`."""

    epochs: int = 500
    lr: float = 0.01
    batch: int = 32
    seed: int = 0


def _nn_init(hidden: int, n_in: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "w1": rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(hidden, n_in)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden),
        "b2": np.zeros(1),
    }


def _nn_forward(params: Mapping[str, np.ndarray], z: np.ndarray) -> np.ndarray:
    h = np.tanh(z @ params["w1"].T + params["b1"])
    return h @ params["w2"] + params["b2"][0]


def _nn_loss_and_grads(
    params: Mapping[str, np.ndarray], z: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error on the batch and its parameter gradients."""
    pre = z @ params["w1"].T + params["b1"]
    h = np.tanh(pre)
    out = h @ params["w2"] + params["b2"][0]
    err = out - y
    loss = float((err * err).mean())
    dout = 2.0 * err / z.shape[0]
    dh = np.outer(dout, params["w2"])
    dpre = dh * (1.0 - h * h)
    grads = {
        "w1": dpre.T @ z,
        "b1": dpre.sum(axis=0),
        "w2": h.T @ dout,
        "b2": np.array([dout.sum()]),
    }
    return loss, grads


def fit_nn(ds: Dataset, hidden: int, cfg: TrainConfig = TrainConfig()) -> RegressionFn:
    """One-hidden-layer tanh network trained on squared error.

    Inputs are the standardized covariates with the raw +-1 arm appended;
    the outcome is standardized internally and mapped back at prediction
    time, so the learning rate behaves comparably across outcome scales.
    Training is plain mini-batch gradient descent, deterministic given
    ``cfg.seed``.

    Raises
    ------
    NonFiniteLoss
        If the training loss becomes non-finite (learning rate too high).
    """
    if hidden < 1:
        raise ValueError(f"hidden must be >= 1, got {hidden}")
    if ds.n == 0:
        return zero_regression("nn")
    mean, sd = _standardizer(ds.x)
    z = _augment(ds.x, ds.t, mean, sd)
    y_mean = float(ds.y.mean())
    y_sd = float(ds.y.std())
    if y_sd == 0.0:
        y_sd = 1.0
    y = (ds.y - y_mean) / y_sd

    rng = np.random.default_rng(cfg.seed)
    params = _nn_init(hidden, z.shape[1], rng)
    n = ds.n
    batch = max(1, min(cfg.batch, n))
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grads = _nn_loss_and_grads(params, z[idx], y[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"training diverged (loss={loss}); lower the learning rate")
            for key in params:
                params[key] = params[key] - cfg.lr * grads[key]
    final_loss, _ = _nn_loss_and_grads(params, z, y)
    if not math.isfinite(final_loss):
        raise NonFiniteLoss("training diverged; lower the learning rate")

    def predict(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return y_mean + y_sd * _nn_forward(params, _augment(x, t, mean, sd))

    weights = {}
    for key, value in params.items():
        frozen = value.copy()
        frozen.setflags(write=False)
        weights[key] = frozen
    meta = {
        "hidden": hidden,
        "config": cfg,
        "train_mse": final_loss * y_sd * y_sd,
        "weights": weights,
    }
    return RegressionFn("nn", meta, predict)
