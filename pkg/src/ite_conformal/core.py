"""Shared data model: treatment arms, observations, datasets, intervals.

Everything here is immutable after construction and safe to share across
threads. Datasets keep their observations in order; downstream code relies
on that order (sample splitting uses a "first m rows" convention).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

__all__ = [
    "ARMS",
    "ArmIntervalPair",
    "CsvFormatError",
    "Dataset",
    "ExtInterval",
    "Observation",
    "TreatmentArm",
    "as_arm",
    "read_dataset_csv",
    "validate_dataset",
    "write_dataset_csv",
]


class TreatmentArm(IntEnum):
    """Treatment-group indicator. Exactly two codes exist: -1 and +1."""

    CONTROL = -1
    TREATED = 1


#: Both arms, treated first. Iteration order is fixed so results are stable.
ARMS: tuple[TreatmentArm, TreatmentArm] = (TreatmentArm.TREATED, TreatmentArm.CONTROL)


def as_arm(t: int) -> TreatmentArm:
    """Coerce ``t`` to a :class:`TreatmentArm`, rejecting any other code."""
    try:
        return TreatmentArm(int(t))
    except ValueError:
        raise ValueError(f"invalid arm code {t!r}; expected -1 or 1") from None


class CsvFormatError(ValueError):
    """A CSV file does not follow the interchange schema."""


@dataclass(frozen=True)
class Observation:
    """One record: covariate vector ``x``, arm ``t`` and outcome ``y``."""

    x: np.ndarray
    t: int
    y: float

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float).reshape(-1)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", int(self.t))
        object.__setattr__(self, "y", float(self.y))


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """An ordered sample of (x, t, y) observations.

    Parameters
    ----------
    x : ndarray of shape (n, d)
        Covariate matrix.
    t : ndarray of shape (n,)
        Arm codes, one of {-1, +1} per row (checked by
        :func:`validate_dataset`, not at construction).
    y : ndarray of shape (n,)
        Outcomes.
    d : int, optional
        Declared covariate dimension. Defaults to ``x.shape[1]``; a value
        disagreeing with the matrix is reported by :func:`validate_dataset`.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    d: int = -1

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"x must be a 2-d array, got shape {x.shape}")
        t = np.asarray(self.t, dtype=int).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (x.shape[0] == t.shape[0] == y.shape[0]):
            raise ValueError(
                f"length mismatch: x has {x.shape[0]} rows, "
                f"t has {t.shape[0]}, y has {y.shape[0]}"
            )
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "d", x.shape[1] if self.d < 0 else int(self.d))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def __len__(self) -> int:
        return self.n

    def arm_mask(self, t: int) -> np.ndarray:
        return self.t == int(t)

    def arm_count(self, t: int) -> int:
        return int(np.count_nonzero(self.arm_mask(t)))

    def head(self, m: int) -> "Dataset":
        """First ``m`` observations (the training part of a split)."""
        return Dataset(self.x[:m], self.t[:m], self.y[:m], d=self.d)

    def tail(self, m: int) -> "Dataset":
        """Observations after the first ``m`` (the calibration part)."""
        return Dataset(self.x[m:], self.t[m:], self.y[m:], d=self.d)

    def append(self, x: np.ndarray, y: float, t: int) -> "Dataset":
        """Dataset augmented with one extra observation at the end."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if x.shape[1] != self.d:
            raise ValueError(f"appended x has dimension {x.shape[1]}, expected {self.d}")
        return Dataset(
            np.vstack([self.x, x]) if self.n else x,
            np.concatenate([self.t, [int(t)]]),
            np.concatenate([self.y, [float(y)]]),
            d=self.d,
        )

    def permute(self, order: Sequence[int]) -> "Dataset":
        order = np.asarray(order, dtype=int)
        return Dataset(self.x[order], self.t[order], self.y[order], d=self.d)

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(self.x[i], int(self.t[i]), float(self.y[i]))

    @classmethod
    def from_observations(cls, obs: Iterable[Observation], d: int | None = None) -> "Dataset":
        obs = list(obs)
        if not obs:
            if d is None:
                raise ValueError("empty dataset needs an explicit dimension d")
            return cls(np.empty((0, d)), np.empty(0, dtype=int), np.empty(0), d=d)
        dims = {o.x.shape[0] for o in obs}
        if len(dims) > 1:
            raise ValueError(f"observations have mixed covariate dimensions {sorted(dims)}")
        x = np.stack([o.x for o in obs])
        t = np.array([o.t for o in obs], dtype=int)
        y = np.array([o.y for o in obs])
        return cls(x, t, y, d=d if d is not None else x.shape[1])


def validate_dataset(ds: Dataset) -> list[str]:
    """Check dataset invariants, returning one message per violation.

    An empty list means the dataset is valid. An empty dataset is valid:
    fitting then falls back to the zero function.
    """
    errors: list[str] = []
    if ds.x.shape[1] != ds.d:
        errors.append(f"dimension mismatch: x has {ds.x.shape[1]} columns, d={ds.d}")
    bad = np.nonzero(~np.isfinite(ds.x).all(axis=1))[0]
    for i in bad:
        errors.append(f"non-finite covariate in row {i}")
    bad = np.nonzero(~np.isfinite(ds.y))[0]
    for i in bad:
        errors.append(f"non-finite outcome in row {i}")
    bad = np.nonzero((ds.t != 1) & (ds.t != -1))[0]
    for i in bad:
        errors.append(f"invalid arm code {int(ds.t[i])} in row {i}")
    return errors


# ---------------------------------------------------------------------------
# CSV interchange: header x1,...,xd,t,y; UTF-8; '.' decimal separator.
# Floats are written with repr() so that parsing them back is bit-exact.
# The arm column must be literally "-1" or "1".
# ---------------------------------------------------------------------------

PathLike = Union[str, Path]


def _csv_header(d: int) -> list[str]:
    return [f"x{j + 1}" for j in range(d)] + ["t", "y"]


def write_dataset_csv(ds: Dataset, path: PathLike) -> None:
    """Write ``ds`` to the CSV interchange format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_csv_header(ds.d))
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.x[i]]
            row.append(str(int(ds.t[i])))
            row.append(repr(float(ds.y[i])))
            w.writerow(row)


def read_dataset_csv(path: PathLike) -> Dataset:
    """Parse a CSV interchange file into a :class:`Dataset`.

    Raises
    ------
    CsvFormatError
        On a malformed header, a row of the wrong width, an arm token other
        than the literal "-1" or "1", or an unparseable number.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[-2:] != ["t", "y"]:
        raise CsvFormatError(f"{path}: header must end with 't,y', got {header}")
    d = len(header) - 2
    if header[:d] != [f"x{j + 1}" for j in range(d)]:
        raise CsvFormatError(f"{path}: covariate columns must be x1..x{d}, got {header[:d]}")

    xs, ts, ys = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise CsvFormatError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
        tok = row[d].strip()
        if tok not in ("-1", "1"):
            raise CsvFormatError(f"{path}:{lineno}: arm must be -1 or 1, got {tok!r}")
        try:
            xs.append([float(v) for v in row[:d]])
            ys.append(float(row[d + 1]))
        except ValueError as exc:
            raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
        ts.append(int(tok))
    x = np.array(xs, dtype=float) if xs else np.empty((0, d))
    return Dataset(x.reshape(len(ts), d), np.array(ts, dtype=int), np.array(ys), d=d)


# ---------------------------------------------------------------------------
# Extended-real intervals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtInterval:
    """A closed interval with endpoints on the extended real line.

    ``lo`` may be -inf and ``hi`` may be +inf; ``(-inf, inf)`` is the
    degenerate "no information" interval. NaN endpoints are rejected, as are
    point intervals at infinity.
    """

    lo: float
    hi: float

    def __post_init__(self) -> None:
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValueError("interval endpoints must not be NaN")
        if lo > hi:
            raise ValueError(f"interval endpoints out of order: [{lo}, {hi}]")
        if lo == math.inf or hi == -math.inf:
            raise ValueError("interval collapses to a point at infinity")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def real_line(cls) -> "ExtInterval":
        return cls(-math.inf, math.inf)

    @property
    def length(self) -> float:
        """hi - lo, +inf if either endpoint is infinite."""
        return self.hi - self.lo

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.lo) or math.isinf(self.hi)

    def contains(self, v: float) -> bool:
        return self.lo <= v <= self.hi

    def shift(self, c: float) -> "ExtInterval":
        return ExtInterval(self.lo + c, self.hi + c)


@dataclass(frozen=True)
class ArmIntervalPair:
    """Per-arm prediction intervals with the fitted values they bracket.

    For residual-based constructions each interval contains its center;
    downstream shrinkage requires that and enforces it.
    """

    interval_plus: ExtInterval
    interval_minus: ExtInterval
    center_plus: float
    center_minus: float
