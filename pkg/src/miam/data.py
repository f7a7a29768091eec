"""In-memory representation of irregularly-sampled multivariate time series.

A sample is a triplet of aligned T x D matrices: observed values (zeros at
missing positions), a binary observation mask, and per-variable elapsed time
since the previous observation of that variable. Timestamps are real hours
since the first record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError, ShapeError


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeSeriesSample:
    """One subject's irregularly-sampled record.

    Attributes:
        subject_id: opaque identifier.
        timestamps: (T,) strictly increasing hours since first record.
        values:     (T, D) observed values, exactly 0 where mask is 0.
        mask:       (T, D) binary, 1 = observed.
        intervals:  (T, D) hours since the previous observation of each
                    variable (row 0 is all zeros).
        label:      binary outcome, None for unlabeled inference data.
    """

    subject_id: str
    timestamps: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    intervals: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "timestamps", _freeze(np.asarray(self.timestamps, dtype=np.float64)))
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=np.float64)))
        object.__setattr__(self, "mask", _freeze(np.asarray(self.mask, dtype=np.float64)))
        object.__setattr__(self, "intervals", _freeze(np.asarray(self.intervals, dtype=np.float64)))

    @property
    def num_timestamps(self) -> int:
        return self.values.shape[0]

    @property
    def num_variables(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Dataset:
    """A collection of samples sharing one variable vocabulary."""

    samples: tuple
    num_variables: int
    variable_names: Optional[tuple] = None
    normalization: Optional["object"] = None  # NormalizationStats, set by ingest

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.variable_names is not None:
            object.__setattr__(self, "variable_names", tuple(self.variable_names))
        for s in self.samples:
            if s.num_variables != self.num_variables:
                raise ShapeError(
                    f"sample {s.subject_id!r} has {s.num_variables} variables, "
                    f"dataset declares {self.num_variables}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            samples=tuple(self.samples[i] for i in indices),
            num_variables=self.num_variables,
            variable_names=self.variable_names,
            normalization=self.normalization,
        )


def compute_intervals(timestamps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elapsed time since each variable was last observed.

    Row 0 is all zeros. For j > 0 the entry is the gap to the previous time
    point, plus the previous entry when the variable was missing there:

        delta[j, d] = t_j - t_{j-1}                  if mask[j-1, d] == 1
                      t_j - t_{j-1} + delta[j-1, d]  if mask[j-1, d] == 0
    """
    t = np.asarray(timestamps, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if t.ndim != 1:
        raise ShapeError(f"timestamps must be 1-D, got shape {t.shape}")
    if m.ndim != 2 or m.shape[0] != t.shape[0]:
        raise ShapeError(f"mask shape {m.shape} does not match {t.shape[0]} timestamps")
    if np.any(np.diff(t) <= 0):
        raise InvalidInputError("timestamps must be strictly increasing")
    if not np.all((m == 0) | (m == 1)):
        raise InvalidInputError("mask entries must be 0 or 1")

    T, D = m.shape
    delta = np.zeros((T, D), dtype=np.float64)
    for j in range(1, T):
        gap = t[j] - t[j - 1]
        delta[j] = gap + np.where(m[j - 1] == 1, 0.0, delta[j - 1])
    return delta


def validate_sample(sample: TimeSeriesSample) -> list:
    """Check every sample invariant; returns a list of violation strings.

    An empty list means the sample is valid. Never raises, never mutates.
    """
    report = []
    t, x, m, d = sample.timestamps, sample.values, sample.mask, sample.intervals

    if t.ndim != 1:
        report.append(f"timestamps must be 1-D, got shape {t.shape}")
        return report
    T = t.shape[0]
    shapes = {"values": x.shape, "mask": m.shape, "intervals": d.shape}
    bad_shape = False
    for name, shape in shapes.items():
        if len(shape) != 2 or shape[0] != T:
            report.append(f"{name} shape {shape} inconsistent with T={T}")
            bad_shape = True
    if not bad_shape and not (x.shape == m.shape == d.shape):
        report.append(f"values {x.shape}, mask {m.shape}, intervals {d.shape} differ")
        bad_shape = True
    if bad_shape:
        return report

    if T > 1 and np.any(np.diff(t) <= 0):
        report.append("timestamps not strictly increasing")

    if not np.all((m == 0) | (m == 1)):
        report.append("mask entries outside {0, 1}")
    else:
        bad = np.argwhere((m == 0) & (x != 0))
        for j, col in bad[:10]:
            report.append(f"values[{j},{col}]={x[j, col]} nonzero where mask is 0")
        if len(bad) > 10:
            report.append(f"... {len(bad) - 10} more nonzero-at-missing entries")

        if np.any(d[0] != 0):
            report.append("intervals row 0 is not all zeros")
        if np.any(d < 0):
            report.append("intervals contain negative entries")
        if T > 1 and not np.any(np.diff(t) <= 0):
            expected = compute_intervals(t, m)
            if not np.array_equal(expected, d):
                j, col = np.argwhere(expected != d)[0]
                report.append(
                    f"intervals[{j},{col}]={d[j, col]} does not satisfy the "
                    f"recursion (expected {expected[j, col]})"
                )

    if sample.label is not None and sample.label not in (0, 1):
        report.append(f"label {sample.label!r} not binary")
    return report


def make_sample(
    subject_id: str,
    timestamps: np.ndarray,
    values: np.ndarray,
    mask: np.ndarray,
    label: Optional[int] = None,
) -> TimeSeriesSample:
    """Build a sample, deriving intervals and zeroing values at missing entries."""
    m = np.asarray(mask, dtype=np.float64)
    x = np.where(m == 1, np.asarray(values, dtype=np.float64), 0.0)
    return TimeSeriesSample(
        subject_id=subject_id,
        timestamps=timestamps,
        values=x,
        mask=m,
        intervals=compute_intervals(timestamps, m),
        label=label,
    )
