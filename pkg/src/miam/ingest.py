"""Parsing raw clinical records into datasets, normalization, CV folds.

Two input paths: the PhysioNet/CinC 2012 per-patient CSV layout (one file per
subject, ``Time,Parameter,Value`` rows with HH:MM times) and a generic
long-format CSV for other extracts. Assembly groups events into per-timestamp
rows, derives the observation mask and interval matrix, winsorizes and
z-normalizes with statistics fit on training data only, and produces
stratified fold manifests.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, TimeSeriesSample, make_sample
from .errors import (InvalidInputError, ParseError, SchemaError,
                     ShapeError, StratificationError)

# Default vocabulary: the challenge's time-series parameters without the
# general descriptors, minus MechVent (a ventilation flag, not a measurement)
# and Weight (doubles as a general descriptor). 35 variables, alphabetical.
PHYSIONET_VARIABLES: Tuple[str, ...] = (
    "ALP", "ALT", "AST", "Albumin", "BUN", "Bilirubin", "Cholesterol",
    "Creatinine", "DiasABP", "FiO2", "GCS", "Glucose", "HCO3", "HCT", "HR",
    "K", "Lactate", "MAP", "Mg", "NIDiasABP", "NIMAP", "NISysABP", "Na",
    "PaCO2", "PaO2", "Platelets", "RespRate", "SaO2", "SysABP", "Temp",
    "TroponinI", "TroponinT", "Urine", "WBC", "pH",
)

GENERAL_DESCRIPTORS = ("RecordID", "Age", "Gender", "Height", "ICUType", "Weight")


@dataclass(frozen=True)
class RawEvent:
    subject_id: str
    time: float        # fractional hours since admission
    variable: str
    value: float


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    winsor_low: np.ndarray
    winsor_high: np.ndarray
    fit_sample_count: int
    flagged: List[int] = field(default_factory=list)  # degenerate variables

    @property
    def num_variables(self) -> int:
        return len(self.mean)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(), "std": self.std.tolist(),
            "winsor_low": self.winsor_low.tolist(),
            "winsor_high": self.winsor_high.tolist(),
            "fit_sample_count": self.fit_sample_count,
            "flagged": list(self.flagged),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64),
                   winsor_low=np.asarray(d["winsor_low"], dtype=np.float64),
                   winsor_high=np.asarray(d["winsor_high"], dtype=np.float64),
                   fit_sample_count=int(d["fit_sample_count"]),
                   flagged=list(d["flagged"]))


@dataclass
class FoldManifest:
    k: int
    assignments: Dict[str, int]
    seed: int

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"k": self.k, "seed": self.seed, "assignments": self.assignments},
                      f, sort_keys=True, indent=0)

    @classmethod
    def load(cls, path) -> "FoldManifest":
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        return cls(k=int(d["k"]), assignments=dict(d["assignments"]), seed=int(d["seed"]))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_hhmm(text: str, line_no: int) -> float:
    parts = text.split(":")
    if len(parts) != 2:
        raise ParseError(f"line {line_no}: bad time field {text!r} (expected HH:MM)")
    try:
        hours, minutes = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"line {line_no}: bad time field {text!r} (expected HH:MM)")
    if hours < 0 or not 0 <= minutes < 60:
        raise ParseError(f"line {line_no}: bad time field {text!r} (minutes out of range)")
    return hours + minutes / 60.0


def parse_physionet_record(text: str, vocabulary: Sequence[str] = PHYSIONET_VARIABLES):
    """Parse one per-patient record file.

    Returns (events, descriptors, skipped) where descriptors holds the
    general-descriptor values (RecordID, Age, ...; Weight only from its 00:00
    descriptor row) and skipped lists parameter names outside the vocabulary.
    Rows with value -1 (the dataset's missing code) are dropped.
    """
    vocab = set(vocabulary)
    events: List[RawEvent] = []
    descriptors: Dict[str, float] = {}
    skipped: List[str] = []
    seen_skipped = set()
    subject = ""

    lines = text.splitlines()
    if not lines:
        raise ParseError("empty record file")
    start = 1 if lines[0].strip().lower().startswith("time,") else 0
    for line_no, line in enumerate(lines[start:], start=start + 1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != 3:
            raise ParseError(f"line {line_no}: expected 3 fields, got {len(fields)}")
        time_text, parameter, value_text = (f.strip() for f in fields)
        if not parameter:
            continue
        t = _parse_hhmm(time_text, line_no)
        try:
            value = float(value_text)
        except ValueError:
            raise ParseError(f"line {line_no}: bad value {value_text!r} for {parameter}")

        if parameter == "RecordID":
            subject = value_text
            descriptors[parameter] = value
            continue
        is_descriptor = parameter in GENERAL_DESCRIPTORS and (parameter != "Weight" or t == 0.0)
        if is_descriptor:
            descriptors[parameter] = value
            continue
        if value == -1:  # dataset convention for "not available"
            continue
        if parameter not in vocab:
            if parameter not in seen_skipped:
                seen_skipped.add(parameter)
                skipped.append(parameter)
            continue
        events.append(RawEvent(subject_id=subject, time=t, variable=parameter, value=value))

    events = [RawEvent(subject_id=subject, time=e.time, variable=e.variable, value=e.value)
              for e in events]
    return events, descriptors, skipped


def parse_outcomes(text: str) -> Dict[str, int]:
    """Outcomes table (RecordID, ..., In-hospital_death) -> label map."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "RecordID" not in reader.fieldnames \
            or "In-hospital_death" not in reader.fieldnames:
        raise SchemaError("outcomes file needs RecordID and In-hospital_death columns")
    labels = {}
    for row in reader:
        labels[row["RecordID"].strip()] = int(float(row["In-hospital_death"]))
    return labels


DEFAULT_LONG_SCHEMA = ("subject_id", "time_hours", "variable", "value")


def parse_long_csv(text: str, schema: Sequence[str] = DEFAULT_LONG_SCHEMA) -> List[RawEvent]:
    """Generic long-format CSV: one event per row, order preserved."""
    id_col, time_col, var_col, val_col = schema
    reader = csv.DictReader(io.StringIO(text))
    have = set(reader.fieldnames or ())
    missing = [c for c in schema if c not in have]
    if missing:
        raise SchemaError(f"long CSV missing columns {missing}, found {sorted(have)}")
    events = []
    for row_idx, row in enumerate(reader):
        try:
            t = float(row[time_col])
            v = float(row[val_col])
        except (TypeError, ValueError):
            raise ParseError(f"row {row_idx}: unparsable numeric "
                             f"({row[time_col]!r}, {row[val_col]!r})")
        if not (np.isfinite(t) and np.isfinite(v)):
            raise ParseError(f"row {row_idx}: non-finite numeric "
                             f"({row[time_col]!r}, {row[val_col]!r})")
        events.append(RawEvent(subject_id=row[id_col], time=t,
                               variable=row[var_col], value=v))
    return events


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def assemble_samples(events: Iterable[RawEvent], labels: Dict[str, int],
                     vocabulary: Sequence[str]):
    """Group events into per-subject samples.

    Events at the same timestamp merge into one row; duplicate
    (time, variable) pairs resolve to the last value in input order. Subjects
    with zero events are excluded and counted in the drop report.
    """
    vocab_index = {name: i for i, name in enumerate(vocabulary)}
    D = len(vocabulary)
    by_subject: Dict[str, List[RawEvent]] = {}
    for e in events:
        if e.variable not in vocab_index:
            raise InvalidInputError(f"event variable {e.variable!r} not in vocabulary")
        by_subject.setdefault(e.subject_id, []).append(e)

    drop_report: List[str] = []
    for sid in labels:
        if sid not in by_subject:
            drop_report.append(f"{sid}: zero events, excluded")

    samples = []
    for sid in sorted(by_subject):
        evs = by_subject[sid]
        cells: Dict[Tuple[float, int], float] = {}
        for e in evs:
            cells[(e.time, vocab_index[e.variable])] = e.value  # last write wins
        times = sorted({t for (t, _) in cells})
        T = len(times)
        time_index = {t: j for j, t in enumerate(times)}
        values = np.zeros((T, D))
        mask = np.zeros((T, D))
        for (t, d), v in cells.items():
            j = time_index[t]
            values[j, d] = v
            mask[j, d] = 1.0
        samples.append(make_sample(sid, np.asarray(times, dtype=np.float64),
                                   values, mask, label=labels.get(sid)))

    dataset = Dataset(samples=tuple(samples), num_variables=D,
                      variable_names=tuple(vocabulary))
    return dataset, drop_report


def load_physionet_directory(directory, outcomes_path=None,
                             vocabulary: Sequence[str] = PHYSIONET_VARIABLES):
    """Read a set-a style directory (one record file per patient).

    Returns (dataset, report) where report collects skipped parameter names
    and dropped subjects. Subjects without an outcome label are dropped when
    an outcomes file is given.
    """
    labels: Dict[str, int] = {}
    if outcomes_path is not None:
        with open(outcomes_path, "r", encoding="utf-8") as f:
            labels = parse_outcomes(f.read())

    all_events: List[RawEvent] = []
    skipped_params: List[str] = []
    dropped: List[str] = []
    names = sorted(n for n in os.listdir(directory) if n.endswith(".txt"))
    if not names:
        raise ParseError(f"no .txt record files in {directory}")
    for name in names:
        path = os.path.join(directory, name)
        with open(path, "r", encoding="utf-8") as f:
            try:
                events, descriptors, skipped = parse_physionet_record(f.read(), vocabulary)
            except ParseError as exc:
                raise ParseError(f"{name}: {exc}") from exc
        sid = events[0].subject_id if events else str(
            int(descriptors.get("RecordID", 0)) or os.path.splitext(name)[0])
        for p in skipped:
            if p not in skipped_params:
                skipped_params.append(p)
        if not events:
            dropped.append(f"{sid}: zero observations, excluded")
            continue
        if labels and sid not in labels:
            dropped.append(f"{sid}: no outcome label, excluded")
            continue
        all_events.extend(events)

    subject_labels = {sid: labels[sid] for sid in {e.subject_id for e in all_events}} \
        if labels else {e.subject_id: None for e in all_events}
    dataset, drops = assemble_samples(all_events, subject_labels, vocabulary)
    report = {"skipped_parameters": skipped_params, "dropped_subjects": dropped + drops}
    return dataset, report


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

_STD_FLOOR = 1e-6


def fit_normalization(train: Dataset, winsor_percentiles=(1.0, 99.0)) -> NormalizationStats:
    """Per-variable winsor bounds and post-clipping mean/std over observed
    entries of the training split only."""
    low_p, high_p = winsor_percentiles
    if not 0.0 <= low_p <= high_p <= 100.0:
        raise InvalidInputError(f"bad winsor percentiles {winsor_percentiles}")
    D = train.num_variables
    mean = np.zeros(D)
    std = np.ones(D)
    lo = np.full(D, -np.inf)
    hi = np.full(D, np.inf)
    flagged: List[int] = []

    columns: List[List[float]] = [[] for _ in range(D)]
    for s in train.samples:
        obs = s.mask == 1
        for d in range(D):
            col = s.values[obs[:, d], d]
            if col.size:
                columns[d].extend(col.tolist())

    for d in range(D):
        col = np.asarray(columns[d], dtype=np.float64)
        if col.size == 0:
            flagged.append(d)
            continue
        lo[d] = np.percentile(col, low_p)
        hi[d] = np.percentile(col, high_p)
        clipped = np.clip(col, lo[d], hi[d])
        mean[d] = clipped.mean()
        s_d = clipped.std()
        if s_d < _STD_FLOOR:
            s_d = _STD_FLOOR
            flagged.append(d)
        std[d] = s_d
    return NormalizationStats(mean=mean, std=std, winsor_low=lo, winsor_high=hi,
                              fit_sample_count=len(train.samples), flagged=flagged)


def apply_normalization(data: Dataset, stats: NormalizationStats) -> Dataset:
    """Clip observed entries to the winsor bounds, then z-transform them.
    Missing entries stay exactly zero; mask and intervals are untouched."""
    if stats.num_variables != data.num_variables:
        raise ShapeError(f"stats for {stats.num_variables} variables applied to "
                         f"dataset with {data.num_variables}")
    out = []
    for s in data.samples:
        clipped = np.clip(s.values, stats.winsor_low, stats.winsor_high)
        z = (clipped - stats.mean) / stats.std
        x = np.where(s.mask == 1, z, 0.0)
        out.append(TimeSeriesSample(subject_id=s.subject_id, timestamps=s.timestamps,
                                    values=x, mask=s.mask, intervals=s.intervals,
                                    label=s.label))
    return Dataset(samples=tuple(out), num_variables=data.num_variables,
                   variable_names=data.variable_names, normalization=stats)


def invert_normalization(data: Dataset, stats: NormalizationStats) -> Dataset:
    """Inverse of the z-transform on observed entries (clipping is lossy and
    is not undone)."""
    if stats.num_variables != data.num_variables:
        raise ShapeError(f"stats for {stats.num_variables} variables applied to "
                         f"dataset with {data.num_variables}")
    out = []
    for s in data.samples:
        x = np.where(s.mask == 1, s.values * stats.std + stats.mean, 0.0)
        out.append(TimeSeriesSample(subject_id=s.subject_id, timestamps=s.timestamps,
                                    values=x, mask=s.mask, intervals=s.intervals,
                                    label=s.label))
    return Dataset(samples=tuple(out), num_variables=data.num_variables,
                   variable_names=data.variable_names, normalization=None)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def make_folds(data: Dataset, k: int, seed: int) -> FoldManifest:
    """Stratified fold assignment: positives are dealt round-robin, negatives
    continue the deal, so fold sizes differ by at most one and per-fold
    positive counts differ by at most one."""
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    labels = []
    for s in data.samples:
        if s.label is None:
            raise StratificationError(f"sample {s.subject_id!r} has no label")
        labels.append(int(s.label))
    labels = np.asarray(labels)
    ids = np.array([s.subject_id for s in data.samples])
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) < k:
        raise StratificationError(f"{len(pos)} positive samples cannot stratify {k} folds")

    rng = np.random.default_rng(seed)
    rng.shuffle(pos)
    rng.shuffle(neg)
    assignments: Dict[str, int] = {}
    for i, idx in enumerate(pos):
        assignments[str(ids[idx])] = i % k
    offset = len(pos)
    for i, idx in enumerate(neg):
        assignments[str(ids[idx])] = (offset + i) % k
    return FoldManifest(k=k, assignments=assignments, seed=seed)
