"""Interval-censored dataset representation and CSV ingestion.

Every subject carries a censoring class, an interval (L, R], and a
covariate vector.  Left-censored subjects are canonicalized to the
interval (0, R]; right-censored subjects to (L, +inf).  The CSV dialect
is ``left,right,status,<covariates...>`` with status one of
``left | interval | right``; the right field of a right-censored row may
be empty or ``inf``.  Lines starting with ``#`` are comments.
"""

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError

__all__ = [
    "Censoring",
    "IntervalObservation",
    "Dataset",
    "parse_dataset",
    "serialize_dataset",
    "validate",
    "ValidationReport",
    "load_breast_cosmesis",
]


class Censoring(enum.IntEnum):
    LEFT = 0
    INTERVAL = 1
    RIGHT = 2


_STATUS_NAMES = {Censoring.LEFT: "left", Censoring.INTERVAL: "interval", Censoring.RIGHT: "right"}
_STATUS_FROM_NAME = {v: k for k, v in _STATUS_NAMES.items()}


@dataclass(frozen=True)
class IntervalObservation:
    """One subject: censoring class, interval endpoints, covariates."""

    status: Censoring
    left: float
    right: float
    covariates: np.ndarray

    def __post_init__(self):
        cov = np.atleast_1d(np.asarray(self.covariates, dtype=float))
        if cov.ndim != 1 or not np.all(np.isfinite(cov)):
            raise DataError("covariates must be a finite vector")
        cov.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        left, right = float(self.left), float(self.right)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        if self.status == Censoring.LEFT:
            if left != 0.0:
                raise DataError("left-censored observation must have left = 0")
            if not (math.isfinite(right) and right > 0):
                raise DataError("left-censored observation needs finite right > 0")
        elif self.status == Censoring.INTERVAL:
            if not (math.isfinite(left) and math.isfinite(right) and 0 < left < right):
                raise DataError("interval-censored observation needs 0 < left < right < inf")
        elif self.status == Censoring.RIGHT:
            if not (math.isfinite(left) and left > 0):
                raise DataError("right-censored observation needs finite left > 0")
            if not math.isinf(right):
                raise DataError("right-censored observation must have right = +inf")
        else:
            raise DataError(f"unknown censoring status {self.status!r}")


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of observations with shared covariate names."""

    observations: tuple
    covariate_names: tuple
    # dense views used by the fitters, built once
    status: np.ndarray = field(init=False, repr=False, compare=False)
    left: np.ndarray = field(init=False, repr=False, compare=False)
    right: np.ndarray = field(init=False, repr=False, compare=False)
    covariates: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        obs = tuple(self.observations)
        names = tuple(str(c) for c in self.covariate_names)
        if not obs:
            raise DataError("dataset is empty")
        d = len(names)
        if any(o.covariates.shape != (d,) for o in obs):
            raise DataError("all observations must share the covariate dimension")
        if all(o.status == Censoring.RIGHT for o in obs):
            raise DataError("all observations are right-censored; likelihood is degenerate")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "covariate_names", names)
        for attr, arr in (
            ("status", np.array([int(o.status) for o in obs])),
            ("left", np.array([o.left for o in obs])),
            ("right", np.array([o.right for o in obs])),
            ("covariates", np.array([o.covariates for o in obs])),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)

    @property
    def n(self) -> int:
        return len(self.observations)

    @property
    def d(self) -> int:
        return len(self.covariate_names)

    def finite_endpoints(self) -> np.ndarray:
        """Pooled finite nonzero endpoints (knot material)."""
        vals = np.concatenate([self.left, self.right])
        return vals[np.isfinite(vals) & (vals > 0)]

    def subset(self, indices) -> "Dataset":
        """New dataset holding the given rows (used by the bootstrap)."""
        return Dataset(
            observations=tuple(self.observations[i] for i in indices),
            covariate_names=self.covariate_names,
        )


def _parse_right_field(raw: str) -> float:
    raw = raw.strip().lower()
    if raw in ("", "inf", "+inf", "infinity", "na"):
        return math.inf
    return float(raw)


def parse_dataset(source) -> Dataset:
    """Parse a dataset from a CSV string, text stream, or file path."""
    if isinstance(source, str) and "\n" not in source and "," not in source:
        with open(source, "r", encoding="utf-8") as fh:
            return parse_dataset(fh)
    stream = io.StringIO(source) if isinstance(source, str) else source

    rows = []
    line_numbers = []
    for lineno, line in enumerate(stream, start=1):
        if line.strip() == "" or line.lstrip().startswith("#"):
            continue
        rows.append(line)
        line_numbers.append(lineno)
    if not rows:
        raise DataError("no data rows found")

    reader = csv.reader(rows)
    header = next(reader)
    header_line = line_numbers[0]
    header = [h.strip() for h in header]
    if len(header) < 3 or [h.lower() for h in header[:3]] != ["left", "right", "status"]:
        raise DataError(
            f"line {header_line}: header must start with 'left,right,status', got {header!r}"
        )
    covariate_names = header[3:]
    if not covariate_names:
        raise DataError(f"line {header_line}: at least one covariate column is required")

    observations = []
    for fields, lineno in zip(reader, line_numbers[1:]):
        if len(fields) != len(header):
            raise DataError(
                f"line {lineno}: expected {len(header)} fields, got {len(fields)}"
            )
        status_raw = fields[2].strip().lower()
        if status_raw not in _STATUS_FROM_NAME:
            raise DataError(f"line {lineno}: unknown status {fields[2]!r}")
        status = _STATUS_FROM_NAME[status_raw]
        try:
            left = float(fields[0])
            right = _parse_right_field(fields[1])
            cov = [float(v) for v in fields[3:]]
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if status == Censoring.INTERVAL and left >= right:
            raise DataError(f"line {lineno}: left >= right for interval-censored row")
        try:
            observations.append(
                IntervalObservation(status=status, left=left, right=right, covariates=cov)
            )
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return Dataset(observations=tuple(observations), covariate_names=tuple(covariate_names))


def serialize_dataset(ds: Dataset) -> str:
    """Emit the CSV dialect accepted by parse_dataset (exact round-trip)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["left", "right", "status", *ds.covariate_names])
    for o in ds.observations:
        right = "inf" if math.isinf(o.right) else repr(float(o.right))
        writer.writerow([repr(float(o.left)), right, _STATUS_NAMES[o.status],
                         *[repr(float(v)) for v in o.covariates]])
    return out.getvalue()


@dataclass
class ValidationReport:
    n: int
    censoring_counts: dict
    min_interval_width: float
    covariate_ranges: list
    warnings: list

    def __str__(self):
        lines = [f"n = {self.n}"]
        for name, count in self.censoring_counts.items():
            lines.append(f"  {name}: {count} ({100.0 * count / self.n:.1f}%)")
        lines.append(f"  min interval width: {self.min_interval_width:g}")
        for name, lo, hi in self.covariate_ranges:
            lines.append(f"  covariate {name}: [{lo:g}, {hi:g}]")
        for w in self.warnings:
            lines.append(f"  warning: {w}")
        return "\n".join(lines)


def validate(ds: Dataset) -> ValidationReport:
    """Diagnostics on a parsed dataset.  Warns, never fails."""
    counts = {
        name: int(np.sum(ds.status == int(code)))
        for code, name in _STATUS_NAMES.items()
    }
    interval_mask = ds.status == int(Censoring.INTERVAL)
    widths = ds.right[interval_mask] - ds.left[interval_mask]
    min_width = float(widths.min()) if widths.size else math.inf
    warnings = []
    if min_width < 1e-8:
        warnings.append(f"minimum interval width {min_width:g} is below 1e-8")
    ranges = []
    for j, name in enumerate(ds.covariate_names):
        col = ds.covariates[:, j]
        lo, hi = float(col.min()), float(col.max())
        ranges.append((name, lo, hi))
        if lo == hi:
            warnings.append(f"covariate {name!r} is constant ({lo:g})")
    return ValidationReport(
        n=ds.n,
        censoring_counts=counts,
        min_interval_width=min_width,
        covariate_ranges=ranges,
        warnings=warnings,
    )


def load_breast_cosmesis() -> Dataset:
    """The bundled breast cosmesis study: 94 subjects, binary treatment
    indicator (1 = radiation plus adjuvant chemotherapy)."""
    text = resources.files("transfit.data").joinpath("breast_cosmesis.csv").read_text()
    return parse_dataset(text)
