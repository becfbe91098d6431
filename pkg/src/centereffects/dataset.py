"""Trial data model, CSV ingestion, and structural validation.

A trial dataset is n rows of (covariate vector, center id, treatment arm,
outcome). Center ids are canonicalized to 1..m in first-appearance order at
ingestion; the original labels are kept for round-tripping.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInputError,
    InsufficientDataError,
    MissingDataError,
    ParseError,
    PositivityError,
    SchemaError,
    ShapeError,
)

logger = logging.getLogger(__name__)

#: cell contents treated as missing (case-insensitive, after stripping)
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "."})

DEFAULT_SCHEMA = {
    "center_col": "center",
    "arm_col": "arm",
    "outcome_col": "outcome",
    "covariate_cols": "rest",
}


def _as_float_1d(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-dimensional")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} must be finite with no missing values")
    return a


def _as_int_1d(x, name):
    a = np.asarray(x)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-dimensional")
    if a.dtype.kind == "f":
        if not np.all(np.isfinite(a)) or not np.all(a == np.round(a)):
            raise ShapeError(f"{name} must contain integers only")
    out = a.astype(np.int64)
    if a.dtype.kind not in "iuf" and not np.all(np.asarray(out, dtype=a.dtype) == a):
        raise ShapeError(f"{name} must contain integers only")
    return out


@dataclass(frozen=True)
class TrialDataset:
    """Immutable (X, C, A, Y) container with centers relabeled 1..m."""

    covariates: np.ndarray
    covariate_names: tuple
    center: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    #: original center labels; index c-1 holds the label behind canonical id c
    center_labels: tuple = ()

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.ndim != 2:
            raise ShapeError("covariates must be a 2-d matrix")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "center", _as_int_1d(self.center, "center"))
        object.__setattr__(self, "arm", _as_int_1d(self.arm, "arm"))
        object.__setattr__(self, "outcome", _as_float_1d(self.outcome, "outcome"))

        n = self.outcome.shape[0]
        if n < 1:
            raise EmptyInputError("dataset has no rows")
        for name, arr in (("covariates", cov), ("center", self.center), ("arm", self.arm)):
            if arr.shape[0] != n:
                raise ShapeError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if cov.shape[1] != len(self.covariate_names):
            raise ShapeError("covariate_names length does not match covariates")
        if not np.all(np.isfinite(cov)):
            raise ShapeError("covariates must be finite with no missing values")

        m = int(self.center.max(initial=0))
        if self.center.min(initial=1) < 1 or set(np.unique(self.center)) != set(range(1, m + 1)):
            raise ShapeError("center ids must be contiguous integers 1..m")
        if not self.center_labels:
            object.__setattr__(self, "center_labels", tuple(range(1, m + 1)))
        if len(self.center_labels) != m:
            raise ShapeError("center_labels must have one entry per center")

        for arr in (self.covariates, self.center, self.arm, self.outcome):
            arr.setflags(write=False)

    @property
    def n(self):
        return self.outcome.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    @property
    def m(self):
        return len(self.center_labels)

    @property
    def arms(self):
        """Observed arms, ascending."""
        return tuple(int(a) for a in np.unique(self.arm))

    def original_label(self, c):
        """Original input label behind canonical center id ``c``."""
        if not 1 <= c <= self.m:
            raise ShapeError(f"center {c} out of range 1..{self.m}")
        return self.center_labels[c - 1]

    def covariate(self, name):
        """One covariate column by name."""
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None
        return self.covariates[:, j]


@dataclass(frozen=True)
class CellCounts:
    """Per-(center, arm) sample sizes."""

    counts: np.ndarray
    center_sizes: np.ndarray
    arms: tuple

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        sizes = np.asarray(self.center_sizes, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "center_sizes", sizes)
        object.__setattr__(self, "arms", tuple(int(a) for a in self.arms))
        if counts.shape != (sizes.shape[0], len(self.arms)):
            raise ShapeError("counts table shape does not match centers x arms")
        if np.any(counts < 0) or np.any(counts.sum(axis=1) > sizes):
            raise ShapeError("cell counts must be nonnegative with row sums at most n_c")
        counts.setflags(write=False)
        sizes.setflags(write=False)


def relabel_centers(raw_labels):
    """Map raw labels to canonical ids 1..m by first appearance.

    Returns (canonical id array, tuple of original labels in id order).
    """
    lookup = {}
    ids = np.empty(len(raw_labels), dtype=np.int64)
    for i, lab in enumerate(raw_labels):
        if lab not in lookup:
            lookup[lab] = len(lookup) + 1
        ids[i] = lookup[lab]
    return ids, tuple(lookup)


def from_arrays(covariates, center, arm, outcome, covariate_names=None):
    """Build a TrialDataset from raw arrays, canonicalizing center labels."""
    center = np.asarray(center)
    ids, labels = relabel_centers(center.tolist())
    covariates = np.asarray(covariates, dtype=np.float64)
    if covariates.ndim == 1:
        covariates = covariates.reshape(-1, 1)
    if covariate_names is None:
        covariate_names = tuple(f"x{j + 1}" for j in range(covariates.shape[1]))
    return TrialDataset(covariates, covariate_names, ids, arm, outcome, labels)


def _parse_float(raw, column, row):
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(
            f"non-numeric value {raw!r} in column {column!r}, data row {row}"
        ) from None
    if not np.isfinite(value):
        raise ParseError(
            f"non-finite value {raw!r} in column {column!r}, data row {row}"
        )
    return value


def _parse_arm(raw, column, row):
    try:
        return int(raw)
    except ValueError:
        raise ParseError(
            f"arm value {raw!r} is not an integer in column {column!r}, data row {row}"
        ) from None


def _resolve_schema(header, schema):
    merged = dict(DEFAULT_SCHEMA)
    merged.update(schema or {})
    seen = {}
    for idx, name in enumerate(header):
        if name in seen:
            raise SchemaError(f"duplicate column {name!r} in header")
        seen[name] = idx

    special = {}
    for key in ("center_col", "arm_col", "outcome_col"):
        col = merged[key]
        if col not in seen:
            raise SchemaError(f"missing required column {col!r} (schema key {key})")
        special[key] = col

    cov_cols = merged["covariate_cols"]
    if isinstance(cov_cols, str):
        if cov_cols not in ("rest", "all remaining"):
            raise SchemaError(
                "covariate_cols must be an explicit list or the string 'rest'"
            )
        used = set(special.values())
        cov_cols = [c for c in header if c not in used]
    else:
        cov_cols = list(cov_cols)
        for col in cov_cols:
            if col not in seen:
                raise SchemaError(f"missing covariate column {col!r}")
    if not cov_cols:
        raise SchemaError("schema must name at least one covariate column")
    overlap = set(cov_cols) & set(special.values())
    if overlap:
        raise SchemaError(f"columns {sorted(overlap)} used both as covariate and role")
    return special, cov_cols, seen


def load_csv(path, schema=None, drop_incomplete_rows=False):
    """Load a trial dataset from a UTF-8, comma-separated, headered CSV file.

    ``schema`` maps roles to column names: keys center_col, arm_col,
    outcome_col, covariate_cols (list of names, or "rest" for all remaining
    columns). Missing cells reject the file unless ``drop_incomplete_rows``.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        special, cov_cols, positions = _resolve_schema(header, schema)

        center_idx = positions[special["center_col"]]
        arm_idx = positions[special["arm_col"]]
        outcome_idx = positions[special["outcome_col"]]
        cov_idx = [positions[c] for c in cov_cols]
        used_idx = [center_idx, arm_idx, outcome_idx] + cov_idx
        used_names = [special["center_col"], special["arm_col"], special["outcome_col"]] + cov_cols

        centers = []
        arms = []
        outcomes = []
        covs = []
        dropped = 0
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ParseError(
                    f"data row {row_no} has {len(row)} fields, expected {len(header)}"
                )
            cells = [row[j].strip() for j in used_idx]
            missing = [
                used_names[k] for k, cell in enumerate(cells) if cell.lower() in MISSING_TOKENS
            ]
            if missing:
                if drop_incomplete_rows:
                    dropped += 1
                    continue
                raise MissingDataError(
                    f"missing value in column {missing[0]!r}, data row {row_no} "
                    "(set drop_incomplete_rows to delete such rows)"
                )
            raw_center = cells[0]
            try:
                center_label = int(raw_center)
            except ValueError:
                center_label = raw_center
            centers.append(center_label)
            arms.append(_parse_arm(cells[1], special["arm_col"], row_no))
            outcomes.append(_parse_float(cells[2], special["outcome_col"], row_no))
            covs.append(
                [_parse_float(cells[3 + k], cov_cols[k], row_no) for k in range(len(cov_cols))]
            )

    if not outcomes:
        raise EmptyInputError(f"{path}: no data rows")
    if dropped:
        logger.warning("dropped %d incomplete row(s) from %s", dropped, path)

    ids, labels = relabel_centers(centers)
    return TrialDataset(
        covariates=np.asarray(covs, dtype=np.float64),
        covariate_names=tuple(cov_cols),
        center=ids,
        arm=np.asarray(arms, dtype=np.int64),
        outcome=np.asarray(outcomes, dtype=np.float64),
        center_labels=labels,
    )


def save_csv(data, path, schema=None):
    """Write a dataset back to CSV so that load_csv reproduces it bit-exactly.

    Floats are written with repr round-tripping; centers are written under
    their original labels.
    """
    merged = dict(DEFAULT_SCHEMA)
    merged.update(schema or {})
    header = [merged["center_col"], merged["arm_col"], merged["outcome_col"]]
    header += list(data.covariate_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [
                str(data.original_label(int(data.center[i]))),
                str(int(data.arm[i])),
                repr(float(data.outcome[i])),
            ]
            row += [repr(float(v)) for v in data.covariates[i]]
            writer.writerow(row)


def cell_counts(data, arms=None):
    """n_{c,a} table over centers 1..m and the given (default observed) arms."""
    if arms is None:
        arms = data.arms
    counts = np.zeros((data.m, len(arms)), dtype=np.int64)
    for j, a in enumerate(arms):
        in_arm = data.arm == a
        counts[:, j] = np.bincount(data.center[in_arm], minlength=data.m + 1)[1:]
    sizes = np.bincount(data.center, minlength=data.m + 1)[1:]
    if counts.sum() != data.n and arms == data.arms:
        raise ShapeError("arm values outside the declared arm set")
    return CellCounts(counts=counts, center_sizes=sizes, arms=arms)


def validate_positivity(data, arms=None):
    """Check every (center, arm) cell is nonempty; return the counts table.

    Raises PositivityError listing the empty (center, arm) pairs otherwise.
    """
    if data.n < 1:
        raise InsufficientDataError("empty dataset")
    table = cell_counts(data, arms=arms)
    empty = [
        (c + 1, table.arms[j])
        for c in range(table.counts.shape[0])
        for j in range(len(table.arms))
        if table.counts[c, j] == 0
    ]
    if empty:
        pairs = ", ".join(f"(center {c}, arm {a})" for c, a in empty)
        raise PositivityError(f"empty treatment cells: {pairs}", cells=empty)
    return table
