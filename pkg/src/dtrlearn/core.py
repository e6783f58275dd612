"""Domain types, longitudinal dataset container, and history construction.

Data model
----------
A patient trajectory holds baseline covariates measured before the first
treatment, time-varying covariates per step, a binary treatment per step,
and one final real-valued outcome (larger is better).

The wide CSV format has one row per patient:

    id, <baseline names...>, then for each step t = 1..T:
    <covariate name>_<t> for every covariate, a<t>, and finally y.

Categorical columns are stored internally as level indices; the level
strings live in the column metadata, so writing a dataset back to CSV
reproduces the original file byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidationError, SchemaError

logger = logging.getLogger(__name__)

KINDS = ("continuous", "categorical", "binary")

_RESERVED_NAMES = re.compile(r"^(id|y|a\d+)$")


# =============================================================================
# Column metadata
# =============================================================================

@dataclass(frozen=True)
class ColumnMeta:
    """Name and kind of one dataset column.

    For categorical columns `levels` lists the raw level strings in
    encoding order; the first level is the dropped one-hot reference.
    """

    name: str
    kind: str
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r} for {self.name!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise SchemaError(f"categorical column {self.name!r} has no levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"categorical column {self.name!r} has duplicate levels")
        elif self.levels is not None:
            raise SchemaError(f"{self.kind} column {self.name!r} must not declare levels")
        if _RESERVED_NAMES.match(self.name):
            raise SchemaError(f"column name {self.name!r} is reserved")

    @property
    def encoded_width(self) -> int:
        if self.kind == "categorical":
            return len(self.levels) - 1
        return 1

    def encoded_names(self) -> list[str]:
        if self.kind == "categorical":
            return [f"{self.name}={lvl}" for lvl in self.levels[1:]]
        return [self.name]

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.levels is not None:
            out["levels"] = list(self.levels)
        return out

    @staticmethod
    def from_dict(d: dict) -> "ColumnMeta":
        levels = tuple(d["levels"]) if d.get("levels") is not None else None
        return ColumnMeta(name=d["name"], kind=d["kind"], levels=levels)


# =============================================================================
# Trajectories and datasets
# =============================================================================

@dataclass
class Trajectory:
    """One patient: baseline vector, T x p covariate matrix, T treatments, outcome."""

    patient_id: str
    baseline: np.ndarray
    covariates: np.ndarray
    treatments: np.ndarray
    outcome: float

    def validate(self, m: int, p: int, horizon: int) -> None:
        if self.baseline.shape != (m,):
            raise DataValidationError(
                f"patient {self.patient_id}: baseline has shape {self.baseline.shape}, expected ({m},)")
        if self.covariates.shape != (horizon, p):
            raise DataValidationError(
                f"patient {self.patient_id}: covariates have shape {self.covariates.shape}, "
                f"expected ({horizon}, {p})")
        if self.treatments.shape != (horizon,):
            raise DataValidationError(
                f"patient {self.patient_id}: treatments have length {len(self.treatments)}, "
                f"expected {horizon}")
        if not np.all(np.isin(self.treatments, (0, 1))):
            raise DataValidationError(
                f"patient {self.patient_id}: treatment values must be 0 or 1")
        if not (np.all(np.isfinite(self.baseline)) and np.all(np.isfinite(self.covariates))
                and np.isfinite(self.outcome)):
            raise DataValidationError(f"patient {self.patient_id}: non-finite value")


@dataclass
class LongitudinalDataset:
    """A collection of trajectories sharing one schema."""

    trajectories: list[Trajectory]
    baseline_meta: list[ColumnMeta]
    covariate_meta: list[ColumnMeta]
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise SchemaError("horizon must be >= 1")
        if not self.trajectories:
            raise DataValidationError("dataset needs at least one trajectory")
        names = [c.name for c in self.baseline_meta] + [c.name for c in self.covariate_meta]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique within a dataset")
        m, p = len(self.baseline_meta), len(self.covariate_meta)
        for traj in self.trajectories:
            traj.validate(m, p, self.horizon)
        ids = [t.patient_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise DataValidationError("duplicate patient ids")

    @property
    def n_patients(self) -> int:
        return len(self.trajectories)

    @property
    def patient_ids(self) -> list[str]:
        return [t.patient_id for t in self.trajectories]

    def baseline_matrix(self) -> np.ndarray:
        return np.array([t.baseline for t in self.trajectories], dtype=float)

    def covariate_cube(self) -> np.ndarray:
        """N x T x p array of raw (index-coded) covariate values."""
        return np.array([t.covariates for t in self.trajectories], dtype=float)

    def treatment_matrix(self) -> np.ndarray:
        return np.array([t.treatments for t in self.trajectories], dtype=int)

    def outcomes(self) -> np.ndarray:
        return np.array([t.outcome for t in self.trajectories], dtype=float)

    def subset(self, indices: np.ndarray | list[int]) -> "LongitudinalDataset":
        return LongitudinalDataset(
            trajectories=[self.trajectories[i] for i in indices],
            baseline_meta=self.baseline_meta,
            covariate_meta=self.covariate_meta,
            horizon=self.horizon,
        )

    def equals(self, other: "LongitudinalDataset") -> bool:
        if (self.horizon != other.horizon
                or self.baseline_meta != other.baseline_meta
                or self.covariate_meta != other.covariate_meta
                or self.n_patients != other.n_patients):
            return False
        for a, b in zip(self.trajectories, other.trajectories):
            if (a.patient_id != b.patient_id
                    or not np.array_equal(a.baseline, b.baseline)
                    or not np.array_equal(a.covariates, b.covariates)
                    or not np.array_equal(a.treatments, b.treatments)
                    or a.outcome != b.outcome):
                return False
        return True


@dataclass
class HistoryMatrix:
    """Encoded per-step design: row i is h_it = (baseline, past treatments, covariates 1..t)."""

    step: int
    values: np.ndarray
    column_names: list[str] = field(repr=False)
    row_ids: list[str] = field(repr=False)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# =============================================================================
# Encoding
# =============================================================================

def _encode_column(values: np.ndarray, meta: ColumnMeta) -> np.ndarray:
    """Encode one raw column (N,) into its (N, width) design block.

    Categorical values are level indices; anything outside [0, n_levels)
    encodes as all zeros (same as the reference level) with a warning.
    """
    if meta.kind != "categorical":
        return values.reshape(-1, 1).astype(float)
    n_levels = len(meta.levels)
    idx = values.astype(int)
    bad = (idx < 0) | (idx >= n_levels)
    if np.any(bad):
        logger.warning(
            "column %s: %d value(s) outside the known levels map to the all-zero encoding",
            meta.name, int(bad.sum()))
        idx = np.where(bad, 0, idx)  # reference row, then zeroed below
    block = np.zeros((len(values), n_levels - 1), dtype=float)
    nonref = idx > 0
    keep = nonref & ~bad
    block[np.nonzero(keep)[0], idx[keep] - 1] = 1.0
    return block


def encoded_width(metas: list[ColumnMeta]) -> int:
    return sum(m.encoded_width for m in metas)


def build_history(dataset: LongitudinalDataset, t: int) -> HistoryMatrix:
    """Build the encoded history design matrix for step t.

    Column order is the baseline block, then past treatments a1..a(t-1),
    then one covariate block per step 1..t. The column set of step t is a
    strict subset of step t+1 and the encoding is deterministic.

    Args:
        dataset: Source data.
        t: Step index in 1..horizon.

    Returns:
        HistoryMatrix with shape (N, m_enc + (t-1) + t * p_enc).

    Raises:
        ValueError: If t is out of range.
    """
    if not 1 <= t <= dataset.horizon:
        raise ValueError(f"step {t} out of range 1..{dataset.horizon}")
    blocks: list[np.ndarray] = []
    names: list[str] = []

    base = dataset.baseline_matrix()
    for j, meta in enumerate(dataset.baseline_meta):
        blocks.append(_encode_column(base[:, j], meta))
        names.extend(meta.encoded_names())

    treat = dataset.treatment_matrix()
    for s in range(1, t):
        blocks.append(treat[:, s - 1].reshape(-1, 1).astype(float))
        names.append(f"a{s}")

    cube = dataset.covariate_cube()
    for s in range(1, t + 1):
        for j, meta in enumerate(dataset.covariate_meta):
            blocks.append(_encode_column(cube[:, s - 1, j], meta))
            names.extend(f"{n}_{s}" for n in meta.encoded_names())

    values = np.hstack(blocks) if blocks else np.zeros((dataset.n_patients, 0))
    return HistoryMatrix(step=t, values=values, column_names=names,
                         row_ids=dataset.patient_ids)


# =============================================================================
# Schema handling
# =============================================================================

def parse_schema(schema: dict) -> tuple[list[ColumnMeta], list[ColumnMeta], int]:
    """Parse a schema descriptor into metadata lists and the horizon.

    The descriptor is `{"baseline": [...], "covariates": [...], "horizon": T}`
    where each column entry is `{"name", "kind", "levels"?}`. A categorical
    entry may omit `levels`, in which case they are discovered from the data
    at load time in first-observed order.
    """
    for key in ("baseline", "covariates", "horizon"):
        if key not in schema:
            raise SchemaError(f"schema missing key {key!r}")
    horizon = schema["horizon"]
    if not isinstance(horizon, int) or horizon < 1:
        raise SchemaError(f"invalid horizon {horizon!r}")

    def build(entries) -> list[ColumnMeta]:
        metas = []
        for entry in entries:
            if "name" not in entry or "kind" not in entry:
                raise SchemaError(f"column entry {entry!r} needs 'name' and 'kind'")
            kind = entry["kind"]
            levels = entry.get("levels")
            if kind == "categorical" and levels is None:
                # placeholder; discovery fills it in
                metas.append(ColumnMeta(entry["name"], "categorical", ("?",)))
            else:
                metas.append(ColumnMeta(entry["name"], kind,
                                        tuple(levels) if levels is not None else None))
        return metas
    return build(schema["baseline"]), build(schema["covariates"]), horizon


def schema_to_dict(baseline_meta: list[ColumnMeta], covariate_meta: list[ColumnMeta],
                   horizon: int) -> dict:
    return {
        "baseline": [m.to_dict() for m in baseline_meta],
        "covariates": [m.to_dict() for m in covariate_meta],
        "horizon": horizon,
    }


def load_schema(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    # allow pointing at a manifest that embeds the schema
    if "schema" in doc and "baseline" not in doc:
        doc = doc["schema"]
    return doc


def csv_header(baseline_meta: list[ColumnMeta], covariate_meta: list[ColumnMeta],
               horizon: int) -> list[str]:
    header = ["id"] + [m.name for m in baseline_meta]
    for t in range(1, horizon + 1):
        header.extend(f"{m.name}_{t}" for m in covariate_meta)
        header.append(f"a{t}")
    header.append("y")
    if len(set(header)) != len(header):
        raise SchemaError("expanded column names collide; rename the offending columns")
    return header


# =============================================================================
# CSV ingestion and export
# =============================================================================

def _parse_float(raw: str, column: str, row: int) -> float:
    raw = raw.strip()
    if raw == "":
        raise DataValidationError(f"row {row}: missing value in column {column!r}")
    try:
        return float(raw)
    except ValueError:
        raise DataValidationError(
            f"row {row}: non-numeric value {raw!r} in continuous column {column!r}") from None


def _parse_treatment(raw: str, column: str, row: int) -> int:
    raw = raw.strip()
    if raw not in ("0", "1"):
        raise DataValidationError(
            f"row {row}: treatment column {column!r} has value {raw!r}, expected 0 or 1")
    return int(raw)


def load_csv(path, schema: dict,
             meta_override: tuple[list[ColumnMeta], list[ColumnMeta]] | None = None,
             ) -> LongitudinalDataset:
    """Load a wide-format CSV into a validated dataset.

    Args:
        path: CSV file path.
        schema: Schema descriptor (see `parse_schema`).
        meta_override: Optional (baseline_meta, covariate_meta) from a fitted
            bundle. Categorical values are then mapped against these training
            levels; unseen levels get index -1 and encode as all zeros.

    Raises:
        SchemaError: Missing or mismatched columns.
        DataValidationError: Non-numeric continuous values (with row number),
            treatments outside {0, 1}, or missing cells.
    """
    baseline_meta, covariate_meta, horizon = parse_schema(schema)
    if meta_override is not None:
        baseline_meta, covariate_meta = meta_override

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        rows = list(reader)

    expected = csv_header(baseline_meta, covariate_meta, horizon)
    col_index = {name: i for i, name in enumerate(header)}
    for name in expected:
        if name not in col_index:
            raise SchemaError(f"missing column {name!r}")

    if not rows:
        raise DataValidationError(f"{path}: no data rows")

    def cell(row_vals, name, row_no) -> str:
        i = col_index[name]
        if i >= len(row_vals):
            raise DataValidationError(f"row {row_no}: too few fields")
        return row_vals[i]

    # Discover categorical levels in first-observed order unless given.
    def needs_discovery(meta: ColumnMeta) -> bool:
        return meta.kind == "categorical" and meta.levels == ("?",)

    if meta_override is None:
        discovered: dict[str, list[str]] = {}
        for j, meta in enumerate(baseline_meta):
            if needs_discovery(meta):
                seen = discovered.setdefault(meta.name, [])
                for r, row_vals in enumerate(rows, start=1):
                    v = cell(row_vals, meta.name, r).strip()
                    if v not in seen:
                        seen.append(v)
        for meta in covariate_meta:
            if needs_discovery(meta):
                seen = discovered.setdefault(meta.name, [])
                for r, row_vals in enumerate(rows, start=1):
                    for t in range(1, horizon + 1):
                        v = cell(row_vals, f"{meta.name}_{t}", r).strip()
                        if v not in seen:
                            seen.append(v)
        baseline_meta = [
            ColumnMeta(m.name, m.kind, tuple(discovered[m.name])) if needs_discovery(m) else m
            for m in baseline_meta]
        covariate_meta = [
            ColumnMeta(m.name, m.kind, tuple(discovered[m.name])) if needs_discovery(m) else m
            for m in covariate_meta]

    def decode(meta: ColumnMeta, raw: str, column: str, row_no: int) -> float:
        if meta.kind == "categorical":
            raw = raw.strip()
            if raw == "":
                raise DataValidationError(f"row {row_no}: missing value in column {column!r}")
            try:
                return float(meta.levels.index(raw))
            except ValueError:
                logger.warning("row %d: unseen level %r in column %r", row_no, raw, column)
                return -1.0
        if meta.kind == "binary":
            val = _parse_float(raw, column, row_no)
            if val not in (0.0, 1.0):
                raise DataValidationError(
                    f"row {row_no}: binary column {column!r} has value {raw!r}")
            return val
        return _parse_float(raw, column, row_no)

    trajectories = []
    for r, row_vals in enumerate(rows, start=1):
        pid = cell(row_vals, "id", r).strip()
        base = np.array([decode(m, cell(row_vals, m.name, r), m.name, r)
                         for m in baseline_meta], dtype=float)
        cov = np.empty((horizon, len(covariate_meta)), dtype=float)
        treats = np.empty(horizon, dtype=int)
        for t in range(1, horizon + 1):
            for j, m in enumerate(covariate_meta):
                name = f"{m.name}_{t}"
                cov[t - 1, j] = decode(m, cell(row_vals, name, r), name, r)
            treats[t - 1] = _parse_treatment(cell(row_vals, f"a{t}", r), f"a{t}", r)
        outcome = _parse_float(cell(row_vals, "y", r), "y", r)
        trajectories.append(Trajectory(pid, base, cov, treats, outcome))

    return LongitudinalDataset(trajectories, baseline_meta, covariate_meta, horizon)


def _format_value(meta: ColumnMeta, value: float) -> str:
    if meta.kind == "categorical":
        idx = int(value)
        if 0 <= idx < len(meta.levels):
            return meta.levels[idx]
        return "?"
    if meta.kind == "binary":
        return str(int(value))
    return repr(float(value))


def write_csv(dataset: LongitudinalDataset, path) -> None:
    """Write a dataset in the wide CSV format; `load_csv` reads it back bit-identically."""
    header = csv_header(dataset.baseline_meta, dataset.covariate_meta, dataset.horizon)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for traj in dataset.trajectories:
            row = [traj.patient_id]
            row.extend(_format_value(m, traj.baseline[j])
                       for j, m in enumerate(dataset.baseline_meta))
            for t in range(1, dataset.horizon + 1):
                row.extend(_format_value(m, traj.covariates[t - 1, j])
                           for j, m in enumerate(dataset.covariate_meta))
                row.append(str(int(traj.treatments[t - 1])))
            row.append(repr(float(traj.outcome)))
            writer.writerow(row)
