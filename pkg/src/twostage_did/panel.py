"""Panel data model: tidy unit-by-period observations with treatment timing.

A unit belongs to a treatment group identified by its first treatment
period ``g``; never-treated units carry ``g = inf`` (the same convention
is used for relative event time). Treatment status and event time are
always derived from ``g``, never stored independently, so the invariant
``treated == (0 <= rel_time < inf)`` holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateUnitTimeError,
    EmptyFileError,
    InvalidGroupValueError,
    InvalidWeightError,
    MissingColumnError,
    NonIntegerTimeError,
    NonNumericOutcomeError,
    NoUntreatedObservationsError,
)

NEVER_TREATED = math.inf


class Observation(NamedTuple):
    """One row of a panel: unit label, period, outcome and derived
    treatment status (``rel_time`` is ``inf`` for never-treated units)."""

    unit: object
    time: int
    outcome: float
    treated: bool
    rel_time: float


@dataclass(frozen=True)
class ColumnSpec:
    """Column names used when reading or writing a panel CSV.

    ``never_sentinel`` optionally names a numeric group value (for example
    0 or 9999) that should be read as never-treated, in addition to the
    always-accepted "inf"/"Inf"/empty spellings.
    """

    unit: str = "unit"
    time: str = "time"
    outcome: str = "outcome"
    group: str = "group"
    cluster: str | None = None
    weight: str | None = None
    delimiter: str = ","
    never_sentinel: float | None = None


@dataclass(frozen=True)
class PanelDataset:
    """Immutable tidy panel.

    Attributes
    ----------
    unit, time, outcome
        Per-row unit label, integer period and outcome value.
    group
        Per-row first-treatment period of the row's unit; ``inf`` marks a
        never-treated unit.
    cluster
        Per-row cluster label for inference; defaults to the unit label.
    weights
        Nonnegative per-row estimation weights; default 1.
    unit_index, time_index
        Maps from unit label / period to contiguous codes starting at 0.
    unit_codes, time_codes
        Per-row integer codes into the two indices.
    """

    unit: np.ndarray
    time: np.ndarray
    outcome: np.ndarray
    group: np.ndarray
    cluster: np.ndarray
    weights: np.ndarray
    unit_index: Mapping = field(repr=False)
    time_index: Mapping = field(repr=False)
    unit_codes: np.ndarray = field(repr=False)
    time_codes: np.ndarray = field(repr=False)

    @property
    def n_obs(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_units(self) -> int:
        return len(self.unit_index)

    @property
    def n_periods(self) -> int:
        return len(self.time_index)

    @property
    def rel_time(self) -> np.ndarray:
        """Periods elapsed since first treatment (``inf`` if never treated)."""
        rel = self.time.astype(float) - self.group
        rel[np.isinf(self.group)] = NEVER_TREATED
        return rel

    @property
    def treated(self) -> np.ndarray:
        """Active-treatment indicator: group has started by the row's period."""
        return self.time.astype(float) >= self.group

    @property
    def group_of_unit(self) -> dict:
        """First-treatment period per unit label (``inf`` = never treated)."""
        first = np.empty(self.n_units)
        # groups are constant within unit (validated), so last write wins
        first[self.unit_codes] = self.group
        labels = list(self.unit_index.keys())
        return {labels[c]: first[c] for c in range(self.n_units)}

    @property
    def rows(self) -> Iterator[Observation]:
        """Iterate observations in row order."""
        rel = self.rel_time
        treated = self.treated
        for i in range(self.n_obs):
            yield Observation(
                unit=self.unit[i],
                time=int(self.time[i]),
                outcome=float(self.outcome[i]),
                treated=bool(treated[i]),
                rel_time=float(rel[i]),
            )

    def __post_init__(self):
        for arr in (self.unit, self.time, self.outcome, self.group,
                    self.cluster, self.weights, self.unit_codes, self.time_codes):
            arr.setflags(write=False)


def _factorize(values: np.ndarray) -> tuple[np.ndarray, dict]:
    """Codes in first-occurrence order plus label -> code index."""
    codes, uniques = pd.factorize(values, use_na_sentinel=False)
    index = {label: i for i, label in enumerate(uniques)}
    return codes.astype(np.int64), index


def build_dataset(
    unit: Sequence,
    time: Sequence,
    outcome: Sequence,
    group: Sequence,
    cluster: Sequence | None = None,
    weights: Sequence | None = None,
) -> PanelDataset:
    """Validate raw columns and assemble a :class:`PanelDataset`.

    Raises the panel-level data errors on duplicate (unit, time) pairs,
    non-numeric or missing outcomes, non-integer periods, inconsistent
    group values within a unit, or invalid weights.
    """
    unit = np.asarray(unit)
    n = unit.shape[0]
    if n == 0:
        raise EmptyFileError("panel has no rows")

    time_arr = np.asarray(time)
    if not np.issubdtype(time_arr.dtype, np.number):
        raise NonIntegerTimeError("time column is not numeric")
    time_f = time_arr.astype(float)
    if np.any(~np.isfinite(time_f)) or np.any(time_f != np.round(time_f)):
        raise NonIntegerTimeError("time column must contain integer periods")
    time_i = time_f.astype(np.int64)

    outcome_arr = np.asarray(outcome)
    if not np.issubdtype(outcome_arr.dtype, np.number):
        raise NonNumericOutcomeError("outcome column is not numeric")
    outcome_f = outcome_arr.astype(float)
    n_bad = int(np.sum(~np.isfinite(outcome_f)))
    if n_bad:
        raise NonNumericOutcomeError(
            f"outcome column has {n_bad} missing or non-finite values; "
            "rows with missing outcomes are rejected"
        )

    group_arr = np.asarray(group, dtype=float)
    finite = np.isfinite(group_arr)
    if np.any(np.isnan(group_arr)):
        raise InvalidGroupValueError("group column has missing values")
    if np.any(group_arr[finite] != np.round(group_arr[finite])):
        raise InvalidGroupValueError("finite group values must be integer periods")

    unit_codes, unit_index = _factorize(unit)
    time_codes, time_index = _factorize(time_i)

    pair = unit_codes * (time_codes.max() + 1) + time_codes
    if np.unique(pair).shape[0] != n:
        raise DuplicateUnitTimeError("duplicate (unit, time) pairs in panel")

    # group must be constant within unit
    _, first_idx = np.unique(unit_codes, return_index=True)
    mismatch = group_arr != group_arr[first_idx][unit_codes]
    if mismatch.any():
        labels = list(unit_index.keys())
        bad = unit_codes[np.flatnonzero(mismatch)[0]]
        raise InvalidGroupValueError(
            f"unit {labels[bad]!r} has inconsistent group values"
        )

    if cluster is None:
        cluster_arr = unit.copy()
    else:
        cluster_arr = np.asarray(cluster)
        if cluster_arr.shape[0] != n:
            raise InvalidGroupValueError("cluster column length mismatch")

    if weights is None:
        weights_arr = np.ones(n)
    else:
        weights_arr = np.asarray(weights, dtype=float)
        if np.any(~np.isfinite(weights_arr)) or np.any(weights_arr < 0):
            raise InvalidWeightError("weights must be finite and nonnegative")
        if not np.any(weights_arr > 0):
            raise InvalidWeightError("at least one weight must be positive")

    return PanelDataset(
        unit=unit,
        time=time_i,
        outcome=outcome_f,
        group=group_arr,
        cluster=cluster_arr,
        weights=weights_arr,
        unit_index=unit_index,
        time_index=time_index,
        unit_codes=unit_codes,
        time_codes=time_codes,
    )


def _parse_group_column(raw: pd.Series, sentinel: float | None) -> np.ndarray:
    """Map "inf"/"Inf"/empty/configured sentinel to inf, else numeric."""
    values = np.empty(len(raw), dtype=float)
    for i, v in enumerate(raw):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            values[i] = NEVER_TREATED
            continue
        if isinstance(v, str):
            s = v.strip()
            if s == "" or s.lower() == "inf":
                values[i] = NEVER_TREATED
                continue
            try:
                values[i] = float(s)
            except ValueError:
                raise InvalidGroupValueError(f"cannot parse group value {v!r}")
        else:
            values[i] = float(v)
    if sentinel is not None:
        values[values == sentinel] = NEVER_TREATED
    return values


def load_csv(path: str | Path, schema: ColumnSpec = ColumnSpec()) -> PanelDataset:
    """Read and validate a panel CSV.

    The group column accepts "inf", "Inf", empty cells or the schema's
    numeric sentinel as never-treated markers. Extra columns are ignored.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(
            path,
            sep=schema.delimiter,
            dtype={schema.group: str},
            float_precision="round_trip",
        )
    except pd.errors.EmptyDataError:
        raise EmptyFileError(f"{path} is empty")
    if frame.shape[0] == 0:
        raise EmptyFileError(f"{path} has a header but no rows")

    required = [schema.unit, schema.time, schema.outcome, schema.group]
    optional = [c for c in (schema.cluster, schema.weight) if c is not None]
    missing = [c for c in required + optional if c not in frame.columns]
    if missing:
        raise MissingColumnError(f"missing columns in {path}: {', '.join(missing)}")

    outcome_raw = pd.to_numeric(frame[schema.outcome], errors="coerce")
    if outcome_raw.isna().any():
        bad = int(outcome_raw.isna().sum())
        raise NonNumericOutcomeError(
            f"outcome column {schema.outcome!r} has {bad} non-numeric or missing values"
        )

    time_raw = pd.to_numeric(frame[schema.time], errors="coerce")
    if time_raw.isna().any():
        raise NonIntegerTimeError(f"time column {schema.time!r} is not numeric")

    group_values = _parse_group_column(frame[schema.group], schema.never_sentinel)

    return build_dataset(
        unit=frame[schema.unit].to_numpy(),
        time=time_raw.to_numpy(),
        outcome=outcome_raw.to_numpy(),
        group=group_values,
        cluster=frame[schema.cluster].to_numpy() if schema.cluster else None,
        weights=(
            pd.to_numeric(frame[schema.weight], errors="coerce").to_numpy()
            if schema.weight
            else None
        ),
    )


def write_csv(
    data: PanelDataset,
    path: str | Path,
    schema: ColumnSpec = ColumnSpec(),
    extra_columns: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Write a panel in the canonical column order.

    Columns are unit,time,outcome,group and, when they carry non-default
    values, cluster and weight; never-treated groups are written as "inf".
    ``extra_columns`` are appended after the canonical ones.
    """
    def exact(values: np.ndarray) -> list[str]:
        # repr round-trips float64 exactly; pandas' default does not
        return [repr(float(v)) for v in values]

    cols: dict = {
        schema.unit: data.unit,
        schema.time: data.time,
        schema.outcome: exact(data.outcome),
        schema.group: [
            "inf" if math.isinf(g) else str(int(g)) for g in data.group
        ],
    }
    if schema.cluster is not None or np.any(data.cluster != data.unit):
        cols[schema.cluster or "cluster"] = data.cluster
    if schema.weight is not None or np.any(data.weights != 1.0):
        cols[schema.weight or "weight"] = exact(data.weights)
    if extra_columns:
        cols.update(
            {
                name: exact(np.asarray(values, dtype=float))
                for name, values in extra_columns.items()
            }
        )
    frame = pd.DataFrame(cols)
    frame.to_csv(path, sep=schema.delimiter, index=False)


def derive_event_time(data: PanelDataset, anticipation: int = 0) -> PanelDataset:
    """Shift treatment starts earlier by ``anticipation`` periods.

    Each first-treatment period g becomes g - anticipation, so rows within
    the anticipation window count as treated and are excluded from the
    first-stage sample; never-treated units are unchanged. Shifting by a
    then b equals shifting by a + b.
    """
    if anticipation < 0:
        raise ValueError("anticipation must be nonnegative")
    if anticipation == 0:
        return data
    shifted = data.group.copy()
    finite = np.isfinite(shifted)
    shifted[finite] = shifted[finite] - anticipation
    return replace(data, group=shifted)


def untreated_mask(data: PanelDataset) -> np.ndarray:
    """Boolean mask of untreated / not-yet-treated rows (D = 0).

    Raises :class:`NoUntreatedObservationsError` when no row qualifies,
    since the first stage is then unidentifiable.
    """
    mask = ~data.treated
    if not mask.any():
        raise NoUntreatedObservationsError(
            "no untreated or not-yet-treated observations; "
            "the first-stage fixed effects are unidentifiable"
        )
    return mask
