"""Multi-series observation tables: ingestion, validation, missing-value policy.

A dataset is a flat table in which the reserved column "ID" groups rows into
contiguous series, "time" (optional) is checked for regular spacing and then
ignored, and "state" (optional) carries known states for semi-supervised
fitting. Response cells may be missing; covariate cells are filled by the
last-then-next non-missing value in the same series.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

RESERVED = ("ID", "time", "state")

# Missing-value sentinel in CSV files: empty cell or the literal string "NA"
# (case-sensitive).
NA_STRINGS = ("", "NA")


def _is_na(cell: str) -> bool:
    return cell in NA_STRINGS


@dataclass(frozen=True)
class Dataset:
    """Immutable multi-series table.

    frame holds the typed columns: responses as float (NaN = missing),
    numeric covariates as float, categorical covariates and ID as str,
    state as float (NaN = unknown). series lists (label, start, stop)
    row ranges, contiguous and in file order.
    """

    frame: pd.DataFrame
    response_names: tuple[str, ...]
    covariate_names: tuple[str, ...]
    categorical: tuple[str, ...] = ()
    series: tuple[tuple[str, int, int], ...] = ()
    time_values: tuple[str, ...] | None = None

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def n_series(self) -> int:
        return len(self.series)

    @property
    def series_labels(self) -> list[str]:
        return [label for label, _, _ in self.series]

    def series_id_per_row(self) -> np.ndarray:
        out = np.empty(self.n_rows, dtype=object)
        for label, start, stop in self.series:
            out[start:stop] = label
        return out

    def series_index_per_row(self) -> np.ndarray:
        out = np.empty(self.n_rows, dtype=np.int64)
        for m, (_, start, stop) in enumerate(self.series):
            out[start:stop] = m
        return out

    def time_index(self) -> np.ndarray:
        """0-based position of each row within its series."""
        out = np.empty(self.n_rows, dtype=np.int64)
        for _, start, stop in self.series:
            out[start:stop] = np.arange(stop - start)
        return out

    def series_starts(self) -> np.ndarray:
        return np.array([start for _, start, _ in self.series], dtype=np.int64)

    def response(self, name: str) -> np.ndarray:
        if name not in self.response_names:
            raise ValueError(f"unknown response column {name!r}")
        return self.frame[name].to_numpy(dtype=float)

    def covariate(self, name: str) -> np.ndarray:
        """Numeric covariates as float array, categorical ones as str array."""
        if name not in self.covariate_names:
            raise ValueError(f"unknown covariate column {name!r}")
        if name in self.categorical:
            return self.frame[name].to_numpy(dtype=object)
        return self.frame[name].to_numpy(dtype=float)

    def factor_values(self, name: str) -> np.ndarray:
        """String values of a factor column; "ID" is implicitly a factor."""
        if name == "ID":
            return self.series_id_per_row()
        if name in self.categorical:
            return self.frame[name].to_numpy(dtype=object)
        raise ValueError(
            f"column {name!r} is not declared categorical; factors must be "
            "listed under 'categorical' in the model spec (or be 'ID')"
        )

    def has_known_states(self) -> bool:
        return "state" in self.frame.columns

    def known_state(self) -> np.ndarray:
        """Known state per row (1-based), -1 where unknown."""
        if not self.has_known_states():
            return np.full(self.n_rows, -1, dtype=np.int64)
        vals = self.frame["state"].to_numpy(dtype=float)
        out = np.full(self.n_rows, -1, dtype=np.int64)
        ok = np.isfinite(vals)
        out[ok] = vals[ok].astype(np.int64)
        return out

    def response_matrix(self) -> np.ndarray:
        """n x d float matrix of responses, NaN for missing cells."""
        return np.column_stack([self.response(v) for v in self.response_names])


def _split_into_series(ids: list[str]) -> tuple[tuple[str, int, int], ...]:
    series: list[tuple[str, int, int]] = []
    seen: set[str] = set()
    start = 0
    for i in range(1, len(ids) + 1):
        if i == len(ids) or ids[i] != ids[start]:
            label = ids[start]
            if label in seen:
                raise ValueError(
                    f"series ID {label!r} appears in non-contiguous blocks; "
                    "rows of one series must be adjacent (the loader does not re-sort)"
                )
            seen.add(label)
            series.append((label, start, i))
            start = i
    return tuple(series)


def _parse_numeric_column(cells: list[str], name: str) -> np.ndarray:
    out = np.empty(len(cells), dtype=float)
    for i, cell in enumerate(cells):
        if _is_na(cell):
            out[i] = np.nan
            continue
        try:
            out[i] = float(cell)
        except ValueError:
            # +2: header line plus 1-based indexing
            raise ValueError(
                f"non-numeric value {cell!r} in column {name!r} at file line {i + 2}"
            ) from None
    return out


def _check_time_spacing(cells: list[str], series) -> None:
    try:
        t = np.asarray([float(c) for c in cells], dtype=float)
    except ValueError:
        try:
            t = pd.to_datetime(list(cells)).astype("int64").to_numpy() / 1e9
        except (ValueError, TypeError):
            warnings.warn("could not parse 'time' column; spacing not checked")
            return
    for label, start, stop in series:
        if stop - start < 3:
            continue
        d = np.diff(t[start:stop])
        if d.size and not np.allclose(d, d[0], rtol=1e-6, atol=1e-9):
            warnings.warn(
                f"'time' column is not regularly spaced in series {label!r}; "
                "the column is otherwise ignored"
            )


def load_csv(
    path,
    response_names,
    covariate_names,
    categorical=(),
) -> Dataset:
    """Read a CSV file into a Dataset.

    Missing values are empty cells or the literal "NA". Without an "ID"
    column all rows form a single series. String-valued covariates must be
    declared in `categorical`; anything else must parse as a number.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if raw.shape[1] == 0 or len(raw) == 0:
        raise ValueError(f"empty data file: {path}")
    response_names = tuple(response_names)
    covariate_names = tuple(covariate_names)
    categorical = tuple(categorical)

    for name in response_names + covariate_names:
        if name not in raw.columns:
            raise ValueError(f"required column {name!r} not found in {path}")
    for name in categorical:
        if name not in covariate_names:
            raise ValueError(
                f"categorical column {name!r} is not among the covariates"
            )

    if "ID" in raw.columns:
        ids = [str(v) for v in raw["ID"]]
    else:
        ids = ["1"] * len(raw)
    series = _split_into_series(ids)

    cols: dict[str, object] = {"ID": ids}
    for name in response_names:
        cols[name] = _parse_numeric_column(list(raw[name]), name)
    for name in covariate_names:
        cells = list(raw[name])
        if name in categorical:
            cols[name] = [None if _is_na(c) else c for c in cells]
        else:
            cols[name] = _parse_numeric_column(cells, name)

    time_values = None
    if "time" in raw.columns:
        time_values = tuple(str(v) for v in raw["time"])
        _check_time_spacing(list(raw["time"]), series)

    if "state" in raw.columns:
        states = _parse_numeric_column(list(raw["state"]), "state")
        finite = states[np.isfinite(states)]
        if finite.size and (np.any(finite != np.round(finite)) or np.any(finite < 1)):
            raise ValueError("'state' column must contain positive integers or NA")
        cols["state"] = states

    frame = pd.DataFrame(cols)
    return Dataset(
        frame=frame,
        response_names=response_names,
        covariate_names=covariate_names,
        categorical=categorical,
        series=series,
        time_values=time_values,
    )


def from_arrays(
    responses: dict,
    covariates: dict | None = None,
    series_ids=None,
    known_states=None,
    categorical=(),
) -> Dataset:
    """Build a Dataset directly from arrays (the in-memory twin of load_csv)."""
    responses = {k: np.asarray(v, dtype=float) for k, v in responses.items()}
    covariates = {
        k: (np.asarray(v, dtype=object) if k in categorical else np.asarray(v, dtype=float))
        for k, v in (covariates or {}).items()
    }
    n = len(next(iter(responses.values()))) if responses else len(next(iter(covariates.values())))
    ids = ["1"] * n if series_ids is None else [str(v) for v in series_ids]
    if len(ids) != n:
        raise ValueError("series_ids length does not match data length")
    series = _split_into_series(ids)
    cols: dict[str, object] = {"ID": ids}
    cols.update(responses)
    cols.update(covariates)
    if known_states is not None:
        ks = np.asarray(known_states, dtype=float)
        cols["state"] = ks
    frame = pd.DataFrame(cols)
    return Dataset(
        frame=frame,
        response_names=tuple(responses.keys()),
        covariate_names=tuple(covariates.keys()),
        categorical=tuple(categorical),
        series=series,
    )


def fill_covariate_gaps(d: Dataset) -> Dataset:
    """Fill missing covariate cells: last non-missing value in the series,
    or the next one when nothing precedes. Responses are left untouched."""
    if not d.covariate_names:
        return d
    frame = d.frame.copy()
    for name in d.covariate_names:
        col = frame[name]
        if name in d.categorical:
            missing = col.isna().to_numpy()
        else:
            missing = ~np.isfinite(col.to_numpy(dtype=float))
        if not missing.any():
            continue
        filled = col.copy()
        for label, start, stop in d.series:
            seg = col.iloc[start:stop]
            if seg.isna().all() if name in d.categorical else not np.isfinite(
                seg.to_numpy(dtype=float)
            ).any():
                raise ValueError(
                    f"covariate {name!r} has no observed value in series {label!r}"
                )
            filled.iloc[start:stop] = seg.ffill().bfill()
        frame[name] = filled
    return replace(d, frame=frame)


def split_series(d: Dataset) -> list[Dataset]:
    """Per-series datasets; concatenating their rows in order reproduces d."""
    out = []
    for label, start, stop in d.series:
        sub = d.frame.iloc[start:stop].reset_index(drop=True)
        tv = d.time_values[start:stop] if d.time_values is not None else None
        out.append(
            replace(
                d,
                frame=sub,
                series=((label, 0, stop - start),),
                time_values=tv,
            )
        )
    return out


def _format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if not np.isfinite(v):
            return ""
        if v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return format(v, ".17g")
    return str(v)


def write_csv(d: Dataset, path) -> None:
    """Write a Dataset back to CSV; floats carry 17 significant digits so
    load_csv(write_csv(d)) reproduces d on the value level."""
    cols = ["ID"] + list(d.response_names) + list(d.covariate_names)
    if "state" in d.frame.columns:
        cols.append("state")
    lines = [",".join(cols)]
    for i in range(d.n_rows):
        row = []
        for c in cols:
            v = d.frame[c].iloc[i]
            if c not in ("ID",) and c not in d.categorical and not isinstance(v, str):
                v = float(v) if v is not None and np.isfinite(float(v)) else None
            row.append(_format_cell(v))
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
