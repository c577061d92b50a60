"""
Return and factor CSV ingestion.

Layout: header row of series labels (first header cell names the date column),
then one row per date with the date label in the first column.
"""

import csv
import logging
from typing import List

import numpy as np
import pandas as pd

from errors import DomainError, ParseError
from model_core import ReturnsPanel
from reporting import FLOAT_FORMAT, ensure_parent

logger = logging.getLogger(__name__)


def _read_rows(path: str) -> List[List[str]]:
    try:
        with open(path, "r", newline="") as f:
            return [row for row in csv.reader(f) if row]
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e


def load_returns_csv(path: str, demean: bool = False) -> ReturnsPanel:
    """Read an m-series panel; optionally demean every series."""
    rows = _read_rows(path)
    if len(rows) < 2:
        raise ParseError(f"{path} needs a header and at least one data row")
    header = rows[0]
    series_labels = [label.strip() for label in header[1:]]
    if not series_labels:
        raise ParseError(f"{path} has no series columns", line=1)
    seen = set()
    for label in series_labels:
        if label in seen:
            raise ParseError(f"duplicate series label {label!r}", line=1, column=label)
        seen.add(label)

    width = len(header)
    dates: List[str] = []
    seen_dates = set()
    values = np.empty((len(rows) - 1, width - 1))
    for k, row in enumerate(rows[1:]):
        line = k + 2
        if len(row) != width:
            raise ParseError(f"row has {len(row)} fields, header has {width}", line=line)
        date = row[0].strip()
        if date in seen_dates:
            raise ParseError(f"duplicate date label {date!r}", line=line)
        dates.append(date)
        seen_dates.add(date)
        for j, cell in enumerate(row[1:]):
            try:
                values[k, j] = float(cell)
            except ValueError:
                reason = "missing value" if not cell.strip() else f"non-numeric value {cell!r}"
                raise ParseError(reason, line=line, column=series_labels[j]) from None

    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ParseError("non-finite value", line=int(bad[0]) + 2, column=series_labels[bad[1]])

    panel_values = values.T
    if demean:
        panel_values = panel_values - panel_values.mean(axis=1, keepdims=True)
    panel = ReturnsPanel(values=panel_values, series_labels=series_labels, date_labels=dates, demeaned=demean)
    logger.info(f"Loaded {path}: m={panel.m} series, T={panel.T} dates, demeaned={demean}")
    return panel


def write_returns_csv(panel: ReturnsPanel, path: str) -> str:
    ensure_parent(path)
    panel.to_frame().to_csv(path, float_format=FLOAT_FORMAT, index_label="date")
    logger.info(f"Wrote {panel.m} x {panel.T} panel to {path}")
    return path


def load_factor_csv(path: str, standardize: bool = True) -> np.ndarray:
    """Observed factors as an r x T matrix; empty cells become 0."""
    try:
        frame = pd.read_csv(path, index_col=0, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise ParseError(f"cannot read factor file {path}: {e}") from e
    try:
        frame = frame.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as e:
        raise ParseError(f"non-numeric value in factor file {path}: {e}") from e
    values = frame.fillna(0.0).to_numpy(dtype=float).T
    if standardize:
        sd = values.std(axis=1, keepdims=True)
        if np.any(sd == 0.0):
            raise DomainError(f"factor file {path} has a constant column; cannot standardize")
        values = (values - values.mean(axis=1, keepdims=True)) / sd
    logger.info(f"Loaded {values.shape[0]} observed factors over {values.shape[1]} dates from {path}")
    return values
