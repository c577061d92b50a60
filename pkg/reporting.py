"""Delimited text output for metrics, predictive series and plot data."""

import logging
import os
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# 17 significant digits round-trip every finite double
FLOAT_FORMAT = "%.17g"


def ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_table(table: Union[pd.DataFrame, Sequence[Dict]], path: str, columns: Optional[List[str]] = None) -> str:
    """Write rows (a DataFrame or a list of dicts) as CSV at full precision."""
    frame = table if isinstance(table, pd.DataFrame) else pd.DataFrame(list(table), columns=columns)
    ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="NA")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def matrix_frame(matrix: np.ndarray, labels: Optional[List[str]] = None) -> pd.DataFrame:
    """Square matrix as a labelled frame (first column holds the row label)."""
    matrix = np.asarray(matrix, dtype=float)
    labels = labels or [str(i + 1) for i in range(matrix.shape[0])]
    frame = pd.DataFrame(matrix, columns=labels)
    frame.insert(0, "series", labels)
    return frame


def paths_frame(paths: np.ndarray, prefix: str, date_labels: Optional[List[str]] = None) -> pd.DataFrame:
    """k x n array of paths as one column per path, dates as rows."""
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    frame = pd.DataFrame(paths.T, columns=[f"{prefix}_{j + 1}" for j in range(paths.shape[0])])
    frame.insert(0, "date", date_labels if date_labels is not None else list(range(paths.shape[1])))
    return frame
