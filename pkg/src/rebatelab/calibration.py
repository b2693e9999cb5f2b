"""Estimate P0* and sigma from a close-price series."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

MIN_ROWS = 30


class MalformedInput(ValueError):
    def __init__(self, message, row=None):
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


def _find(header, *names):
    lowered = [h.strip().lower() for h in header]
    for name in names:
        if name in lowered:
            return lowered.index(name)
    return None


def read_closes(path) -> np.ndarray:
    """Close prices in file order.  Row numbers in errors count the header as row 1."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedInput("empty file", row=1)
        i_date = _find(header, "date", "timestamp", "time")
        i_close = _find(header, "close", "adj close", "adj_close", "price")
        if i_date is None or i_close is None:
            raise MalformedInput("header needs a date column and a close column", row=1)
        closes = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) <= max(i_date, i_close):
                raise MalformedInput("missing fields", row=row_no)
            if not row[i_date].strip():
                raise MalformedInput("empty date", row=row_no)
            try:
                value = float(row[i_close])
            except ValueError:
                raise MalformedInput(f"close {row[i_close]!r} is not a number", row=row_no) from None
            if not math.isfinite(value) or value <= 0:
                raise MalformedInput(f"close {value} must be positive and finite", row=row_no)
            closes.append(value)
    if len(closes) < MIN_ROWS:
        raise MalformedInput(f"need at least {MIN_ROWS} price rows, found {len(closes)}")
    return np.array(closes)


def calibrate(price_csv_path, bar_interval: float = 1.0) -> tuple[float, float]:
    """P0* = last close; sigma = sample SD of close-to-close changes per unit time.

    A deliberately simple estimator: arithmetic increments, no drift removal
    beyond the sample mean, no microstructure correction.
    """
    if not bar_interval > 0:
        raise ValueError("bar_interval must be positive")
    closes = read_closes(price_csv_path)
    inc = np.diff(closes)
    sigma = float(np.std(inc, ddof=1) / math.sqrt(bar_interval))
    return float(closes[-1]), sigma
