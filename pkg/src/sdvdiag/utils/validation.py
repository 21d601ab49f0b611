"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from ..exceptions import EmptySeries, InsufficientHistory
from ..telemetry import SeriesKey, TimeSeries

_ANON = SeriesKey("value", "anonymous", "series")


def check_series(X, min_length=1) -> TimeSeries:
    """Coerce ``X`` to a :class:`TimeSeries`.

    Accepts a TimeSeries, a 1-D array-like of values (timestamps become
    ``0..n-1`` seconds in ms) or a sequence of ``(timestamp, value)`` pairs.
    """
    if isinstance(X, TimeSeries):
        series = X
    else:
        arr = np.asarray(X, dtype=float)
        if arr.ndim == 1:
            series = TimeSeries(_ANON, np.arange(arr.size, dtype=np.int64) * 1000, arr)
        elif arr.ndim == 2 and arr.shape[1] == 2:
            series = TimeSeries.from_samples(_ANON, arr.tolist())
        else:
            raise ValueError(f"expected a 1-D series or (n, 2) samples, got shape {arr.shape}")
    if not np.all(np.isfinite(series.values)):
        raise ValueError("series contains non-finite values")
    if len(series) == 0:
        raise EmptySeries("series is empty")
    if len(series) < min_length:
        raise InsufficientHistory(f"series has {len(series)} samples, need at least {min_length}")
    return series


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fraction(value, name, low=0.0, high=1.0):
    if not isinstance(value, numbers.Real) or not (low <= value <= high):
        raise ValueError(f"{name} must lie in [{low}, {high}], got {value!r}")
    return float(value)
