"""Per-series features used by the detector selector."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..utils.validation import check_series


@dataclass(frozen=True)
class SeriesFeatures:
    mean: float
    variance: float
    spikiness: float
    seasonality_strength: float
    trend_strength: float
    length: int
    #: lag with the strongest autocorrelation peak, None when no peak exists
    period: Optional[int] = None

    def to_dict(self):
        return asdict(self)


def _clamp01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom <= 0:
        return 0.0
    return float(np.dot(a, b) / denom)


def detrend(values: np.ndarray) -> np.ndarray:
    """Residual of a least-squares line through ``values``."""
    n = values.size
    if n < 3:
        return values - values.mean()
    t = np.arange(n, dtype=float)
    slope, intercept = np.polyfit(t, values, 1)
    return values - (slope * t + intercept)


def trend_strength(values: np.ndarray) -> float:
    var = float(np.var(values))
    if var <= 0 or values.size < 3:
        return 0.0
    return _clamp01(1.0 - float(np.var(detrend(values))) / var)


def seasonality(values: np.ndarray, max_period: Optional[int] = None):
    """Highest autocorrelation peak of the detrended series.

    Candidate periods run from 2 to ``n // 3`` so at least three cycles are
    observed. Multiples of the true period peak almost as high, so the
    shortest peak within 10% of the strongest one wins.
    Returns ``(strength, period)``.
    """
    n = values.size
    hi = n // 3 if max_period is None else min(n // 3, max_period)
    if hi < 2:
        return 0.0, None
    r = detrend(values)
    if np.var(r) <= 0:
        return 0.0, None
    acf = np.array([_pearson(r[:-lag], r[lag:]) for lag in range(1, hi + 2)])
    peaks = [(lag, acf[lag - 1]) for lag in range(2, hi + 1)
             if acf[lag - 1] > acf[lag - 2] and acf[lag - 1] >= acf[lag] and acf[lag - 1] > 0]
    if not peaks:
        return 0.0, None
    best = max(c for _, c in peaks)
    lag, c = next((lag, c) for lag, c in peaks if c >= 0.9 * best)
    return _clamp01(c), lag


def extract_features(series, max_period: Optional[int] = None) -> SeriesFeatures:
    series = check_series(series)
    x = series.values.astype(float)
    var = float(np.var(x))
    median = float(np.median(x))
    q1, q3 = np.percentile(x, [25, 75])
    iqr = float(q3 - q1)
    spikiness = float(np.max(np.abs(x - median)) / iqr) if iqr > 0 else 0.0
    season, period = seasonality(x, max_period) if var > 0 else (0.0, None)
    return SeriesFeatures(
        mean=float(np.mean(x)),
        variance=var,
        spikiness=spikiness,
        seasonality_strength=season,
        trend_strength=trend_strength(x),
        length=len(series),
        period=period,
    )
