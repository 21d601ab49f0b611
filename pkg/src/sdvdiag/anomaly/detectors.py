"""The detector pool: four classical univariate anomaly detectors.

Every detector maps a series to a per-point severity score (NaN where
the detector is still warming up) and flags points whose score exceeds
``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..exceptions import InsufficientHistory, UnknownDetector
from ..telemetry import SeriesKey
from ..utils.validation import check_series
from .features import seasonality

_EPS = 1e-9


@dataclass(frozen=True)
class Anomaly:
    series_key: SeriesKey
    timestamp: int
    score: float
    detector: str

    def to_dict(self):
        return {
            "series": self.series_key.label,
            "timestamp": self.timestamp,
            "score": round(self.score, 6),
            "detector": self.detector,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(SeriesKey.parse(d["series"]), int(d["timestamp"]), float(d["score"]), d["detector"])


def _scale_floor(center):
    return _EPS * np.maximum(1.0, np.abs(center))


class BaseDetector(BaseEstimator):
    """Common ``fit``/``score_samples``/``predict``/``detect`` surface."""

    name = "base"

    def min_length(self, series=None) -> int:
        raise NotImplementedError

    def _scores(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def fit(self, X, y=None):
        series = check_series(X)
        self.n_warmup_ = self.min_length(series) - 1
        return self

    def _check(self, X):
        series = check_series(X)
        need = self.min_length(series)
        if len(series) < need:
            raise InsufficientHistory(
                f"{self.name} needs at least {need} samples, series has {len(series)}")
        return series

    def score_samples(self, X) -> np.ndarray:
        series = self._check(X)
        return self._scores(series.values)

    def predict(self, X) -> np.ndarray:
        """Boolean anomaly mask."""
        scores = self.score_samples(X)
        with np.errstate(invalid="ignore"):
            return np.nan_to_num(scores, nan=0.0) > self.k

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)

    def detect(self, X) -> list:
        series = self._check(X)
        scores = self.fit(series)._scores(series.values)
        flagged = np.flatnonzero(np.nan_to_num(scores, nan=0.0) > self.k)
        return [
            Anomaly(series.key, int(series.timestamps[i]), float(scores[i]), self.name)
            for i in flagged
        ]


class RollingZScore(BaseDetector):
    """Distance from the trailing-window mean in units of trailing std.

    The window excludes the point being scored.
    """

    name = "rolling_zscore"

    def __init__(self, window=60, k=3.0):
        self.window = window
        self.k = k

    def min_length(self, series=None):
        return self.window + 1

    def _scores(self, x):
        w = self.window
        scores = np.full(x.size, np.nan)
        if x.size <= w:
            return scores
        win = sliding_window_view(x, w)[:-1]
        mean = win.mean(axis=1)
        std = win.std(axis=1, ddof=1)
        scale = np.maximum(std, _scale_floor(mean))
        scores[w:] = np.abs(x[w:] - mean) / scale
        return scores


class IQRDetector(BaseDetector):
    """Tukey-fence distance over a trailing window, in IQR units.

    A window with zero IQR scores 0 (degenerate-series guard), so constant
    series never raise anomalies.
    """

    name = "iqr"

    def __init__(self, window=60, k=2.0):
        self.window = window
        self.k = k

    def min_length(self, series=None):
        return self.window + 1

    def _scores(self, x):
        w = self.window
        scores = np.full(x.size, np.nan)
        if x.size <= w:
            return scores
        win = sliding_window_view(x, w)[:-1]
        q1, q3 = np.percentile(win, [25, 75], axis=1)
        iqr = q3 - q1
        cur = x[w:]
        dist = np.maximum(np.maximum(q1 - cur, cur - q3), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(iqr > 0, dist / np.where(iqr > 0, iqr, 1.0), 0.0)
        scores[w:] = s
        return scores


class EWMAResidual(BaseDetector):
    """One-step-ahead EWMA forecast residual over its EW standard deviation."""

    name = "ewma_residual"

    def __init__(self, alpha=0.3, k=3.0, warmup=20):
        self.alpha = alpha
        self.k = k
        self.warmup = warmup

    def min_length(self, series=None):
        return self.warmup + 1

    def _scores(self, x):
        a = self.alpha
        scores = np.full(x.size, np.nan)
        if x.size == 0:
            return scores
        level, var = float(x[0]), 0.0
        for i in range(1, x.size):
            r = float(x[i]) - level
            if i >= self.warmup:
                scale = max(np.sqrt(var), _EPS * max(1.0, abs(level)))
                scores[i] = abs(r) / scale
            var = (1.0 - a) * var + a * r * r
            level += a * r
        return scores


class SeasonalResidual(BaseDetector):
    """Robust z-score of the residual after removing a per-phase median profile.

    ``period=None`` estimates the period from the autocorrelation peak and
    falls back to 1 (a global robust z-score) when the series shows no
    seasonality above ``min_strength``.
    """

    name = "seasonal_residual"

    def __init__(self, period=None, k=3.0, min_strength=0.3):
        self.period = period
        self.k = k
        self.min_strength = min_strength

    def _resolve_period(self, x) -> int:
        if self.period is not None:
            return int(self.period)
        strength, period = seasonality(np.asarray(x, dtype=float))
        if period is None or strength < self.min_strength:
            return 1
        return int(period)

    def min_length(self, series=None):
        if self.period is not None:
            return max(2 * int(self.period), 4)
        if hasattr(self, "period_"):
            return max(2 * self.period_, 4)
        if series is not None:
            return max(2 * self._resolve_period(series.values), 4)
        return 4

    def fit(self, X, y=None):
        series = check_series(X)
        x = series.values
        self.period_ = self._resolve_period(x)
        phases = np.arange(x.size) % self.period_
        self.profile_ = np.array([np.median(x[phases == p]) for p in range(self.period_)])
        self.n_warmup_ = 0
        return self

    def _scores(self, x):
        check_is_fitted(self, "profile_")
        resid = x - self.profile_[np.arange(x.size) % self.period_]
        center = np.median(resid)
        mad = 1.4826 * np.median(np.abs(resid - center))
        scale = max(mad, _EPS * max(1.0, abs(center), float(np.max(np.abs(x)))))
        return np.abs(resid - center) / scale

    def score_samples(self, X):
        series = self._check(X)
        if not hasattr(self, "profile_"):
            self.fit(series)
        return self._scores(series.values)


DETECTORS = {
    "rolling_zscore": RollingZScore,
    "iqr": IQRDetector,
    "ewma_residual": EWMAResidual,
    "seasonal_residual": SeasonalResidual,
}
#: fixed order; used to break ties everywhere a detector is chosen
POOL_ORDER = tuple(DETECTORS)
DEFAULT_DETECTOR = "rolling_zscore"


def make_detector(name: str, params=None) -> BaseDetector:
    try:
        cls = DETECTORS[name]
    except KeyError:
        raise UnknownDetector(f"unknown detector {name!r}; pool is {', '.join(POOL_ORDER)}") from None
    return cls(**(params or {}))


def detect(series, detector: str = DEFAULT_DETECTOR, params=None) -> list:
    """Run one pool detector and return time-ordered anomalies."""
    return make_detector(detector, params).detect(series)


def warmup_length(series=None, params_by_detector=None) -> int:
    """Smallest series length every pool detector accepts."""
    params_by_detector = params_by_detector or {}
    return max(make_detector(n, params_by_detector.get(n)).min_length(series) for n in POOL_ORDER)
