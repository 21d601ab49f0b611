"""Weighted causal edges between metric series.

Discovery is pluggable through :data:`DISCOVERY_METHODS`. The default
method scores a directed pair ``x -> y`` by the strongest absolute
Pearson correlation between ``x`` shifted back by ``lag`` and ``y`` for
``lag`` in ``1..max_lag``. Lag 0 is never considered.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InsufficientData, TooShort, ZeroVariance
from .telemetry import NODE_SERVICE, SeriesKey, TimeSeries

DEFAULT_MAX_LAG = 5
DEFAULT_WEIGHT_THRESHOLD = 0.4
DEFAULT_MAX_GAP = 5


@dataclass(frozen=True, order=True)
class CausalEdge:
    source: SeriesKey
    target: SeriesKey
    weight: float
    lag: int

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("causal edge endpoints must differ")
        if not (0.0 < self.weight <= 1.0):
            raise ValueError(f"causal weight must lie in (0, 1], got {self.weight}")
        if self.lag < 0:
            raise ValueError("lag must be non-negative")


@dataclass(frozen=True)
class CausalModel:
    method: str
    params: Mapping
    edges: tuple = ()
    fitted_on_version: int = 0
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))
        thr = self.params.get("weight_threshold")
        if thr is not None and any(e.weight < thr for e in self.edges):
            raise ValueError("causal model holds an edge below its weight threshold")

    @property
    def edge_map(self) -> dict:
        return {(e.source, e.target): e for e in self.edges}

    def to_edge_list(self) -> str:
        """Tab-separated ``from, to, weight, lag`` lines, sorted."""
        lines = ["from\tto\tweight\tlag"]
        for e in self.edges:
            lines.append(f"{e.source.label}\t{e.target.label}\t{e.weight:.6f}\t{e.lag}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text: str, method="lagged_correlation", params=None, **kw):
        edges = []
        for line in text.splitlines()[1:]:
            if not line.strip():
                continue
            a, b, w, lag = line.split("\t")
            edges.append(CausalEdge(SeriesKey.parse(a), SeriesKey.parse(b), float(w), int(lag)))
        return cls(method, params or {}, tuple(edges), **kw)


# --------------------------------------------------------------------------
# alignment

def common_grid(series_set: Sequence[TimeSeries]) -> np.ndarray:
    """Shared sampling grid: median interval over the common time window."""
    diffs = [np.diff(s.timestamps) for s in series_set if len(s) >= 2]
    if not diffs:
        raise InsufficientData("need at least two samples per series to infer a sampling interval")
    step = int(round(float(np.median(np.concatenate(diffs)))))
    if step <= 0:
        raise InsufficientData("degenerate sampling interval")
    lo = max(int(s.timestamps[0]) for s in series_set)
    hi = min(int(s.timestamps[-1]) for s in series_set)
    if hi < lo:
        raise InsufficientData("series share no common time window")
    return np.arange(lo, hi + 1, step, dtype=np.int64)


def resample(series: TimeSeries, grid: np.ndarray, max_gap: int = DEFAULT_MAX_GAP) -> np.ndarray:
    """Forward-fill onto ``grid``; NaN where the last sample is too old."""
    step = int(grid[1] - grid[0]) if grid.size > 1 else 1
    idx = np.searchsorted(series.timestamps, grid, side="right") - 1
    out = np.full(grid.size, np.nan)
    ok = idx >= 0
    out[ok] = series.values[idx[ok]]
    age = np.where(ok, grid - series.timestamps[np.maximum(idx, 0)], 0)
    out[age > max_gap * step] = np.nan
    return out


def align(series_set: Sequence[TimeSeries], max_gap: int = DEFAULT_MAX_GAP):
    grid = common_grid(series_set)
    return grid, np.vstack([resample(s, grid, max_gap) for s in series_set])


# --------------------------------------------------------------------------
# pairwise scores

def _corr(a: np.ndarray, b: np.ndarray) -> float:
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 3:
        return 0.0
    a = a[ok] - a[ok].mean()
    b = b[ok] - b[ok].mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom <= 0:
        return 0.0
    return float(np.dot(a, b) / denom)


def lagged_scores(x: np.ndarray, y: np.ndarray, max_lag: int):
    """Best ``|corr(x[t-lag], y[t])|`` and its lag, for both directions.

    Returns ``((w_xy, lag_xy), (w_yx, lag_yx))``; the smallest lag wins ties.
    """
    best = []
    for a, b in ((x, y), (y, x)):
        w, lag = 0.0, 0
        for l in range(1, max_lag + 1):
            c = abs(_corr(a[:-l], b[l:]))
            if c > w:
                w, lag = c, l
        best.append((min(w, 1.0), lag))
    return best[0], best[1]


def _check_pair(x, y, max_lag):
    if x.size < 3 * max_lag:
        raise TooShort(f"aligned length {x.size} is below 3 * max_lag = {3 * max_lag}")
    for name, v in (("x", x), ("y", y)):
        fin = v[np.isfinite(v)]
        if fin.size == 0 or np.ptp(fin) == 0:
            raise ZeroVariance(f"series {name} is constant on the common grid")


def pairwise_causal_weight(x: TimeSeries, y: TimeSeries, max_lag: int = DEFAULT_MAX_LAG,
                           max_gap: int = DEFAULT_MAX_GAP):
    """``(weight, lag, direction)`` where direction is ``"x->y"`` or ``"y->x"``.

    Equal strength in both directions reports ``"x->y"``.
    """
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    _, m = align([x, y], max_gap)
    _check_pair(m[0], m[1], max_lag)
    (w_xy, l_xy), (w_yx, l_yx) = lagged_scores(m[0], m[1], max_lag)
    if w_yx > w_xy:
        return w_yx, l_yx, "y->x"
    return w_xy, l_xy, "x->y"


def _pair_edges(ka, kb, xa, xb, max_lag, threshold):
    """Edges kept for one unordered pair: the stronger direction, both on ties."""
    try:
        _check_pair(xa, xb, max_lag)
    except ZeroVariance:
        return []
    (w_ab, l_ab), (w_ba, l_ba) = lagged_scores(xa, xb, max_lag)
    out = []
    if w_ab >= threshold and w_ab >= w_ba and w_ab > 0:
        out.append(CausalEdge(ka, kb, w_ab, l_ab))
    if w_ba >= threshold and w_ba >= w_ab and w_ba > 0:
        out.append(CausalEdge(kb, ka, w_ba, l_ba))
    return out


def _prepare(series_set, max_gap):
    series_set = sorted(series_set, key=lambda s: s.key)
    if len(series_set) < 2:
        raise InsufficientData("causal discovery needs at least two series")
    keys = [s.key for s in series_set]
    if len(set(keys)) != len(keys):
        raise InsufficientData("duplicate series keys in discovery input")
    _, m = align(series_set, max_gap)
    return keys, m


def discover(series_set: Sequence[TimeSeries], max_lag: int = DEFAULT_MAX_LAG,
             weight_threshold: float = DEFAULT_WEIGHT_THRESHOLD, max_gap: int = DEFAULT_MAX_GAP,
             graph_version: int = 0) -> CausalModel:
    """Lagged-correlation discovery over every ordered pair of series."""
    keys, m = _prepare(series_set, max_gap)
    if m.shape[1] < 3 * max_lag:
        raise InsufficientData(f"common window holds {m.shape[1]} samples, need {3 * max_lag}")
    edges = []
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            edges.extend(_pair_edges(keys[i], keys[j], m[i], m[j], max_lag, weight_threshold))
    params = {"max_lag": max_lag, "weight_threshold": weight_threshold, "max_gap": max_gap}
    return CausalModel("lagged_correlation", params, tuple(edges), fitted_on_version=graph_version)


def _metric_owner(key: SeriesKey):
    return key.owner if key.service != NODE_SERVICE else None


def refit_on_change(model: CausalModel, change, series_set: Sequence[TimeSeries]) -> CausalModel:
    """Rediscover edges incident to instances touched by a topology change.

    Edges between untouched instances are kept as they are.
    """
    if not change:
        return model
    touched = change.touched_instances
    p = dict(model.params)
    max_lag = p.get("max_lag", DEFAULT_MAX_LAG)
    thr = p.get("weight_threshold", DEFAULT_WEIGHT_THRESHOLD)
    max_gap = p.get("max_gap", DEFAULT_MAX_GAP)

    kept = [e for e in model.edges
            if _metric_owner(e.source) not in touched and _metric_owner(e.target) not in touched]
    new_edges = []
    present = [s for s in series_set if _metric_owner(s.key) not in change.removed_nodes]
    if len(present) >= 2:
        keys, m = _prepare(present, max_gap)
        hot = [_metric_owner(k) in touched for k in keys]
        for i in range(len(keys)):
            for j in range(i + 1, len(keys)):
                if hot[i] or hot[j]:
                    new_edges.extend(_pair_edges(keys[i], keys[j], m[i], m[j], max_lag, thr))
    return replace(
        model,
        edges=tuple(kept + new_edges),
        fitted_on_version=change.new_version,
        version=model.version + 1,
    )


class LaggedCorrelationDiscovery(BaseEstimator):
    """Estimator wrapper: ``fit(series_set)`` sets ``model_``.

    Parameters
    ----------
    max_lag : int
    weight_threshold : float
    max_gap : int
        Forward-fill limit in grid intervals.
    """

    method = "lagged_correlation"

    def __init__(self, max_lag=DEFAULT_MAX_LAG, weight_threshold=DEFAULT_WEIGHT_THRESHOLD,
                 max_gap=DEFAULT_MAX_GAP):
        self.max_lag = max_lag
        self.weight_threshold = weight_threshold
        self.max_gap = max_gap

    def fit(self, series_set, y=None, graph_version=0):
        self.model_ = discover(series_set, self.max_lag, self.weight_threshold, self.max_gap,
                               graph_version=graph_version)
        return self

    def refit(self, change, series_set):
        check_is_fitted(self, "model_")
        self.model_ = refit_on_change(self.model_, change, series_set)
        return self

    @property
    def edges_(self):
        check_is_fitted(self, "model_")
        return self.model_.edges


#: method id -> estimator factory; register alternatives (e.g. an ACD
#: encoder) with :func:`register_discovery`
DISCOVERY_METHODS: dict = {"lagged_correlation": LaggedCorrelationDiscovery}


def register_discovery(method: str, factory: Callable[..., BaseEstimator]) -> None:
    DISCOVERY_METHODS[method] = factory


def make_discovery(method: str = "lagged_correlation", **params) -> BaseEstimator:
    try:
        factory = DISCOVERY_METHODS[method]
    except KeyError:
        raise ValueError(f"unknown discovery method {method!r}") from None
    return factory(**params)
