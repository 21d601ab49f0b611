"""Feature-bucket detector selection.

The selector is a lookup table: features are quantized into
``low``/``mid``/``high`` levels, the tuple of levels forms a bucket key,
and training assigns every bucket the (detector, params) pair with the
best mean point-adjusted F1 on the labeled corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..exceptions import EmptyCorpus, InsufficientHistory, UnknownDetector
from .detectors import DEFAULT_DETECTOR, DETECTORS, POOL_ORDER, make_detector
from .features import SeriesFeatures, extract_features
from .labels import point_adjusted_f1

DEGENERATE_BUCKET = "degenerate"
DEGENERATE_CHOICE = ("iqr", {})

#: threshold grid searched per detector during training; the first value
#: is the detector default so ties keep the default
DEFAULT_K_GRID = {
    "rolling_zscore": (3.0, 2.5, 3.5, 4.0, 5.0),
    "iqr": (2.0, 1.5, 3.0, 4.0),
    "ewma_residual": (3.0, 2.5, 3.5, 4.0, 5.0),
    "seasonal_residual": (3.0, 2.5, 3.5, 4.0, 5.0),
}


@dataclass(frozen=True)
class BucketThresholds:
    """Cut points for ``low | mid | high`` per feature."""

    seasonality: tuple = (0.3, 0.6)
    trend: tuple = (0.3, 0.7)
    spikiness: tuple = (3.0, 6.0)

    def to_dict(self):
        return {k: list(getattr(self, k)) for k in ("seasonality", "trend", "spikiness")}


def _level(value, cuts):
    lo, hi = cuts
    if value < lo:
        return "low"
    if value < hi:
        return "mid"
    return "high"


def bucket_key(features: SeriesFeatures, thresholds: BucketThresholds = BucketThresholds()) -> str:
    if features.variance == 0:
        return DEGENERATE_BUCKET
    return "|".join((
        f"season={_level(features.seasonality_strength, thresholds.seasonality)}",
        f"trend={_level(features.trend_strength, thresholds.trend)}",
        f"spike={_level(features.spikiness, thresholds.spikiness)}",
    ))


@dataclass(frozen=True)
class SelectorPolicy:
    mapping: Mapping = field(default_factory=dict)
    params: Mapping = field(default_factory=dict)
    thresholds: BucketThresholds = BucketThresholds()
    corpus_id: Optional[str] = None
    bucket_f1: Mapping = field(default_factory=dict)
    bucket_sizes: Mapping = field(default_factory=dict)

    def __post_init__(self):
        for bucket, det in self.mapping.items():
            if det not in DETECTORS:
                raise UnknownDetector(f"bucket {bucket!r} maps to unknown detector {det!r}")
        object.__setattr__(self, "mapping", MappingProxyType(dict(self.mapping)))
        object.__setattr__(
            self, "params", MappingProxyType({k: dict(v) for k, v in self.params.items()}))
        object.__setattr__(self, "bucket_f1", MappingProxyType(dict(self.bucket_f1)))
        object.__setattr__(self, "bucket_sizes", MappingProxyType(dict(self.bucket_sizes)))

    def to_dict(self):
        return {
            "corpus_id": self.corpus_id,
            "thresholds": self.thresholds.to_dict(),
            "buckets": [
                {
                    "bucket": b,
                    "detector": self.mapping[b],
                    "params": dict(self.params.get(b, {})),
                    "f1": self.bucket_f1.get(b),
                    "size": self.bucket_sizes.get(b),
                }
                for b in sorted(self.mapping)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        th = d.get("thresholds") or {}
        thresholds = BucketThresholds(**{k: tuple(v) for k, v in th.items()})
        buckets = d.get("buckets", [])
        return cls(
            mapping={b["bucket"]: b["detector"] for b in buckets},
            params={b["bucket"]: b.get("params", {}) for b in buckets},
            thresholds=thresholds,
            corpus_id=d.get("corpus_id"),
            bucket_f1={b["bucket"]: b["f1"] for b in buckets if b.get("f1") is not None},
            bucket_sizes={b["bucket"]: b["size"] for b in buckets if b.get("size") is not None},
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def select_detector(features: SeriesFeatures, policy: Optional[SelectorPolicy] = None):
    """Bucket lookup; unknown buckets fall back to ``rolling_zscore``."""
    policy = policy or SelectorPolicy()
    bucket = bucket_key(features, policy.thresholds)
    if bucket == DEGENERATE_BUCKET:
        name, params = DEGENERATE_CHOICE
        return name, dict(params)
    if bucket in policy.mapping:
        return policy.mapping[bucket], dict(policy.params.get(bucket, {}))
    return DEFAULT_DETECTOR, {}


def _candidates(k_grid):
    for name in POOL_ORDER:
        for k in k_grid.get(name, (make_detector(name).k,)):
            yield name, k


def _score_matrix(entries, k_grid):
    """F1 of every (detector, k) candidate on every labeled series."""
    cands = list(_candidates(k_grid))
    f1 = np.zeros((len(entries), len(cands)))
    for i, entry in enumerate(entries):
        cache = {}
        for j, (name, k) in enumerate(cands):
            if name not in cache:
                det = make_detector(name)
                try:
                    det.fit(entry.series)
                    cache[name] = np.nan_to_num(det.score_samples(entry.series), nan=0.0)
                except InsufficientHistory:
                    cache[name] = np.zeros(len(entry.series))
            f1[i, j] = point_adjusted_f1(entry.series, cache[name] > k, entry.intervals)
    return cands, f1


def _default_params(name, k):
    return {} if k == make_detector(name).k else {"k": k}


def train_selector(corpus, thresholds: BucketThresholds = BucketThresholds(),
                   k_grid=None, corpus_id: Optional[str] = None) -> SelectorPolicy:
    """Assign each feature bucket its best (detector, threshold) pair.

    Ties go to the earlier detector in the pool order, then to the
    earlier threshold in the grid.
    """
    entries = list(corpus)
    if not entries:
        raise EmptyCorpus("cannot train a selector on an empty corpus")
    k_grid = DEFAULT_K_GRID if k_grid is None else k_grid
    buckets = [bucket_key(extract_features(e.series), thresholds) for e in entries]
    cands, f1 = _score_matrix(entries, k_grid)

    mapping, params, bucket_f1, sizes = {}, {}, {}, {}
    for bucket in sorted(set(buckets)):
        rows = [i for i, b in enumerate(buckets) if b == bucket]
        sizes[bucket] = len(rows)
        if bucket == DEGENERATE_BUCKET:
            name, p = DEGENERATE_CHOICE
            j = cands.index((name, make_detector(name).k))
        else:
            means = f1[rows].mean(axis=0)
            j = int(np.argmax(means))  # first maximum = tie-break order
            name, k = cands[j]
            p = _default_params(name, k)
        mapping[bucket] = name
        params[bucket] = p
        bucket_f1[bucket] = round(float(f1[rows, j].mean()), 6)
    return SelectorPolicy(
        mapping=mapping, params=params, thresholds=thresholds,
        corpus_id=corpus_id or getattr(corpus, "name", None),
        bucket_f1=bucket_f1, bucket_sizes=sizes,
    )


def evaluate_policy(corpus, policy: Optional[SelectorPolicy] = None) -> np.ndarray:
    """Per-series point-adjusted F1 when detectors are picked by ``policy``."""
    out = []
    for entry in corpus:
        name, p = select_detector(extract_features(entry.series), policy)
        out.append(_evaluate(entry, name, p))
    return np.array(out)


def evaluate_detector(corpus, name: str, params=None) -> np.ndarray:
    """Per-series point-adjusted F1 of one fixed detector."""
    return np.array([_evaluate(e, name, params) for e in corpus])


def _evaluate(entry, name, params):
    det = make_detector(name, params)
    try:
        det.fit(entry.series)
        pred = det.predict(entry.series)
    except InsufficientHistory:
        pred = np.zeros(len(entry.series), dtype=bool)
    return point_adjusted_f1(entry.series, pred, entry.intervals)


class DetectorSelector(BaseEstimator):
    """Estimator wrapper around :func:`train_selector`.

    Parameters
    ----------
    thresholds : BucketThresholds
    k_grid : dict, optional
        Thresholds searched per detector; defaults to ``DEFAULT_K_GRID``.

    Attributes
    ----------
    policy_ : SelectorPolicy
    """

    def __init__(self, thresholds=BucketThresholds(), k_grid=None):
        self.thresholds = thresholds
        self.k_grid = k_grid

    def fit(self, corpus, y=None):
        self.policy_ = train_selector(corpus, self.thresholds, self.k_grid)
        return self

    def predict(self, X):
        """``(detector, params)`` per series."""
        check_is_fitted(self, "policy_")
        return [select_detector(extract_features(s), self.policy_) for s in X]

    def score(self, corpus, y=None):
        check_is_fitted(self, "policy_")
        return float(evaluate_policy(corpus, self.policy_).mean())
