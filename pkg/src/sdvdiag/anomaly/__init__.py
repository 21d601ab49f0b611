"""Anomaly detection: detector pool, features, selector and labeling."""

from .corpus import make_labeled_corpus
from .detectors import (
    DEFAULT_DETECTOR,
    DETECTORS,
    POOL_ORDER,
    Anomaly,
    EWMAResidual,
    IQRDetector,
    RollingZScore,
    SeasonalResidual,
    detect,
    make_detector,
)
from .features import SeriesFeatures, extract_features
from .labels import (
    LabeledDataset,
    LabeledSeries,
    normalize_intervals,
    point_adjusted_f1,
    suggest_labels,
)
from .selector import (
    BucketThresholds,
    DetectorSelector,
    SelectorPolicy,
    bucket_key,
    evaluate_detector,
    evaluate_policy,
    select_detector,
    train_selector,
)

__all__ = [
    "Anomaly", "BucketThresholds", "DEFAULT_DETECTOR", "DETECTORS", "DetectorSelector",
    "EWMAResidual", "IQRDetector", "LabeledDataset", "LabeledSeries", "POOL_ORDER",
    "RollingZScore", "SeasonalResidual", "SelectorPolicy", "SeriesFeatures", "bucket_key",
    "detect", "evaluate_detector", "evaluate_policy", "extract_features",
    "make_detector", "make_labeled_corpus", "normalize_intervals", "point_adjusted_f1",
    "select_detector", "suggest_labels", "train_selector",
]
