"""Labeled datasets, point-adjusted F1 and label suggestions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..exceptions import InsufficientHistory
from ..telemetry import MetricSample, SeriesKey, TimeSeries, read_records, write_records
from ..utils.validation import check_series
from .detectors import POOL_ORDER, make_detector, warmup_length

LABEL_SOURCES = ("suggested", "confirmed")


def normalize_intervals(intervals: Iterable[Sequence[int]], series: TimeSeries = None) -> tuple:
    """Sort, clip to the series range and merge overlapping ``[from, to)`` intervals."""
    spans = []
    lo = hi = None
    if series is not None and len(series):
        lo, hi = int(series.timestamps[0]), int(series.timestamps[-1]) + 1
    for a, b in intervals:
        a, b = int(a), int(b)
        if lo is not None:
            a, b = max(a, lo), min(b, hi)
        if b > a:
            spans.append((a, b))
    spans.sort()
    merged = []
    for a, b in spans:
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return tuple(merged)


@dataclass(frozen=True)
class LabeledSeries:
    series: TimeSeries
    intervals: tuple
    source: str = "confirmed"

    def __post_init__(self):
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"label source must be one of {LABEL_SOURCES}")
        object.__setattr__(self, "intervals", normalize_intervals(self.intervals, self.series))

    def mask(self) -> np.ndarray:
        return interval_mask(self.series.timestamps, self.intervals)


def interval_mask(timestamps: np.ndarray, intervals) -> np.ndarray:
    mask = np.zeros(timestamps.size, dtype=bool)
    for a, b in intervals:
        mask |= (timestamps >= a) & (timestamps < b)
    return mask


class LabeledDataset:
    """Ordered collection of labeled series.

    On disk a dataset is a directory with ``series.sdvt`` (metric records)
    and ``labels.json`` (``[from, to)`` intervals per series key).
    """

    def __init__(self, entries: Iterable[LabeledSeries] = (), name: str = "corpus"):
        self.entries = list(entries)
        self.name = name

    def add(self, series, intervals, source="confirmed"):
        self.entries.append(LabeledSeries(series, tuple(intervals), source))
        return self

    def extend(self, entries):
        self.entries.extend(entries)
        return self

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        records = []
        labels = []
        for e in self.entries:
            k = e.series.key
            records.extend(
                MetricSample(k.metric, k.service, k.instance, "", t, v) for t, v in e.series.samples)
            labels.append({
                "key": k.label,
                "source": e.source,
                "intervals": [list(iv) for iv in e.intervals],
            })
        write_records(directory / "series.sdvt", records)
        with open(directory / "labels.json", "w", encoding="utf-8") as fh:
            json.dump({"name": self.name, "series": labels}, fh, indent=2)
            fh.write("\n")
        return directory

    @classmethod
    def load(cls, directory) -> "LabeledDataset":
        directory = Path(directory)
        samples = {}
        for rec in read_records(directory / "series.sdvt"):
            if isinstance(rec, MetricSample):
                samples.setdefault(rec.key, []).append((rec.timestamp, rec.value))
        with open(directory / "labels.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        ds = cls(name=meta.get("name", directory.name))
        for item in meta["series"]:
            key = SeriesKey.parse(item["key"])
            series = TimeSeries.from_samples(key, samples.get(key, []))
            ds.add(series, [tuple(iv) for iv in item["intervals"]], item.get("source", "confirmed"))
        return ds


def point_adjusted_f1(series: TimeSeries, predicted: np.ndarray, intervals) -> float:
    """F1 where one hit inside a labeled interval counts the whole interval.

    ``predicted`` is a boolean mask aligned with ``series``. A series
    with no labels and no predictions scores 1.0.
    """
    ts = series.timestamps
    predicted = np.asarray(predicted, dtype=bool)
    labeled = np.zeros(ts.size, dtype=bool)
    tp = fn = 0
    for a, b in intervals:
        inside = (ts >= a) & (ts < b)
        labeled |= inside
        size = int(inside.sum())
        if predicted[inside].any():
            tp += size
        else:
            fn += size
    fp = int((predicted & ~labeled).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def mask_to_intervals(timestamps: np.ndarray, mask: np.ndarray) -> list:
    """Runs of consecutive flagged samples as ``[first, last + 1)`` intervals."""
    out = []
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return out
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([idx[0]], idx[breaks + 1]))
    ends = np.concatenate((idx[breaks], [idx[-1]]))
    for s, e in zip(starts, ends):
        out.append((int(timestamps[s]), int(timestamps[e]) + 1))
    return out


def suggest_labels(series, min_votes: int = 2, params_by_detector=None) -> list:
    """Intervals where at least ``min_votes`` pool detectors agree."""
    series = check_series(series)
    params_by_detector = params_by_detector or {}
    need = warmup_length(series, params_by_detector)
    if len(series) < need:
        raise InsufficientHistory(f"label suggestion needs {need} samples, series has {len(series)}")
    votes = np.zeros(len(series), dtype=int)
    for name in POOL_ORDER:
        det = make_detector(name, params_by_detector.get(name)).fit(series)
        votes += det.predict(series)
    return mask_to_intervals(series.timestamps, votes >= min_votes)
