"""Synthetic labeled corpora for selector training and tests."""

from __future__ import annotations

import numpy as np

from ..telemetry import SeriesKey, TimeSeries
from .labels import LabeledDataset

SERIES_CLASSES = ("seasonal", "spiky", "trending")


def _inject(rng, x, n_events, size, width, margin=70):
    """Add ``n_events`` disjoint bumps; returns index intervals."""
    n = x.size
    slots = rng.choice(np.arange(margin, n - width - 1, max(width * 4, 40)), size=n_events, replace=False)
    events = []
    for s in sorted(int(v) for v in slots):
        sign = rng.choice((-1.0, 1.0))
        x[s:s + width] += sign * size
        events.append((s, s + width))
    return events


def make_series(kind: str, rng: np.random.Generator, length=400, interval_ms=1000, index=0):
    """One synthetic series of ``kind`` with its anomalous index intervals."""
    t = np.arange(length)
    noise = rng.normal(0.0, 1.0, length)
    if kind == "seasonal":
        period = int(rng.choice((20, 24, 30, 40)))
        amp = rng.uniform(8.0, 12.0)
        x = amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)) + 0.3 * noise
        # bumps stay inside the seasonal envelope: only a residual model sees them
        events = _inject(rng, x, int(rng.integers(2, 5)), size=amp * 0.6, width=2)
    elif kind == "spiky":
        x = 50.0 + noise
        events = _inject(rng, x, int(rng.integers(2, 5)), size=rng.uniform(9.0, 14.0), width=1)
    elif kind == "trending":
        slope = rng.uniform(0.05, 0.15) * rng.choice((-1.0, 1.0))
        x = 20.0 + slope * t + noise
        events = _inject(rng, x, int(rng.integers(2, 5)), size=rng.uniform(7.0, 10.0), width=2)
    else:
        raise ValueError(f"unknown series class {kind!r}; expected one of {SERIES_CLASSES}")
    key = SeriesKey("value", f"synthetic-{kind}", f"s{index:03d}")
    ts = t.astype(np.int64) * interval_ms
    series = TimeSeries(key, ts, x)
    intervals = [(int(ts[a]), int(ts[b - 1]) + 1) for a, b in events]
    return series, intervals


def make_labeled_corpus(n_per_class=14, seed=0, classes=SERIES_CLASSES, length=400,
                        name=None) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    ds = LabeledDataset(name=name or f"synthetic-{seed}")
    idx = 0
    for kind in classes:
        for _ in range(n_per_class):
            series, intervals = make_series(kind, rng, length=length, index=idx)
            ds.add(series, intervals, "confirmed")
            idx += 1
    return ds
