"""Telemetry data model, `.sdvt` wire format and an in-memory append store.

A `.sdvt` file holds one JSON object per line. The ``kind`` field tells
spans (``"span"``) apart from metric samples (``"metric"``)::

    {"kind":"span","trace_id":"t1","span_id":"s1","parent_span_id":null,
     "service":"vehicle-service","instance":"V1","node":"worker1",
     "start":100,"end":150,"peer_service":null,"peer_instance":null}
    {"kind":"metric","metric":"cpu_usage","service":"charging-station",
     "instance":"B1","node":"worker1","timestamp":1000,"value":0.21}

Timestamps are integer milliseconds.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Optional, Union

import numpy as np

from .exceptions import InvalidValue, InvalidWindow, MalformedRecord, StorageFull

DEFAULT_RETENTION_MS = 24 * 60 * 60 * 1000

#: service name used for compute-node level metrics (e.g. ``tx_bytes`` of a worker)
NODE_SERVICE = "node"

SPAN_FIELDS = (
    "trace_id", "span_id", "parent_span_id", "service", "instance", "node",
    "start", "end", "peer_service", "peer_instance",
)
METRIC_FIELDS = ("metric", "service", "instance", "node", "timestamp", "value")


class SeriesKey(NamedTuple):
    metric: str
    service: str
    instance: str

    @property
    def label(self) -> str:
        return f"{self.service}/{self.instance}/{self.metric}"

    @property
    def owner(self) -> tuple:
        return (self.service, self.instance)

    @classmethod
    def parse(cls, text: str) -> "SeriesKey":
        """Inverse of :attr:`label`."""
        parts = text.split("/")
        if len(parts) != 3 or not all(parts):
            raise ValueError(f"series key must look like service/instance/metric, got {text!r}")
        service, instance, metric = parts
        return cls(metric, service, instance)


@dataclass(frozen=True)
class Span:
    trace_id: str
    span_id: str
    service: str
    instance: str
    node: str
    start: int
    end: int
    parent_span_id: Optional[str] = None
    peer_service: Optional[str] = None
    peer_instance: Optional[str] = None

    def __post_init__(self):
        if not self.span_id:
            raise MalformedRecord("span_id must be non-empty")
        if not self.service or not self.instance:
            raise MalformedRecord("service and instance must be non-empty")
        if self.end < self.start:
            raise InvalidValue(f"span end {self.end} precedes start {self.start}")
        if self.parent_span_id is not None and self.parent_span_id == self.span_id:
            raise InvalidValue("span cannot be its own parent")

    @property
    def timestamp(self) -> int:
        return self.start

    @property
    def owner(self) -> tuple:
        return (self.service, self.instance)

    @property
    def peer(self) -> Optional[tuple]:
        if self.peer_service and self.peer_instance:
            return (self.peer_service, self.peer_instance)
        return None


@dataclass(frozen=True)
class MetricSample:
    metric: str
    service: str
    instance: str
    node: str
    timestamp: int
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise InvalidValue(f"non-finite metric value {self.value!r}")

    @property
    def key(self) -> SeriesKey:
        return SeriesKey(self.metric, self.service, self.instance)


Record = Union[Span, MetricSample]


class TimeSeries:
    """Time-ordered samples of one metric of one instance.

    Timestamps are strictly increasing. Construct through
    :meth:`from_samples` to sort arbitrary input and resolve duplicate
    timestamps keep-last.
    """

    __slots__ = ("key", "timestamps", "values")

    def __init__(self, key, timestamps, values):
        self.key = SeriesKey(*key)
        ts = np.asarray(timestamps, dtype=np.int64)
        vs = np.asarray(values, dtype=float)
        if ts.ndim != 1 or ts.shape != vs.shape:
            raise ValueError("timestamps and values must be 1-D and equally long")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        ts.flags.writeable = False
        vs.flags.writeable = False
        self.timestamps = ts
        self.values = vs

    @classmethod
    def from_samples(cls, key, samples: Iterable[tuple]) -> "TimeSeries":
        merged = {}
        for t, v in samples:
            merged[int(t)] = float(v)  # keep-last
        ts = sorted(merged)
        return cls(key, ts, [merged[t] for t in ts])

    @property
    def samples(self) -> list:
        return list(zip(self.timestamps.tolist(), self.values.tolist()))

    def __len__(self):
        return int(self.timestamps.size)

    def __repr__(self):
        return f"TimeSeries({self.key.label!r}, n={len(self)})"

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.key == other.key
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def window(self, start=None, end=None) -> "TimeSeries":
        """Samples with ``start <= t < end``."""
        lo = 0 if start is None else int(np.searchsorted(self.timestamps, start, "left"))
        hi = len(self) if end is None else int(np.searchsorted(self.timestamps, end, "left"))
        return TimeSeries(self.key, self.timestamps[lo:hi], self.values[lo:hi])

    def median_interval(self) -> Optional[float]:
        if len(self) < 2:
            return None
        return float(np.median(np.diff(self.timestamps)))


# --------------------------------------------------------------------------
# wire format

def _require_str(obj, name, optional=False):
    value = obj.get(name)
    if value is None:
        if optional:
            return None
        raise MalformedRecord(f"missing required field {name!r}")
    if not isinstance(value, str):
        raise MalformedRecord(f"field {name!r} must be a string")
    return value


def _require_int(obj, name):
    value = obj.get(name)
    if value is None:
        raise MalformedRecord(f"missing required field {name!r}")
    if isinstance(value, bool):
        raise MalformedRecord(f"field {name!r} must be an integer")
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InvalidValue(f"field {name!r} is not finite")
        if not value.is_integer():
            raise MalformedRecord(f"field {name!r} must be integer milliseconds")
        return int(value)
    if not isinstance(value, int):
        raise MalformedRecord(f"field {name!r} must be an integer")
    return value


def _require_number(obj, name):
    value = obj.get(name)
    if value is None:
        raise MalformedRecord(f"missing required field {name!r}")
    if isinstance(value, bool):
        raise MalformedRecord(f"field {name!r} must be a number")
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise MalformedRecord(f"field {name!r} must be a number") from None
    if not isinstance(value, (int, float)):
        raise MalformedRecord(f"field {name!r} must be a number")
    value = float(value)
    if not math.isfinite(value):
        raise InvalidValue(f"field {name!r} is not finite")
    return value


def parse_record(line: str) -> Record:
    """Parse one `.sdvt` line. Unknown fields are ignored."""
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedRecord(f"not a JSON object: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedRecord("record must be a JSON object")
    kind = obj.get("kind")
    if kind == "span":
        span_id = _require_str(obj, "span_id")
        if not span_id:
            raise MalformedRecord("span_id must be non-empty")
        return Span(
            trace_id=_require_str(obj, "trace_id"),
            span_id=span_id,
            parent_span_id=_require_str(obj, "parent_span_id", optional=True),
            service=_require_str(obj, "service"),
            instance=_require_str(obj, "instance"),
            node=_require_str(obj, "node"),
            start=_require_int(obj, "start"),
            end=_require_int(obj, "end"),
            peer_service=_require_str(obj, "peer_service", optional=True),
            peer_instance=_require_str(obj, "peer_instance", optional=True),
        )
    if kind == "metric":
        return MetricSample(
            metric=_require_str(obj, "metric"),
            service=_require_str(obj, "service"),
            instance=_require_str(obj, "instance"),
            node=_require_str(obj, "node"),
            timestamp=_require_int(obj, "timestamp"),
            value=_require_number(obj, "value"),
        )
    raise MalformedRecord(f"unknown record kind {kind!r}")


def serialize_record(record: Record) -> str:
    """Single-line JSON with stable field order."""
    if isinstance(record, Span):
        obj = {"kind": "span"}
        obj.update((f, getattr(record, f)) for f in SPAN_FIELDS)
    elif isinstance(record, MetricSample):
        obj = {"kind": "metric"}
        obj.update((f, getattr(record, f)) for f in METRIC_FIELDS)
    else:
        raise TypeError(f"cannot serialize {type(record).__name__}")
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def read_records(path) -> Iterator[Record]:
    """Yield records of a `.sdvt` file; blank lines are skipped.

    Raises MalformedRecord carrying the 1-based line number.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield parse_record(line)
            except MalformedRecord as exc:
                cls = type(exc)
                raise cls(str(exc), line_number=lineno) from None


def write_records(path, records: Iterable[Record]) -> int:
    n = 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(serialize_record(rec))
            fh.write("\n")
            n += 1
    return n


def record_sort_key(record: Record):
    if isinstance(record, Span):
        return (record.start, 0, record.trace_id, record.span_id)
    return (record.timestamp, 1, record.metric, record.service, record.instance)


# --------------------------------------------------------------------------
# storage

class TelemetryStore:
    """Append store for spans and metric samples with time-window queries.

    Spans are keyed by ``(trace_id, span_id)`` and metric samples by
    ``(series key, timestamp)``; re-ingesting a record replaces the stored
    one, so replaying a file twice leaves the state unchanged.

    Parameters
    ----------
    retention_ms : int
        Records older than ``watermark - retention_ms`` are evicted, where
        the watermark is the newest timestamp seen.
    max_records : int, optional
        Hard capacity. Exceeding it after eviction raises StorageFull.
    """

    def __init__(self, retention_ms: int = DEFAULT_RETENTION_MS, max_records: Optional[int] = None):
        if retention_ms <= 0:
            raise ValueError("retention_ms must be positive")
        self.retention_ms = int(retention_ms)
        self.max_records = max_records
        self._lock = threading.RLock()
        self._spans: dict = {}
        self._metrics: dict = {}
        self._n_samples = 0
        self._watermark: Optional[int] = None
        self._evicted_to: Optional[int] = None
        self._span_index: Optional[list] = None

    # -- writes ----------------------------------------------------------
    @property
    def watermark(self) -> Optional[int]:
        return self._watermark

    def _cutoff(self):
        if self._watermark is None:
            return None
        return self._watermark - self.retention_ms

    def ingest(self, record: Record) -> bool:
        """Store one record. Returns False when it is older than retention."""
        with self._lock:
            ts = record.timestamp
            if self._watermark is None or ts > self._watermark:
                self._watermark = ts
            cutoff = self._cutoff()
            if ts < cutoff:
                return False
            if self._evicted_to is None or cutoff - self._evicted_to >= self.retention_ms // 16:
                self._evict(cutoff)
            if self.max_records is not None and len(self) >= self.max_records and not self._contains(record):
                self._evict(cutoff)
                if len(self) >= self.max_records:
                    raise StorageFull(f"store holds {len(self)} records (max {self.max_records})")
            if isinstance(record, Span):
                self._spans[(record.trace_id, record.span_id)] = record
                self._span_index = None
            elif isinstance(record, MetricSample):
                bucket = self._metrics.setdefault(record.key, {})
                if record.timestamp not in bucket:
                    self._n_samples += 1
                bucket[record.timestamp] = record
            else:
                raise TypeError(f"cannot ingest {type(record).__name__}")
            return True

    def ingest_many(self, records: Iterable[Record]) -> int:
        with self._lock:
            return sum(1 for r in records if self.ingest(r))

    def _contains(self, record):
        if isinstance(record, Span):
            return (record.trace_id, record.span_id) in self._spans
        return record.timestamp in self._metrics.get(record.key, ())

    def _evict(self, cutoff):
        self._evicted_to = cutoff
        stale = [k for k, s in self._spans.items() if s.start < cutoff]
        for k in stale:
            del self._spans[k]
        if stale:
            self._span_index = None
        for key in list(self._metrics):
            bucket = self._metrics[key]
            old = [t for t in bucket if t < cutoff]
            for t in old:
                del bucket[t]
            self._n_samples -= len(old)
            if not bucket:
                del self._metrics[key]

    # -- reads -----------------------------------------------------------
    def __len__(self):
        return len(self._spans) + self._n_samples

    def _sorted_spans(self):
        if self._span_index is None:
            spans = sorted(self._spans.values(), key=record_sort_key)
            self._span_index = (spans, [s.start for s in spans])
        return self._span_index

    def query_window(self, kind: str, start: int, end: int,
                     filter: Optional[Callable[[Record], bool]] = None) -> list:
        """Records with timestamp in ``[start, end)``, time-ordered."""
        if start > end:
            raise InvalidWindow(f"window start {start} is after end {end}")
        with self._lock:
            if kind == "spans":
                spans, starts = self._sorted_spans()
                lo, hi = bisect_left(starts, start), bisect_left(starts, end)
                out = spans[lo:hi]
            elif kind == "metrics":
                out = [
                    s for bucket in self._metrics.values() for t, s in bucket.items()
                    if start <= t < end
                ]
                out.sort(key=record_sort_key)
            else:
                raise ValueError(f"kind must be 'spans' or 'metrics', got {kind!r}")
        if filter is not None:
            out = [r for r in out if filter(r)]
        return list(out)

    def spans(self) -> list:
        with self._lock:
            return list(self._sorted_spans()[0])

    def series_keys(self) -> list:
        with self._lock:
            return sorted(self._metrics)

    def series(self, key, start=None, end=None) -> TimeSeries:
        key = SeriesKey(*key)
        with self._lock:
            bucket = dict(self._metrics.get(key, {}))
        ts = sorted(t for t in bucket if (start is None or t >= start) and (end is None or t < end))
        return TimeSeries(key, ts, [bucket[t].value for t in ts])

    def all_series(self, start=None, end=None, min_length=1) -> list:
        with self._lock:
            keys = sorted(self._metrics)
            out = [self.series(k, start, end) for k in keys]
        return [s for s in out if len(s) >= min_length]

    def metric_nodes(self) -> dict:
        """Map of series key to the compute node of its latest sample."""
        with self._lock:
            return {
                key: bucket[max(bucket)].node
                for key, bucket in sorted(self._metrics.items())
            }

    def records(self) -> list:
        with self._lock:
            recs = list(self._spans.values())
            for bucket in self._metrics.values():
                recs.extend(bucket.values())
        recs.sort(key=record_sort_key)
        return recs

    def state_hash(self) -> str:
        """Digest of the stored contents, independent of arrival order."""
        h = hashlib.sha256()
        for rec in self.records():
            h.update(serialize_record(rec).encode())
            h.update(b"\n")
        return h.hexdigest()
