import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdvdiag.exceptions import InvalidValue, InvalidWindow, MalformedRecord, StorageFull
from sdvdiag.telemetry import (
    MetricSample,
    SeriesKey,
    Span,
    TelemetryStore,
    TimeSeries,
    parse_record,
    read_records,
    serialize_record,
    write_records,
)

SPAN_LINE = ('{"kind":"span","trace_id":"t1","span_id":"s1","parent_span_id":null,'
             '"service":"vehicle-service","instance":"V1","node":"worker1","start":100,"end":150}')


def metric(ts, value=1.0, instance="B1", metric="cpu_usage"):
    return MetricSample(metric, "charging-station", instance, "worker1", ts, value)


def test_parse_span_maps_fields():
    sp = parse_record(SPAN_LINE)
    assert isinstance(sp, Span)
    assert (sp.start, sp.end) == (100, 150)
    assert sp.parent_span_id is None and sp.peer is None


@pytest.mark.parametrize("value", ['"NaN"', "NaN", "Infinity"])
def test_non_finite_metric_rejected(value):
    line = ('{"kind":"metric","metric":"cpu_usage","service":"s","instance":"i","node":"n",'
            f'"timestamp":1,"value":{value}}}')
    with pytest.raises(InvalidValue):
        parse_record(line)


def test_missing_span_id_is_malformed():
    obj = json.loads(SPAN_LINE)
    del obj["span_id"]
    with pytest.raises(MalformedRecord):
        parse_record(json.dumps(obj))


@pytest.mark.parametrize("line", ["", "[1,2]", "{not json", '{"kind":"event"}',
                                  SPAN_LINE.replace('"start":100', '"start":"soon"')])
def test_garbage_lines_are_malformed(line):
    with pytest.raises(MalformedRecord):
        parse_record(line)


def test_span_end_before_start():
    with pytest.raises(InvalidValue):
        parse_record(SPAN_LINE.replace('"end":150', '"end":50'))


def test_read_records_reports_line_number(tmp_path):
    p = tmp_path / "x.sdvt"
    p.write_text(SPAN_LINE + "\n\n" + "garbage\n", encoding="utf-8")
    it = read_records(p)
    assert isinstance(next(it), Span)
    with pytest.raises(MalformedRecord, match="line 3"):
        next(it)


def test_two_samples_make_series_of_length_two():
    store = TelemetryStore()
    store.ingest_many([metric(1), metric(2)])
    assert len(store.series(SeriesKey("cpu_usage", "charging-station", "B1"))) == 2


def test_duplicate_timestamp_keeps_last():
    store = TelemetryStore()
    store.ingest_many([metric(5, 5.0), metric(5, 7.0)])
    s = store.series(SeriesKey("cpu_usage", "charging-station", "B1"))
    assert s.samples == [(5, 7.0)]


def test_thousand_spans_round_trip():
    store = TelemetryStore()
    store.ingest_many(Span("t", f"s{i}", "a", "a1", "n", i, i + 1) for i in range(1000))
    assert len(store.query_window("spans", 0, 2000)) == 1000


def test_half_open_window():
    store = TelemetryStore()
    store.ingest_many([metric(1), metric(2), metric(3)])
    got = store.query_window("metrics", 2, 3)
    assert [r.timestamp for r in got] == [2]


def test_empty_store_query():
    assert TelemetryStore().query_window("metrics", 0, 10) == []
    assert TelemetryStore().query_window("spans", 0, 10) == []


def test_invalid_window():
    with pytest.raises(InvalidWindow):
        TelemetryStore().query_window("metrics", 5, 1)


def test_random_samples_sorted_against_sort_oracle():
    rng = np.random.default_rng(11)
    ts = rng.choice(np.arange(10_000), size=100, replace=False)
    names = rng.choice(["B1", "B2", "B3"], size=100)
    recs = [metric(int(t), float(rng.normal()), instance=str(n)) for t, n in zip(ts, names)]
    store = TelemetryStore()
    store.ingest_many(recs)
    got = store.query_window("metrics", 0, 10_001)
    oracle = sorted(recs, key=lambda r: r.timestamp)
    assert [r.timestamp for r in got] == [r.timestamp for r in oracle]
    assert sorted(map(serialize_record, got)) == sorted(map(serialize_record, recs))


def test_retention_drops_old_records():
    store = TelemetryStore(retention_ms=100)
    assert store.ingest(metric(1000))
    assert not store.ingest(metric(800))
    store.ingest(metric(1200))
    assert [r.timestamp for r in store.query_window("metrics", 0, 5000)] == [1200]


def test_capacity_limit():
    store = TelemetryStore(max_records=2)
    store.ingest_many([metric(1), metric(2)])
    with pytest.raises(StorageFull):
        store.ingest(metric(3))


def test_timeseries_requires_increasing_timestamps():
    with pytest.raises(ValueError):
        TimeSeries(SeriesKey("m", "s", "i"), [2, 1], [0.0, 1.0])
    s = TimeSeries.from_samples(SeriesKey("m", "s", "i"), [(3, 1.0), (1, 2.0), (3, 4.0)])
    assert s.samples == [(1, 2.0), (3, 4.0)]


def test_state_hash_independent_of_arrival_order():
    recs = [metric(t, float(t)) for t in range(20)]
    a, b = TelemetryStore(), TelemetryStore()
    a.ingest_many(recs)
    b.ingest_many(reversed(recs))
    assert a.state_hash() == b.state_hash()


def test_write_then_read(tmp_path):
    recs = [parse_record(SPAN_LINE), metric(3, 0.5)]
    write_records(tmp_path / "r.sdvt", recs)
    assert list(read_records(tmp_path / "r.sdvt")) == recs


names = st.text(alphabet="abcdefgh-_0123456789", min_size=1, max_size=8)
spans = st.builds(
    lambda tid, sid, svc, inst, node, start, dur, parent, peer: Span(
        tid, sid, svc, inst, node, start, start + dur,
        parent_span_id=parent if parent != sid else None,
        peer_service=peer[0] if peer else None, peer_instance=peer[1] if peer else None),
    names, names, names, names, names,
    st.integers(0, 10**12), st.integers(0, 10**6),
    st.none() | names, st.none() | st.tuples(names, names),
)
metrics = st.builds(MetricSample, names, names, names, names, st.integers(0, 10**12),
                    st.floats(allow_nan=False, allow_infinity=False, width=64))


@given(st.one_of(spans, metrics))
def test_parse_serialize_identity(rec):
    assert parse_record(serialize_record(rec)) == rec


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(spans, metrics), max_size=40))
def test_ingest_then_query_round_trip(recs):
    store = TelemetryStore(retention_ms=10**13)
    accepted = [r for r in recs if store.ingest(r)]
    for r in accepted:
        kind = "spans" if isinstance(r, Span) else "metrics"
        got = store.query_window(kind, r.timestamp, r.timestamp + 1)
        if isinstance(r, Span):
            assert any(g.trace_id == r.trace_id and g.span_id == r.span_id for g in got)
        else:
            assert any(g.key == r.key and g.timestamp == r.timestamp for g in got)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.floats(-1e6, 1e6)), max_size=60), st.randoms())
def test_series_strictly_increasing_under_any_order(samples, rnd):
    shuffled = list(samples)
    rnd.shuffle(shuffled)
    store = TelemetryStore()
    store.ingest_many(metric(t, v) for t, v in shuffled)
    s = store.series(SeriesKey("cpu_usage", "charging-station", "B1"))
    assert np.all(np.diff(s.timestamps) > 0)
    assert TimeSeries.from_samples(s.key, s.samples) == s
