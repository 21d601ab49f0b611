import json

import numpy as np
import pytest

from sdvdiag.dependency import build_dependency_graph
from sdvdiag.exceptions import InvalidTopology, UnknownTarget
from sdvdiag.simulator import (
    STATION_SERVICE,
    VEHICLE_SERVICE,
    FaultSpec,
    FleetSimulator,
    LoadModel,
    Topology,
    inject_fault,
    simulate,
)
from sdvdiag.telemetry import SeriesKey, serialize_record


def cpu(sim, service, instance):
    key = SeriesKey("cpu_usage", service, instance)
    return np.array([m.value for m in sim.metrics if m.key == key])


def shift_in_sigmas(sim, service, instance):
    x = cpu(sim, service, instance)
    onset = (sim.ground_truth.onset_ms - sim.start_ms) // sim.interval_ms
    before, after = x[:onset], x[onset + 2:]
    return (after.mean() - before.mean()) / before.std()


def test_zero_rate_has_no_spans_and_stationary_metrics():
    sim = simulate(horizon_s=600, request_rate=0.0, seed=1)
    assert sim.spans == ()
    load = LoadModel()
    for inst, _ in Topology().stations:
        x = cpu(sim, STATION_SERVICE, inst)
        assert abs(x.mean() - load.station_base_cpu) < 0.005
        assert abs(x[:300].mean() - x[300:].mean()) < 0.005


def test_clean_graph_equals_declared(clean_sim):
    g = build_dependency_graph(clean_sim.spans)
    assert set(g.nodes) == set(clean_sim.ground_truth.declared_nodes)
    assert set(g.edges) == set(clean_sim.ground_truth.declared_edges)


def test_every_span_lies_on_declared_edge(clean_sim):
    declared = clean_sim.ground_truth.declared_edges
    seen = {((VEHICLE_SERVICE, s.instance), (s.peer_service, s.peer_instance))
            for s in clean_sim.spans if s.peer_service is not None}
    assert seen == set(declared)


def test_doubled_rate_raises_station_cpu():
    lo = simulate(horizon_s=300, request_rate=2.0, seed=4)
    hi = simulate(horizon_s=300, request_rate=4.0, seed=4)
    for inst, _ in Topology().stations:
        assert cpu(hi, STATION_SERVICE, inst).mean() > cpu(lo, STATION_SERVICE, inst).mean()


def test_colocated_station_drops(faulted_sim):
    assert shift_in_sigmas(faulted_sim, STATION_SERVICE, "B2") <= -2.0


@pytest.mark.parametrize("inst", ["B3", "B4", "B5", "B6"])
def test_other_workers_rise(faulted_sim, inst):
    assert shift_in_sigmas(faulted_sim, STATION_SERVICE, inst) >= 2.0


@pytest.mark.parametrize("inst", ["V1", "V2", "V3"])
def test_vehicles_rise(faulted_sim, inst):
    assert shift_in_sigmas(faulted_sim, VEHICLE_SERVICE, inst) >= 2.0


def test_target_rises(faulted_sim):
    assert shift_in_sigmas(faulted_sim, STATION_SERVICE, "B1") >= 2.0


def test_effect_groups(faulted_sim):
    gt = faulted_sim.ground_truth
    assert gt.fault_metric == SeriesKey("cpu_usage", STATION_SERVICE, "B1")
    assert [k.instance for k in gt.effect_groups["colocated_drop"]] == ["B2"]
    assert sorted(k.instance for k in gt.effect_groups["other_node_rise"]) == ["B3", "B4", "B5", "B6"]
    assert len(gt.expected_anomalous) == 9
    assert faulted_sim.start_ms < gt.onset_ms < faulted_sim.end_ms


def test_determinism(tmp_path):
    fault = FaultSpec.parse("cpu:B3@worker2")
    a = simulate(horizon_s=120, seed=7, fault=fault)
    b = simulate(horizon_s=120, seed=7, fault=fault)
    assert [serialize_record(r) for r in a.records()] == [serialize_record(r) for r in b.records()]
    pa, pb = a.write(tmp_path / "a"), b.write(tmp_path / "b")
    for name in pa:
        assert pa[name].read_bytes() == pb[name].read_bytes()


def test_inject_fault_shares_noise_before_onset():
    clean = simulate(horizon_s=300, seed=2)
    faulted = inject_fault(clean, FaultSpec("B1"))
    onset = faulted.ground_truth.onset_ms
    assert [m for m in clean.metrics if m.timestamp < onset] == \
        [m for m in faulted.metrics if m.timestamp < onset]


def test_ground_truth_file(tmp_path, faulted_sim):
    paths = faulted_sim.write(tmp_path)
    gt = json.loads(paths["ground_truth"].read_text())
    assert gt["fault_target"] == [STATION_SERVICE, "B1"]
    assert len(gt["declared_edges"]) == 18
    assert {n["node"] for n in gt["declared_nodes"]} == {"worker1", "worker2", "worker3"}


def test_unknown_target():
    with pytest.raises(UnknownTarget):
        simulate(horizon_s=60, fault=FaultSpec("B9"))
    with pytest.raises(UnknownTarget):
        simulate(horizon_s=60, fault=FaultSpec("B1", node="worker3"))


def test_onset_outside_horizon():
    with pytest.raises(ValueError):
        simulate(horizon_s=60, fault=FaultSpec("B1", onset_ms=0))


@pytest.mark.parametrize("kw", [dict(workers=0), dict(stations_per_worker=0), dict(vehicles=0)])
def test_invalid_topology(kw):
    with pytest.raises(InvalidTopology):
        simulate(Topology(**kw), horizon_s=10)


def test_fault_spec_parse():
    f = FaultSpec.parse("cpu:B1@worker1", magnitude=0.5)
    assert (f.kind, f.target, f.node, f.magnitude) == ("cpu_saturation", "B1", "worker1", 0.5)
    assert FaultSpec.parse("cpu:V2").node is None
    for bad in ["B1", "disk:B1", "cpu:"]:
        with pytest.raises(ValueError):
            FaultSpec.parse(bad)


def test_estimator_front_end():
    est = FleetSimulator(horizon_s=60, seed=5).fit()
    assert est.get_params()["seed"] == 5
    assert est.generate().metrics == simulate(horizon_s=60, seed=5).metrics


def test_causal_recoverability():
    from sdvdiag.pipeline import DiagnosisEngine

    good = 0
    for seed in range(20):
        sim = simulate(seed=seed, fault=FaultSpec.parse("cpu:B1@worker1"))
        engine = DiagnosisEngine()
        engine.ingest(sim.records())
        engine.build_graph()
        model = engine.discover()
        gt = sim.ground_truth
        out = {e.target for e in model.edges if e.source == gt.fault_metric}
        hit = bool(out)  # target rise: the faulty metric drives something
        for group in ("colocated_drop", "other_node_rise", "vehicle_rise"):
            hit += set(gt.effect_groups[group]) <= out
        good += hit >= 3
    assert good >= 18
