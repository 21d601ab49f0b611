"""Deterministic smart-charging fleet simulator with CPU-saturation faults.

Vehicle-service instances receive requests from vehicles and forward
each one to a charging-station instance chosen by a load balancer.
Every request yields three spans (vehicle server span, vehicle client
span naming the callee, station server span). Metrics are sampled once
per interval:

* ``cpu_usage`` per instance: baseline + per-request cost + noise
* ``tx_bytes`` per worker node: baseline + bytes per served request + noise

A ``cpu_saturation`` fault adds a jittery load ``f(t)`` to the target
station and propagates through fixed couplings:

* target station: ``+ f(t)``
* stations on the same worker: ``- contention * f(t-1)``
* vehicle services (they all call the target): ``+ fallback * f(t-1)``
* stations on other workers: ``+ reroute * f(t-2)``
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import InvalidTopology, UnknownTarget
from .telemetry import (
    NODE_SERVICE,
    MetricSample,
    SeriesKey,
    Span,
    record_sort_key,
    write_records,
)

STATION_SERVICE = "charging-station"
VEHICLE_SERVICE = "vehicle-service"
DEFAULT_START_MS = 1_700_000_000_000
EFFECT_GROUPS = ("target_rise", "colocated_drop", "other_node_rise", "vehicle_rise")


@dataclass(frozen=True)
class Topology:
    workers: int = 3
    stations_per_worker: int = 2
    vehicles: int = 3
    control_node: str = "control"

    def validate(self):
        for name in ("workers", "stations_per_worker", "vehicles"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise InvalidTopology(f"{name} must be a positive integer, got {v!r}")
        return self

    @property
    def worker_names(self) -> tuple:
        return tuple(f"worker{i + 1}" for i in range(self.workers))

    @property
    def stations(self) -> tuple:
        """``(instance, worker)`` pairs: B1, B2 on worker1, B3, B4 on worker2, ..."""
        out = []
        for w, worker in enumerate(self.worker_names):
            for s in range(self.stations_per_worker):
                out.append((f"B{w * self.stations_per_worker + s + 1}", worker))
        return tuple(out)

    @property
    def vehicle_instances(self) -> tuple:
        names = self.worker_names
        return tuple((f"V{i + 1}", names[i % len(names)]) for i in range(self.vehicles))

    @property
    def placement(self) -> dict:
        out = {(VEHICLE_SERVICE, v): w for v, w in self.vehicle_instances}
        out.update({(STATION_SERVICE, s): w for s, w in self.stations})
        return out

    @property
    def declared_nodes(self) -> frozenset:
        return frozenset(self.placement)

    @property
    def declared_edges(self) -> frozenset:
        return frozenset(
            ((VEHICLE_SERVICE, v), (STATION_SERVICE, s))
            for v, _ in self.vehicle_instances for s, _ in self.stations
        )

    def find_instance(self, instance: str):
        for (svc, inst), worker in self.placement.items():
            if inst == instance:
                return (svc, inst), worker
        return None, None


_FAULT_RE = re.compile(r"^(?P<kind>[a-z_]+):(?P<target>[^@\s]+)(?:@(?P<node>[^\s]+))?$")
_FAULT_KINDS = {"cpu": "cpu_saturation", "cpu_saturation": "cpu_saturation"}


@dataclass(frozen=True)
class FaultSpec:
    target: str
    onset_ms: Optional[int] = None
    magnitude: float = 0.35
    duration_ms: Optional[int] = None
    kind: str = "cpu_saturation"
    node: Optional[str] = None

    @classmethod
    def parse(cls, text: str, **kw) -> "FaultSpec":
        """Parse ``cpu:B1@worker1`` (the ``@worker`` part is optional)."""
        m = _FAULT_RE.match(text.strip())
        if not m or m.group("kind") not in _FAULT_KINDS:
            raise ValueError(f"fault must look like cpu:<instance>[@<worker>], got {text!r}")
        return cls(target=m.group("target"), kind=_FAULT_KINDS[m.group("kind")], node=m.group("node"), **kw)


@dataclass(frozen=True)
class LoadModel:
    """Coefficients of the coupled load model; CPU values are core fractions."""

    station_base_cpu: float = 0.15
    station_cpu_per_request: float = 0.03
    vehicle_base_cpu: float = 0.10
    vehicle_cpu_per_request: float = 0.02
    cpu_noise: float = 0.01
    tx_base_bytes: float = 2000.0
    tx_bytes_per_request: float = 40000.0
    tx_noise: float = 500.0
    fault_jitter: float = 0.5
    contention: float = 0.25
    reroute: float = 0.2
    fallback: float = 0.2
    #: share of the target's traffic kept while the fault is active
    target_share: float = 0.5
    slow_ms: int = 250


@dataclass(frozen=True)
class GroundTruth:
    fault_target: Optional[tuple]
    fault_metric: Optional[SeriesKey]
    onset_ms: Optional[int]
    end_ms: Optional[int]
    effect_groups: dict
    declared_nodes: frozenset
    declared_edges: frozenset
    placement: dict

    @property
    def expected_anomalous(self) -> frozenset:
        return frozenset(k for keys in self.effect_groups.values() for k in keys)

    def to_dict(self) -> dict:
        return {
            "fault_target": list(self.fault_target) if self.fault_target else None,
            "fault_metric": self.fault_metric.label if self.fault_metric else None,
            "onset_ms": self.onset_ms,
            "end_ms": self.end_ms,
            "effect_groups": {g: [k.label for k in keys] for g, keys in self.effect_groups.items()},
            "expected_anomalous_metrics": sorted(k.label for k in self.expected_anomalous),
            "declared_nodes": [
                {"service": s, "instance": i, "node": self.placement[(s, i)]}
                for s, i in sorted(self.declared_nodes)
            ],
            "declared_edges": [{"from": list(a), "to": list(b)} for a, b in sorted(self.declared_edges)],
        }


@dataclass(frozen=True)
class Simulation:
    spans: tuple
    metrics: tuple
    ground_truth: GroundTruth
    topology: Topology
    horizon_s: int
    request_rate: float
    seed: int
    start_ms: int
    interval_ms: int
    load: LoadModel
    fault: Optional[FaultSpec] = None

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.horizon_s * self.interval_ms

    def records(self) -> list:
        return sorted(self.spans + self.metrics, key=record_sort_key)

    def write(self, directory) -> dict:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "spans": directory / "spans.sdvt",
            "metrics": directory / "metrics.sdvt",
            "ground_truth": directory / "ground_truth.json",
        }
        write_records(paths["spans"], sorted(self.spans, key=record_sort_key))
        write_records(paths["metrics"], sorted(self.metrics, key=record_sort_key))
        gt = self.ground_truth.to_dict()
        gt["simulation"] = {
            "seed": self.seed, "horizon_s": self.horizon_s, "request_rate": self.request_rate,
            "start_ms": self.start_ms, "interval_ms": self.interval_ms,
            "topology": asdict(self.topology), "load": asdict(self.load),
            "fault": asdict(self.fault) if self.fault else None,
        }
        paths["ground_truth"].write_text(json.dumps(gt, indent=2) + "\n", encoding="utf-8")
        return paths


def _resolve_fault(topology, fault, start_ms, horizon_s, interval_ms):
    inst_id, worker = topology.find_instance(fault.target)
    if inst_id is None:
        raise UnknownTarget(f"fault target {fault.target!r} is not an instance of the topology")
    if fault.node is not None and fault.node != worker:
        raise UnknownTarget(f"instance {fault.target} runs on {worker}, not {fault.node}")
    end = start_ms + horizon_s * interval_ms
    onset = fault.onset_ms
    if onset is None:
        onset = start_ms + (2 * horizon_s // 3) * interval_ms
    if not (start_ms <= onset < end):
        raise ValueError(f"fault onset {onset} lies outside the simulation horizon [{start_ms}, {end})")
    stop = end if fault.duration_ms is None else min(end, onset + fault.duration_ms)
    return inst_id, worker, onset, stop


def simulate(topology: Topology = Topology(), horizon_s: int = 1800, request_rate: float = 3.0,
             seed: int = 0, fault: Optional[FaultSpec] = None, load: LoadModel = LoadModel(),
             start_ms: int = DEFAULT_START_MS, interval_ms: int = 1000) -> Simulation:
    """Generate spans, metrics and ground truth.

    ``request_rate`` is the mean number of vehicle requests per interval,
    spread evenly over the vehicle services. All random draws happen in a
    fixed order that does not depend on the fault, so a faulted run shares
    its noise with the unfaulted run of the same seed.
    """
    topology.validate()
    if horizon_s < 1:
        raise InvalidTopology("horizon must be at least one interval")
    if request_rate < 0:
        raise ValueError("request_rate must be non-negative")
    T = int(horizon_s)
    stations = topology.stations
    vehicles = topology.vehicle_instances
    workers = topology.worker_names
    S, V = len(stations), len(vehicles)
    rng = np.random.default_rng(seed)

    jitter = rng.normal(size=T)
    per_vehicle = rng.poisson(request_rate / V, size=(T, V))
    R = int(per_vehicle.sum())
    route_u = rng.random(R)
    offsets = rng.integers(0, 800, size=R)
    proc = rng.lognormal(mean=2.0, sigma=0.4, size=R)
    net = rng.integers(1, 6, size=R)
    noise = rng.normal(size=(T, S + V + len(workers)))

    f = np.zeros(T)
    target = target_idx = None
    onset = stop = None
    if fault is not None:
        target, target_worker, onset, stop = _resolve_fault(topology, fault, start_ms, T, interval_ms)
        ts = start_ms + np.arange(T) * interval_ms
        active = (ts >= onset) & (ts < stop)
        f[active] = fault.magnitude * np.maximum(
            0.0, 1.0 + load.fault_jitter * np.clip(jitter[active], -2.0, 2.0))
        if target[0] == STATION_SERVICE:
            target_idx = [s for s, _ in stations].index(target[1])

    def lagged(k):
        out = np.zeros(T)
        out[k:] = f[:T - k]
        return out

    f1, f2 = lagged(1), lagged(2)

    # routing: uniform over stations, target share cut while it is saturated
    served = np.zeros((T, S), dtype=np.int64)
    base_p = np.full(S, 1.0 / S)
    cum_normal = np.cumsum(base_p)
    cum_fault = None
    if target_idx is not None:
        p = base_p.copy()
        p[target_idx] *= load.target_share
        cum_fault = np.cumsum(p / p.sum())

    spans = []
    r = 0
    for t in range(T):
        cum = cum_fault if (cum_fault is not None and f1[t] > 0) else cum_normal
        t0 = start_ms + t * interval_ms
        for v in range(V):
            v_inst, v_worker = vehicles[v]
            for _ in range(per_vehicle[t, v]):
                j = min(int(np.searchsorted(cum, route_u[r], side="right")), S - 1)
                served[t, j] += 1
                s_inst, s_worker = stations[j]
                d_proc = int(proc[r]) + 1
                if j == target_idx and f[t] > 0:
                    d_proc += load.slow_ms
                arr = t0 + int(offsets[r])
                n = int(net[r])
                trace = f"tr-{seed}-{r:07d}"
                root, client, server = f"{r:07d}-0", f"{r:07d}-1", f"{r:07d}-2"
                s_start = arr + 1 + n
                s_end = s_start + d_proc
                c_end = s_end + n
                spans.append(Span(trace, root, VEHICLE_SERVICE, v_inst, v_worker, arr, c_end + 1))
                spans.append(Span(trace, client, VEHICLE_SERVICE, v_inst, v_worker, arr + 1, c_end,
                                  parent_span_id=root, peer_service=STATION_SERVICE, peer_instance=s_inst))
                spans.append(Span(trace, server, STATION_SERVICE, s_inst, s_worker, s_start, s_end,
                                  parent_span_id=client))
                r += 1

    cpu_station = (load.station_base_cpu + load.station_cpu_per_request * served
                   + load.cpu_noise * noise[:, :S])
    cpu_vehicle = (load.vehicle_base_cpu + load.vehicle_cpu_per_request * per_vehicle
                   + load.cpu_noise * noise[:, S:S + V])
    groups = {g: () for g in EFFECT_GROUPS}
    fault_metric = None
    if target is not None:
        fault_metric = SeriesKey("cpu_usage", *target)
        groups["target_rise"] = (fault_metric,)
        if target_idx is not None:
            cpu_station[:, target_idx] += f
            colo, other = [], []
            for j, (s_inst, s_worker) in enumerate(stations):
                if j == target_idx:
                    continue
                if s_worker == target_worker:
                    cpu_station[:, j] -= load.contention * f1
                    colo.append(SeriesKey("cpu_usage", STATION_SERVICE, s_inst))
                else:
                    cpu_station[:, j] += load.reroute * f2
                    other.append(SeriesKey("cpu_usage", STATION_SERVICE, s_inst))
            cpu_vehicle += load.fallback * f1[:, None]
            groups["colocated_drop"] = tuple(colo)
            groups["other_node_rise"] = tuple(other)
            groups["vehicle_rise"] = tuple(SeriesKey("cpu_usage", VEHICLE_SERVICE, v) for v, _ in vehicles)
        else:
            vi = [v for v, _ in vehicles].index(target[1])
            cpu_vehicle[:, vi] += f
    cpu_station = np.maximum(cpu_station, 0.0)
    cpu_vehicle = np.maximum(cpu_vehicle, 0.0)

    worker_of_station = np.array([workers.index(w) for _, w in stations])
    tx = np.zeros((T, len(workers)))
    for j in range(S):
        tx[:, worker_of_station[j]] += served[:, j]
    tx = np.maximum(load.tx_base_bytes + load.tx_bytes_per_request * tx
                    + load.tx_noise * noise[:, S + V:], 0.0)

    metrics = []
    for t in range(T):
        ts = start_ms + t * interval_ms
        for j, (s_inst, s_worker) in enumerate(stations):
            metrics.append(MetricSample("cpu_usage", STATION_SERVICE, s_inst, s_worker, ts,
                                        round(float(cpu_station[t, j]), 6)))
        for v, (v_inst, v_worker) in enumerate(vehicles):
            metrics.append(MetricSample("cpu_usage", VEHICLE_SERVICE, v_inst, v_worker, ts,
                                        round(float(cpu_vehicle[t, v]), 6)))
        for w, worker in enumerate(workers):
            metrics.append(MetricSample("tx_bytes", NODE_SERVICE, worker, worker, ts,
                                        round(float(tx[t, w]), 1)))

    gt = GroundTruth(
        fault_target=target,
        fault_metric=fault_metric,
        onset_ms=onset,
        end_ms=stop,
        effect_groups=groups,
        declared_nodes=topology.declared_nodes,
        declared_edges=topology.declared_edges,
        placement=topology.placement,
    )
    return Simulation(tuple(spans), tuple(metrics), gt, topology, T, request_rate, seed,
                      start_ms, interval_ms, load, fault)


def inject_fault(simulation: Simulation, fault: FaultSpec) -> Simulation:
    """Regenerate ``simulation`` with ``fault`` applied (same seed, same noise)."""
    return simulate(simulation.topology, simulation.horizon_s, simulation.request_rate,
                    simulation.seed, fault, simulation.load, simulation.start_ms,
                    simulation.interval_ms)


class FleetSimulator(BaseEstimator):
    """Estimator-style front end to :func:`simulate`.

    ``fit`` is a no-op kept for pipeline composition; ``generate`` returns
    a :class:`Simulation`.
    """

    def __init__(self, topology=Topology(), horizon_s=1800, request_rate=3.0, seed=0,
                 load=LoadModel(), start_ms=DEFAULT_START_MS, interval_ms=1000):
        self.topology = topology
        self.horizon_s = horizon_s
        self.request_rate = request_rate
        self.seed = seed
        self.load = load
        self.start_ms = start_ms
        self.interval_ms = interval_ms

    def fit(self, X=None, y=None):
        self.topology.validate()
        return self

    def generate(self, fault: Optional[FaultSpec] = None) -> Simulation:
        return simulate(self.topology, self.horizon_s, self.request_rate, self.seed, fault,
                        self.load, self.start_ms, self.interval_ms)
