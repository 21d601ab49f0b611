"""End-to-end engine: ingest -> graph -> detect -> discover -> fuse -> analyze."""

from __future__ import annotations

import logging
from typing import Iterable, Optional

from .anomaly import (
    SelectorPolicy,
    extract_features,
    make_detector,
    select_detector,
)
from .causal import CausalModel, make_discovery, refit_on_change
from .config import EngineConfig
from .dependency import DependencyGraph, topology_changed, update
from .exceptions import EmptySeries, InsufficientHistory, NotYetBuilt
from .fusion import ExtendedCausalGraph, GraphFusion
from .incident import AnalysisOptions, AnomalyStore, AutoTrigger, IncidentResult, analyze_incident
from .telemetry import TelemetryStore

log = logging.getLogger(__name__)


class DiagnosisEngine:
    """Stateful wrapper holding the store, graphs and anomalies of one deployment."""

    def __init__(self, config: EngineConfig = EngineConfig(), policy: Optional[SelectorPolicy] = None):
        self.config = config
        self.store = TelemetryStore(config.retention_ms)
        self.anomalies = AnomalyStore()
        self.fusion = GraphFusion()
        self.graph = DependencyGraph()
        self.last_change = None
        self.causal_model: Optional[CausalModel] = None
        self.detector_choice: dict = {}
        if policy is None and config.anomaly.policy:
            policy = SelectorPolicy.load(config.anomaly.policy)
        self.policy = policy

    # -- ingestion and graph ---------------------------------------------
    def ingest(self, records: Iterable) -> int:
        return self.store.ingest_many(records)

    @property
    def now(self) -> int:
        wm = self.store.watermark
        if wm is None:
            raise EmptySeries("no telemetry has been ingested")
        return wm

    def build_graph(self) -> DependencyGraph:
        new = update(self.graph, self.store.spans())
        _, self.last_change = topology_changed(self.graph, new)
        self.graph = new
        return new

    # -- anomalies -------------------------------------------------------
    def _detector_for(self, series):
        if self.policy is not None:
            return select_detector(extract_features(series), self.policy)
        return self.config.anomaly.detector, dict(self.config.anomaly.params)

    def detect(self, start=None, end=None) -> list:
        """Run detection on every stored series and record the anomalies."""
        found = []
        for series in self.store.all_series(start, end):
            name, params = self._detector_for(series)
            self.detector_choice[series.key] = (name, params)
            try:
                found.extend(make_detector(name, params).detect(series))
            except InsufficientHistory as exc:
                log.info("skipping %s: %s", series.key.label, exc)
        self.anomalies.add(found)
        return found

    # -- causality -------------------------------------------------------
    def _discovery_series(self, end=None):
        c = self.config.causal
        end = self.now + 1 if end is None else end
        return self.store.all_series(end - c.window_ms, end, min_length=3 * c.max_lag)

    def discover(self, end=None) -> CausalModel:
        c = self.config.causal
        est = make_discovery(c.method, max_lag=c.max_lag, weight_threshold=c.weight_threshold,
                             max_gap=c.max_gap)
        est.fit(self._discovery_series(end), graph_version=self.graph.version)
        self.causal_model = est.model_
        return self.causal_model

    def refit(self, end=None) -> CausalModel:
        """Incremental rediscovery after the latest topology change."""
        if self.causal_model is None:
            return self.discover(end)
        if self.last_change:
            self.causal_model = refit_on_change(self.causal_model, self.last_change,
                                                self._discovery_series(end))
        return self.causal_model

    def fuse(self) -> ExtendedCausalGraph:
        if self.causal_model is None:
            raise NotYetBuilt("run causal discovery before fusion")
        return self.fusion.build(self.graph, self.store.series_keys(), self.causal_model,
                                 built_at=self.now)

    # -- incidents -------------------------------------------------------
    def auto_trigger(self) -> Optional[int]:
        return AutoTrigger(self.config.incident.auto_trigger_score).fire(self.anomalies.all())

    def options(self, **overrides) -> AnalysisOptions:
        inc = self.config.incident
        kw = dict(mode=inc.mode, walk=self.config.walk, timeframe_ms=inc.timeframe_ms, top_k=inc.top_k)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return AnalysisOptions(**kw)

    def analyze(self, t_incident: Optional[int] = None, trigger: str = "manual", out_dir=None,
                n_jobs: int = 1, **overrides) -> IncidentResult:
        t = self.now if t_incident is None else int(t_incident)
        return analyze_incident(self.fusion, self.anomalies, trigger, t, self.options(**overrides),
                                out_dir=out_dir, n_jobs=n_jobs)

    def run(self, records=None, t_incident: Optional[int] = None, out_dir=None, n_jobs: int = 1,
            **overrides) -> IncidentResult:
        """All stages in order on whatever the store holds (plus ``records``)."""
        if records is not None:
            self.ingest(records)
        self.build_graph()
        self.detect()
        self.discover()
        self.fuse()
        return self.analyze(t_incident, out_dir=out_dir, n_jobs=n_jobs, **overrides)
