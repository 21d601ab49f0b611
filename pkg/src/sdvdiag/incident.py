"""Incident snapshots, anomaly-free pruning and random-walk root-cause ranking.

Walks move from effect to cause: from metric node ``v`` the candidates
are the causal predecessors ``u`` (edges ``u -> v``), chosen with
probability ``weight(u -> v) / sum of weights into v``. A walk that hits
a node without predecessors is put back on its start node; that reset
uses up the step and is not counted as a visit, and neither is the
initial placement on the start node.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dependency import DependencyGraph, instance_label
from .exceptions import StartNotInGraph
from .fusion import ExtendedCausalGraph, GraphFusion, is_synthetic, render_dot
from .telemetry import SeriesKey
from .utils.validation import check_fraction, check_positive_int

DEFAULT_TIMEFRAME_MS = 15 * 60 * 1000
TRIGGERS = ("manual", "automatic")
MODES = ("all-anomalies", "single")


@dataclass(frozen=True)
class WalkConfig:
    walks: int = 1000
    steps: int = 10
    order: str = "first"
    seed: int = 0
    backtrack_penalty: float = 0.3

    def __post_init__(self):
        check_positive_int(self.walks, "walks")
        check_positive_int(self.steps, "steps")
        check_fraction(self.backtrack_penalty, "backtrack_penalty")
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")

    def to_dict(self):
        return asdict(self)


class AnomalyStore:
    """Detected anomalies, deduplicated on (series, timestamp, detector)."""

    def __init__(self, anomalies=()):
        self._lock = threading.Lock()
        self._items: dict = {}
        self.add(anomalies)

    def add(self, anomalies):
        with self._lock:
            for a in anomalies:
                self._items[(a.series_key, a.timestamp, a.detector)] = a
        return self

    def clear(self):
        with self._lock:
            self._items.clear()

    def __len__(self):
        return len(self._items)

    def query(self, start, end) -> list:
        """Anomalies with ``start <= timestamp <= end``, time-ordered."""
        with self._lock:
            items = [a for a in self._items.values() if start <= a.timestamp <= end]
        return sorted(items, key=lambda a: (a.timestamp, a.series_key, a.detector))

    def all(self) -> list:
        with self._lock:
            items = list(self._items.values())
        return sorted(items, key=lambda a: (a.timestamp, a.series_key, a.detector))


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


# --------------------------------------------------------------------------
# snapshots

@dataclass(frozen=True)
class IncidentSnapshot:
    incident_id: str
    trigger: str
    t_incident: int
    timeframe_ms: int
    graph: ExtendedCausalGraph
    anomalies: tuple = ()
    unmappable: tuple = ()

    @property
    def window(self):
        return (self.t_incident - self.timeframe_ms, self.t_incident)

    def to_dict(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "trigger": self.trigger,
            "t_incident": self.t_incident,
            "timeframe_ms": self.timeframe_ms,
            "graph": self.graph.to_dict(),
            "anomalies": [a.to_dict() for a in self.anomalies],
            "unmappable_anomalies": [a.to_dict() for a in self.unmappable],
        }


def take_snapshot(fusion: Union[GraphFusion, ExtendedCausalGraph], anomaly_store: AnomalyStore,
                  trigger: str = "manual", t_incident: int = 0,
                  timeframe_ms: int = DEFAULT_TIMEFRAME_MS,
                  incident_id: Optional[str] = None) -> IncidentSnapshot:
    """Freeze the current graph together with anomalies in ``[t - timeframe, t]``."""
    if trigger not in TRIGGERS:
        raise ValueError(f"trigger must be one of {TRIGGERS}, got {trigger!r}")
    graph = fusion.current_graph() if isinstance(fusion, GraphFusion) else fusion
    found = anomaly_store.query(t_incident - timeframe_ms, t_incident)
    mapped = [a for a in found if a.series_key in graph.owners]
    unmapped = [a for a in found if a.series_key not in graph.owners]
    return IncidentSnapshot(
        incident_id=incident_id or f"incident-{t_incident}",
        trigger=trigger,
        t_incident=int(t_incident),
        timeframe_ms=int(timeframe_ms),
        graph=graph,
        anomalies=tuple(mapped),
        unmappable=tuple(unmapped),
    )


# --------------------------------------------------------------------------
# pruning

@dataclass(frozen=True)
class AnalysisGraph:
    """Metric-level graph the walks run on."""

    nodes: tuple
    owners: Mapping
    edges: tuple
    instances: tuple = ()
    pruned_instances: tuple = ()
    dependency: DependencyGraph = field(default_factory=DependencyGraph, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes)))
        object.__setattr__(self, "owners", MappingProxyType(dict(self.owners)))
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))

    @classmethod
    def from_edges(cls, edges, nodes=None, owners=None):
        """Stand-alone graph from causal edges (owners default to the key owner)."""
        nodes = set(nodes or ())
        for e in edges:
            nodes.update((e.source, e.target))
        owners = dict(owners or {})
        for k in nodes:
            owners.setdefault(k, k.owner)
        return cls(tuple(nodes), owners, tuple(edges))

    @cached_property
    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.nodes)}

    @cached_property
    def predecessor_weights(self) -> np.ndarray:
        """``M[v, u]`` = weight of causal edge ``u -> v``."""
        n = len(self.nodes)
        m = np.zeros((n, n))
        for e in self.edges:
            m[self.index[e.target], self.index[e.source]] = e.weight
        m.flags.writeable = False
        return m

    def transition_matrix(self) -> np.ndarray:
        """Row-stochastic effect-to-cause transitions; dead ends are zero rows."""
        m = self.predecessor_weights
        tot = m.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, m / np.where(tot > 0, tot, 1.0), 0.0)

    def to_dot(self) -> str:
        return render_dot(self.dependency, self.owners, self.edges, name="incident_graph",
                          instances=self.instances)


@dataclass(frozen=True)
class PrunedSnapshot:
    snapshot: IncidentSnapshot
    graph: AnalysisGraph


def prune_anomaly_free(snapshot: IncidentSnapshot) -> PrunedSnapshot:
    """Drop instances without anomalies in the window, with their metrics and edges.

    A synthetic ``node:<w>`` instance survives when one of its own metrics
    or any instance placed on ``w`` is anomalous.
    """
    g = snapshot.graph
    anomalous = {g.owners[a.series_key] for a in snapshot.anomalies}
    instances = set(g.dependency.nodes) | set(g.owners.values())
    kept = set()
    for inst in instances:
        if inst in anomalous:
            kept.add(inst)
        elif is_synthetic(inst):
            if any(not is_synthetic(o) and g.dependency.nodes[o].node == inst[1] for o in anomalous
                   if o in g.dependency.nodes):
                kept.add(inst)
    owners = {k: o for k, o in g.owners.items() if o in kept}
    edges = tuple(e for e in g.causal_edges if e.source in owners and e.target in owners)
    graph = AnalysisGraph(
        nodes=tuple(owners), owners=owners, edges=edges,
        instances=tuple(sorted(kept)),
        pruned_instances=tuple(sorted(instances - kept)),
        dependency=g.dependency,
    )
    return PrunedSnapshot(snapshot, graph)


# --------------------------------------------------------------------------
# walks

def check_stochastic(p: np.ndarray, atol=1e-9) -> None:
    sums = p.sum(axis=1)
    live = sums > 0
    if not np.allclose(sums[live], 1.0, atol=atol):
        raise RuntimeError("transition rows do not sum to 1")


def simulate_walks(weights: np.ndarray, start: int, walks: int, steps: int,
                   rng: np.random.Generator, backtrack_penalty: Optional[float] = None):
    """Run ``walks`` parallel walkers of ``steps`` steps from ``start``.

    ``weights[v, u]`` is the weight of moving from ``v`` to ``u``.
    ``backtrack_penalty`` (second order) scales the weight of returning to
    the previous node before renormalization; None means first order.
    Every step draws exactly one uniform per walker, so a penalty of 1
    reproduces the first-order stream.

    Returns ``(visit counts per node, number of immediate backtracks)``.
    """
    n = weights.shape[0]
    pos = np.full(walks, start, dtype=np.int64)
    prev = np.full(walks, -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    rows_idx = np.arange(walks)
    backtracks = 0
    for _ in range(steps):
        rows = weights[pos]
        if backtrack_penalty is not None and backtrack_penalty != 1.0:
            rows = rows.copy()
            has_prev = prev >= 0
            rows[rows_idx[has_prev], prev[has_prev]] *= backtrack_penalty
            # a penalty of 0 on the only candidate would strand the walker
            stuck = (rows.sum(axis=1) == 0) & (weights[pos].sum(axis=1) > 0)
            rows[stuck] = weights[pos[stuck]]
        cum = np.cumsum(rows, axis=1)
        total = cum[:, -1]
        u = rng.random(walks)
        nxt = (cum <= (u * total)[:, None]).sum(axis=1)
        dead = total <= 0
        live = ~dead
        nxt = np.minimum(nxt, n - 1)
        # rounding at the top end can land on a trailing zero-weight column
        bad = live & (rows[rows_idx, nxt] <= 0)
        if bad.any():
            for i in np.flatnonzero(bad):
                nxt[i] = int(np.flatnonzero(rows[i] > 0)[-1])
        backtracks += int(np.sum(live & (nxt == prev)))
        counts += np.bincount(nxt[live], minlength=n)
        prev = np.where(live, pos, -1)
        pos = np.where(live, nxt, start)
    return counts, backtracks


def _as_graph(pruned) -> AnalysisGraph:
    if isinstance(pruned, PrunedSnapshot):
        return pruned.graph
    if isinstance(pruned, AnalysisGraph):
        return pruned
    raise TypeError(f"expected PrunedSnapshot or AnalysisGraph, got {type(pruned).__name__}")


def _walk_counts(pruned, starts: Sequence, config: WalkConfig, second_order: bool, n_jobs=1) -> dict:
    graph = _as_graph(pruned)
    starts = [SeriesKey(*s) for s in starts]
    if not starts:
        raise ValueError("at least one start node is required")
    for s in starts:
        if s not in graph.index:
            raise StartNotInGraph(f"start node {s.label} is not in the analysis graph")
    weights = graph.predecessor_weights
    check_stochastic(graph.transition_matrix())
    penalty = config.backtrack_penalty if second_order else None
    seeds = np.random.SeedSequence(config.seed).spawn(len(starts))

    def run(i):
        rng = np.random.default_rng(seeds[i])
        c, _ = simulate_walks(weights, graph.index[starts[i]], config.walks, config.steps, rng, penalty)
        return c

    if n_jobs and n_jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]
    total = np.sum(parts, axis=0)
    return {k: int(total[i]) for i, k in enumerate(graph.nodes)}


def random_walk_first_order(pruned, starts, config: WalkConfig = WalkConfig(), n_jobs=1) -> dict:
    """Visit counts summed over all starts (``config.walks`` walks each)."""
    return _walk_counts(pruned, starts, config, second_order=False, n_jobs=n_jobs)


def random_walk_second_order(pruned, starts, config: WalkConfig = WalkConfig(), n_jobs=1) -> dict:
    """As first order, with the previous node's weight scaled by the backtrack penalty."""
    return _walk_counts(pruned, starts, config, second_order=True, n_jobs=n_jobs)


# --------------------------------------------------------------------------
# ranking

@dataclass(frozen=True)
class RankedCause:
    node: str
    instance: str
    count: int
    score: float

    def to_dict(self):
        return {"node": self.node, "instance": self.instance, "count": self.count, "score": self.score}


@dataclass(frozen=True)
class RootCauseRanking:
    causes: tuple = ()
    config: Optional[WalkConfig] = None
    starts: tuple = ()

    def __len__(self):
        return len(self.causes)

    def __iter__(self):
        return iter(self.causes)

    @property
    def top(self) -> Optional[RankedCause]:
        return self.causes[0] if self.causes else None

    def position(self, node_label: str) -> Optional[int]:
        """1-based rank of a metric node, None when absent."""
        for i, c in enumerate(self.causes, start=1):
            if c.node == node_label:
                return i
        return None

    def to_json(self) -> str:
        return _dump_json([c.to_dict() for c in self.causes])


def rank_root_causes(counts: Mapping, top_k: Optional[int] = None, owners: Optional[Mapping] = None,
                     config: Optional[WalkConfig] = None, starts=()) -> RootCauseRanking:
    """Descending visit counts, ties broken by node id; scores sum to 1."""
    items = []
    for key, c in counts.items():
        if c <= 0:
            continue
        if isinstance(key, SeriesKey):
            label = key.label
            owner = (owners or {}).get(key, key.owner)
            inst = instance_label(owner)
        else:
            label, inst = str(key), str((owners or {}).get(key, ""))
        items.append((label, inst, int(c)))
    items.sort(key=lambda t: (-t[2], t[0]))
    if top_k is not None:
        items = items[:top_k]
    total = sum(t[2] for t in items)
    causes = tuple(RankedCause(l, i, c, c / total) for l, i, c in items)
    return RootCauseRanking(causes, config, tuple(getattr(s, "label", s) for s in starts))


class RandomWalkRanker(BaseEstimator):
    """Estimator-style ranking: ``fit`` on a pruned snapshot, ``rank`` from starts.

    Parameters
    ----------
    walks, steps : int
    order : {"first", "second"}
    backtrack_penalty : float
        Second order only.
    random_state : int
    n_jobs : int
        Starts are walked in parallel threads with per-start seeds, so the
        result does not depend on ``n_jobs``.
    """

    def __init__(self, walks=1000, steps=10, order="first", backtrack_penalty=0.3,
                 random_state=0, n_jobs=1):
        self.walks = walks
        self.steps = steps
        self.order = order
        self.backtrack_penalty = backtrack_penalty
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return WalkConfig(self.walks, self.steps, self.order, self.random_state, self.backtrack_penalty)

    def fit(self, pruned, y=None):
        self.graph_ = _as_graph(pruned)
        self.config_ = self._config()
        return self

    def visit_counts(self, starts) -> dict:
        check_is_fitted(self, "graph_")
        return _walk_counts(self.graph_, starts, self.config_, self.order == "second", self.n_jobs)

    def rank(self, starts, top_k=None) -> RootCauseRanking:
        counts = self.visit_counts(starts)
        return rank_root_causes(counts, top_k, self.graph_.owners, self.config_, starts)


# --------------------------------------------------------------------------
# orchestration

@dataclass(frozen=True)
class AutoTrigger:
    """Fires on the first anomaly whose score exceeds ``threshold``."""

    threshold: float = 6.0

    def fire(self, anomalies) -> Optional[int]:
        for a in sorted(anomalies, key=lambda a: (a.timestamp, a.series_key)):
            if a.score > self.threshold:
                return a.timestamp
        return None


@dataclass(frozen=True)
class AnalysisOptions:
    mode: str = "all-anomalies"
    #: single mode: series label to analyze; defaults to the highest-score anomaly
    anomaly: Optional[str] = None
    walk: WalkConfig = WalkConfig()
    timeframe_ms: int = DEFAULT_TIMEFRAME_MS
    top_k: Optional[int] = None
    incident_id: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class IncidentResult:
    ranking: RootCauseRanking
    snapshot: IncidentSnapshot
    pruned: PrunedSnapshot
    starts: tuple = ()
    note: str = ""
    paths: Mapping = field(default_factory=dict)


def _select_starts(pruned: PrunedSnapshot, options: AnalysisOptions) -> list:
    graph = pruned.graph
    anomalies = [a for a in pruned.snapshot.anomalies if a.series_key in graph.index]
    if options.mode == "single":
        if options.anomaly is not None:
            key = SeriesKey.parse(options.anomaly)
            if key not in graph.index:
                raise StartNotInGraph(f"anomaly series {options.anomaly} is not in the analysis graph")
            return [key]
        if not anomalies:
            return []
        best = max(anomalies, key=lambda a: (a.score, -a.timestamp))
        return [best.series_key]
    return sorted({a.series_key for a in anomalies})


def analyze_incident(fusion, anomaly_store: AnomalyStore, trigger: str = "manual", t_incident: int = 0,
                     options: AnalysisOptions = AnalysisOptions(), out_dir=None, n_jobs=1) -> IncidentResult:
    """Snapshot, prune, walk and rank; optionally persist the incident artifacts."""
    snapshot = take_snapshot(fusion, anomaly_store, trigger, t_incident, options.timeframe_ms,
                             options.incident_id)
    pruned = prune_anomaly_free(snapshot)
    starts = _select_starts(pruned, options)
    note = ""
    if not starts:
        note = "no anomalies in the snapshot window; nothing to rank"
        ranking = RootCauseRanking((), options.walk, ())
    else:
        counts = _walk_counts(pruned, starts, options.walk, options.walk.order == "second", n_jobs)
        ranking = rank_root_causes(counts, options.top_k, pruned.graph.owners, options.walk, starts)
    result = IncidentResult(ranking, snapshot, pruned, tuple(starts), note)
    if out_dir is not None:
        paths = write_incident(result, out_dir, options)
        result = IncidentResult(ranking, snapshot, pruned, tuple(starts), note, paths)
    return result


def write_incident(result: IncidentResult, out_dir, options: AnalysisOptions) -> dict:
    base = Path(out_dir) / result.snapshot.incident_id
    base.mkdir(parents=True, exist_ok=True)
    snap = result.snapshot.to_dict()
    snap["analysis"] = {
        "mode": options.mode,
        "walk": options.walk.to_dict(),
        "top_k": options.top_k,
        "starts": [s.label for s in result.starts],
        "kept_instances": [instance_label(i) for i in result.pruned.graph.instances],
        "pruned_instances": [instance_label(i) for i in result.pruned.graph.pruned_instances],
        "note": result.note,
    }
    paths = {
        "snapshot": base / "snapshot.json",
        "pruned": base / "pruned.dot",
        "ranking": base / "ranking.json",
    }
    paths["snapshot"].write_text(_dump_json(snap), encoding="utf-8")
    paths["pruned"].write_text(result.pruned.graph.to_dot(), encoding="utf-8")
    paths["ranking"].write_text(result.ranking.to_json(), encoding="utf-8")
    return paths
