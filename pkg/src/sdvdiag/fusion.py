"""Extended causal graph: dependency graph + metric nodes + pruned causal edges."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

from .causal import CausalModel
from .dependency import DependencyGraph, instance_label
from .exceptions import NotYetBuilt
from .telemetry import NODE_SERVICE, SeriesKey
from .utils.dot import dot_quote, fmt_weight


def is_synthetic(owner) -> bool:
    return owner[0] == NODE_SERVICE


def owner_of(key: SeriesKey, dependency: DependencyGraph):
    """Instance owning ``key`` in ``dependency`` or None.

    Node-level metrics (service ``"node"``) belong to a synthetic
    ``node:<compute node>`` instance, which exists when at least one
    instance runs on that compute node.
    """
    if key.service == NODE_SERVICE:
        if key.instance in dependency.compute_nodes:
            return (NODE_SERVICE, key.instance)
        return None
    return key.owner if key.owner in dependency.nodes else None


def related(dependency: DependencyGraph, a, b) -> bool:
    """Same owner, direct dependency either way, or co-location via a synthetic node."""
    if a == b:
        return True
    if is_synthetic(a) or is_synthetic(b):
        if is_synthetic(a) and is_synthetic(b):
            return False
        syn, inst = (a, b) if is_synthetic(a) else (b, a)
        node = dependency.nodes.get(inst)
        return node is not None and node.node == syn[1]
    return dependency.adjacent(a, b)


@dataclass(frozen=True)
class PartialGraph:
    dependency: DependencyGraph
    owners: Mapping
    skipped: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "owners", MappingProxyType(dict(self.owners)))


def attach_metrics(graph: DependencyGraph, metric_keys: Iterable) -> PartialGraph:
    owners, skipped = {}, []
    for key in sorted({SeriesKey(*k) for k in metric_keys}):
        owner = owner_of(key, graph)
        if owner is None:
            skipped.append(key)
        else:
            owners[key] = owner
    return PartialGraph(graph, owners, tuple(skipped))


@dataclass(frozen=True)
class ExtendedCausalGraph:
    dependency: DependencyGraph
    owners: Mapping
    causal_edges: tuple
    built_at: int = 0
    source_versions: tuple = (0, 0)
    dropped: int = 0
    skipped: tuple = ()
    extra: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "owners", MappingProxyType(dict(self.owners)))
        object.__setattr__(self, "causal_edges", tuple(sorted(self.causal_edges)))

    @property
    def metric_nodes(self) -> list:
        return sorted(self.owners)

    @property
    def synthetic_nodes(self) -> list:
        return sorted({o for o in self.owners.values() if is_synthetic(o)})

    def metrics_of(self, owner) -> list:
        return sorted(k for k, o in self.owners.items() if o == owner)

    def predecessors(self, key) -> list:
        return [e for e in self.causal_edges if e.target == key]

    def to_dot(self) -> str:
        return render_dot(self.dependency, self.owners, self.causal_edges, name="extended_causal_graph")

    def to_dict(self) -> dict:
        return {
            "built_at": self.built_at,
            "source_versions": {"graph": self.source_versions[0], "causal": self.source_versions[1]},
            "dependency": self.dependency.to_dict(),
            "metrics": [{"key": k.label, "owner": instance_label(o)} for k, o in sorted(self.owners.items())],
            "causal_edges": [
                {"from": e.source.label, "to": e.target.label, "weight": round(e.weight, 6), "lag": e.lag}
                for e in self.causal_edges
            ],
            "dropped_causal_edges": self.dropped,
            "skipped_metrics": [k.label for k in self.skipped],
        }


def prune_causal_edges(partial: PartialGraph, causal: CausalModel, built_at: int = 0) -> ExtendedCausalGraph:
    """Keep causal edges whose owners are identical or directly related."""
    dep = partial.dependency
    kept, dropped = [], 0
    for e in causal.edges:
        a, b = partial.owners.get(e.source), partial.owners.get(e.target)
        if a is not None and b is not None and related(dep, a, b):
            kept.append(e)
        else:
            dropped += 1
    return ExtendedCausalGraph(
        dependency=dep,
        owners=partial.owners,
        causal_edges=tuple(kept),
        built_at=built_at,
        source_versions=(dep.version, causal.version),
        dropped=dropped,
        skipped=partial.skipped,
    )


def render_dot(dependency: DependencyGraph, owners: Mapping, causal_edges, name="graph",
               instances: Optional[Iterable] = None) -> str:
    """DOT with instance, metric and synthetic node classes.

    Dependency edges are solid, ownership edges dotted, causal edges
    dashed and labeled with their weight.
    """
    if instances is None:
        instances = set(dependency.nodes)
    instances = set(instances) | {o for o in owners.values()}
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    for inst in sorted(instances):
        label = instance_label(inst)
        if is_synthetic(inst):
            lines.append(f"  {dot_quote(label)} [shape=box, style=\"dashed,filled\", fillcolor=lightgrey];")
        else:
            n = dependency.nodes.get(inst)
            full = n.label if n is not None else label
            lines.append(f"  {dot_quote(label)} [shape=box, label={dot_quote(full)}];")
    for key in sorted(owners):
        lines.append(f"  {dot_quote(key.label)} [shape=ellipse, label={dot_quote(key.metric)}];")
    for (a, b) in sorted(dependency.edges):
        if a in instances and b in instances:
            lines.append(f"  {dot_quote(instance_label(a))} -> {dot_quote(instance_label(b))} [style=solid];")
    for key in sorted(owners):
        lines.append(
            f"  {dot_quote(instance_label(owners[key]))} -> {dot_quote(key.label)} [style=dotted, arrowhead=none];")
    for e in sorted(causal_edges):
        lines.append(
            f"  {dot_quote(e.source.label)} -> {dot_quote(e.target.label)}"
            f" [style=dashed, label={dot_quote(fmt_weight(e.weight))}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


class GraphFusion:
    """Holds the latest extended causal graph; builds are full rebuilds."""

    def __init__(self):
        self._lock = threading.Lock()
        self._current: Optional[ExtendedCausalGraph] = None

    def build(self, dependency: DependencyGraph, metric_keys, causal: CausalModel,
              built_at: int = 0) -> ExtendedCausalGraph:
        graph = prune_causal_edges(attach_metrics(dependency, metric_keys), causal, built_at)
        with self._lock:
            self._current = graph
        return graph

    def current_graph(self) -> ExtendedCausalGraph:
        with self._lock:
            if self._current is None:
                raise NotYetBuilt("no extended causal graph has been built yet")
            return self._current
