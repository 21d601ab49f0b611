"""Instance-level dependency graph derived from spans.

An interaction ``caller -> callee`` is evidenced by a client span naming
its peer, by a child span owned by another instance, or by both (one
interaction per client span). Its time is the latest start among its
evidence spans; an edge keeps the latest interaction time and counts
interactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

from sklearn.base import BaseEstimator

from .telemetry import Span
from .utils.dot import dot_quote


def instance_label(instance_id) -> str:
    service, instance = instance_id
    if service == "node":
        return f"node:{instance}"
    return f"{service}/{instance}"


@dataclass(frozen=True)
class DependencyNode:
    id: tuple
    node: str
    first_seen: int
    last_seen: int

    @property
    def label(self):
        return f"{self.id[0]}/{self.id[1]}@{self.node}"


@dataclass(frozen=True)
class DependencyEdge:
    source: tuple
    target: tuple
    last_communication: int
    call_count: int


@dataclass(frozen=True)
class TopologyChange:
    added_nodes: tuple = ()
    removed_nodes: tuple = ()
    added_edges: tuple = ()
    removed_edges: tuple = ()
    old_version: int = 0
    new_version: int = 0

    def __bool__(self):
        return bool(self.added_nodes or self.removed_nodes or self.added_edges or self.removed_edges)

    @property
    def touched_instances(self) -> frozenset:
        out = set(self.added_nodes) | set(self.removed_nodes)
        for a, b in self.added_edges + self.removed_edges:
            out.update((a, b))
        return frozenset(out)


@dataclass(frozen=True, eq=False)
class DependencyGraph:
    """Immutable snapshot of the dependency graph.

    ``version`` is bumped by :func:`update` only when the node or edge set
    changes; attribute updates (timestamps, call counts) keep it.
    """

    nodes: Mapping = field(default_factory=dict)
    edges: Mapping = field(default_factory=dict)
    version: int = 0
    spans: Mapping = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))
        object.__setattr__(self, "edges", MappingProxyType(dict(self.edges)))
        object.__setattr__(self, "spans", MappingProxyType(dict(self.spans)))

    def __eq__(self, other):
        if not isinstance(other, DependencyGraph):
            return NotImplemented
        return (dict(self.nodes) == dict(other.nodes) and dict(self.edges) == dict(other.edges)
                and self.version == other.version)

    __hash__ = None

    @property
    def node_ids(self) -> frozenset:
        return frozenset(self.nodes)

    @property
    def edge_ids(self) -> frozenset:
        return frozenset(self.edges)

    def has_edge(self, a, b) -> bool:
        return (a, b) in self.edges

    def adjacent(self, a, b) -> bool:
        """Direct dependency in either direction."""
        return (a, b) in self.edges or (b, a) in self.edges

    def instances_on(self, compute_node: str) -> list:
        return sorted(i for i, n in self.nodes.items() if n.node == compute_node)

    @property
    def compute_nodes(self) -> list:
        return sorted({n.node for n in self.nodes.values() if n.node})

    def service_view(self) -> dict:
        """Aggregate instance edges to ``(caller service, callee service)``."""
        out = {}
        for (a, b), e in self.edges.items():
            key = (a[0], b[0])
            last, count = out.get(key, (e.last_communication, 0))
            out[key] = (max(last, e.last_communication), count + e.call_count)
        return dict(sorted(out.items()))

    def to_dot(self) -> str:
        lines = ["digraph dependencies {", "  rankdir=LR;"]
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            lines.append(f"  {dot_quote(instance_label(nid))} [label={dot_quote(n.label)}];")
        for key in sorted(self.edges):
            e = self.edges[key]
            lines.append(
                f"  {dot_quote(instance_label(e.source))} -> {dot_quote(instance_label(e.target))}"
                f" [label={dot_quote(str(e.last_communication))}];"
            )
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "nodes": [
                {"service": n.id[0], "instance": n.id[1], "node": n.node,
                 "first_seen": n.first_seen, "last_seen": n.last_seen}
                for _, n in sorted(self.nodes.items())
            ],
            "edges": [
                {"from": list(e.source), "to": list(e.target),
                 "last_communication": e.last_communication, "call_count": e.call_count}
                for _, e in sorted(self.edges.items())
            ],
        }


def _derive(span_index: Mapping):
    """Nodes and edges implied by a set of spans (order independent)."""
    nodes = {}
    node_src = {}
    for sp in span_index.values():
        nid = sp.owner
        cur = nodes.get(nid)
        if cur is None:
            nodes[nid] = [sp.node, sp.start, sp.end]
            node_src[nid] = (sp.start, sp.span_id)
        else:
            cur[1] = min(cur[1], sp.start)
            cur[2] = max(cur[2], sp.end)
            # compute node taken from the most recent span
            if (sp.start, sp.span_id) > node_src[nid]:
                node_src[nid] = (sp.start, sp.span_id)
                cur[0] = sp.node

    interactions = {}
    peer_only = {}
    for sp in span_index.values():
        peer = sp.peer
        if peer is None or peer == sp.owner:
            continue
        interactions[(sp.trace_id, sp.span_id, peer)] = [sp.owner, peer, sp.start, False]
        if peer not in nodes:
            lo, hi = peer_only.get(peer, (sp.start, sp.start))
            peer_only[peer] = (min(lo, sp.start), max(hi, sp.start))

    for sp in span_index.values():
        if sp.parent_span_id is None:
            continue
        parent = span_index.get((sp.trace_id, sp.parent_span_id))
        if parent is None or parent.owner == sp.owner:
            continue
        if parent.peer == sp.owner:
            key = (sp.trace_id, parent.span_id, sp.owner)
        else:
            key = (sp.trace_id, sp.span_id, sp.owner)
        cur = interactions.get(key)
        if cur is None:
            interactions[key] = [parent.owner, sp.owner, sp.start, True]
        else:
            # latest evidence wins, so an interaction's time never moves back
            cur[2] = max(cur[2], sp.start)
            cur[3] = True

    node_objs = {nid: DependencyNode(nid, v[0], v[1], v[2]) for nid, v in nodes.items()}
    for nid, (lo, hi) in peer_only.items():
        node_objs[nid] = DependencyNode(nid, "", lo, hi)

    agg = {}
    for caller, callee, t, _ in interactions.values():
        last, count = agg.get((caller, callee), (t, 0))
        agg[(caller, callee)] = (max(last, t), count + 1)
    edges = {k: DependencyEdge(k[0], k[1], last, count) for k, (last, count) in agg.items()}
    return node_objs, edges


def _index(spans: Iterable[Span], base: Optional[Mapping] = None) -> dict:
    index = dict(base or {})
    for sp in spans:
        index[(sp.trace_id, sp.span_id)] = sp
    return index


def build_dependency_graph(spans: Iterable[Span]) -> DependencyGraph:
    index = _index(spans)
    nodes, edges = _derive(index)
    return DependencyGraph(nodes, edges, version=1 if nodes else 0, spans=index)


def update(graph: DependencyGraph, new_spans: Iterable[Span]) -> DependencyGraph:
    """Merge spans into ``graph``; same result as rebuilding from all spans."""
    index = _index(new_spans, graph.spans)
    nodes, edges = _derive(index)
    changed = set(nodes) != set(graph.nodes) or set(edges) != set(graph.edges)
    return DependencyGraph(nodes, edges, version=graph.version + int(changed), spans=index)


def topology_changed(old: DependencyGraph, new: DependencyGraph):
    """Structural diff ignoring timestamps and counters.

    Returns ``(changed, TopologyChange)``.
    """
    old_n, new_n = set(old.nodes), set(new.nodes)
    old_e, new_e = set(old.edges), set(new.edges)
    change = TopologyChange(
        added_nodes=tuple(sorted(new_n - old_n)),
        removed_nodes=tuple(sorted(old_n - new_n)),
        added_edges=tuple(sorted(new_e - old_e)),
        removed_edges=tuple(sorted(old_e - new_e)),
        old_version=old.version,
        new_version=new.version,
    )
    return bool(change), change


class DependencyGraphBuilder(BaseEstimator):
    """Estimator-style wrapper: ``fit`` builds, ``partial_fit`` updates.

    Attributes
    ----------
    graph_ : DependencyGraph
    last_change_ : TopologyChange
        Structural diff produced by the latest ``fit``/``partial_fit`` call.
    """

    def fit(self, spans, y=None):
        self.graph_ = build_dependency_graph(spans)
        _, self.last_change_ = topology_changed(DependencyGraph(), self.graph_)
        return self

    def partial_fit(self, spans, y=None):
        if not hasattr(self, "graph_"):
            return self.fit(spans)
        new = update(self.graph_, spans)
        _, self.last_change_ = topology_changed(self.graph_, new)
        self.graph_ = new
        return self
