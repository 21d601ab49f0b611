import random

from hypothesis import given, settings, strategies as st

from conftest import span
from sdvdiag.dependency import (
    DependencyGraph,
    DependencyGraphBuilder,
    build_dependency_graph,
    topology_changed,
    update,
)

A, B, C = ("svc", "A"), ("svc", "B"), ("svc", "C")


def client(trace, sid, caller, callee, start):
    return span(trace, sid, caller[0], caller[1], start, peer=callee)


def test_empty_spans_give_empty_graph():
    g = build_dependency_graph([])
    assert not g.nodes and not g.edges and g.version == 0


def test_repeated_calls_aggregate_to_latest():
    g = build_dependency_graph([client("t1", "c1", A, B, 100), client("t2", "c2", A, B, 200)])
    assert set(g.edges) == {(A, B)}
    e = g.edges[(A, B)]
    assert e.last_communication == 200 and e.call_count == 2


def _pairing_oracle(spans):
    """Edges by brute force over every ordered span pair plus peer fields."""
    edges = set()
    for s in spans:
        if s.peer and s.peer != s.owner:
            edges.add((s.owner, s.peer))
    for p in spans:
        for c in spans:
            if c.trace_id == p.trace_id and c.parent_span_id == p.span_id and c.owner != p.owner:
                edges.add((p.owner, c.owner))
    return edges


def test_parent_child_chain_has_no_shortcut():
    spans = [
        span("t", "a", *A, 0, 50),
        span("t", "b", *B, 10, 40, parent="a"),
        span("t", "c", *C, 20, 30, parent="b"),
    ]
    g = build_dependency_graph(spans)
    assert set(g.edges) == {(A, B), (B, C)} == _pairing_oracle(spans)
    assert not g.has_edge(A, C)


def test_interaction_time_is_latest_evidence():
    spans = [client("t", "c1", A, B, 100), span("t", "s1", *B, 107, parent="c1")]
    g = build_dependency_graph(spans)
    assert g.edges[(A, B)].last_communication == 107
    assert g.edges[(A, B)].call_count == 1


def test_update_with_seen_spans_is_identity():
    spans = [client("t", "c1", A, B, 100)]
    g = build_dependency_graph(spans)
    assert update(g, spans) == g


def test_update_adding_callee_bumps_version():
    g = build_dependency_graph([client("t", "c1", A, B, 100)])
    g2 = update(g, [client("t", "c2", A, C, 150)])
    assert C in g2.nodes and g2.has_edge(A, C)
    assert g2.version == g.version + 1


def test_attribute_only_update_keeps_version():
    g = build_dependency_graph([client("t", "c1", A, B, 100)])
    g2 = update(g, [client("t", "c2", A, B, 300)])
    assert g2.version == g.version
    assert g2.edges[(A, B)].last_communication == 300
    changed, _ = topology_changed(g, g2)
    assert not changed


def test_identical_graphs_have_no_change():
    g = build_dependency_graph([client("t", "c1", A, B, 100)])
    changed, change = topology_changed(g, g)
    assert not changed and not change.added_edges and not change.removed_edges


def test_removed_edge_reported():
    old = build_dependency_graph([client("t", "c1", A, B, 1), client("t", "c2", A, C, 2)])
    new = build_dependency_graph([client("t", "c1", A, B, 1), span("t", "x", *C, 3)])
    changed, change = topology_changed(old, new)
    assert changed
    assert change.removed_edges == ((A, C),)
    assert not change.added_edges and not change.added_nodes and not change.removed_nodes


def test_dot_export_is_stable():
    spans = [client("t", f"c{i}", A, (B, C)[i % 2], i) for i in range(6)]
    shuffled = list(spans)
    random.Random(4).shuffle(shuffled)
    assert build_dependency_graph(spans).to_dot() == build_dependency_graph(shuffled).to_dot()


def test_builder_estimator():
    b = DependencyGraphBuilder().fit([client("t", "c1", A, B, 1)])
    assert set(b.last_change_.added_edges) == {(A, B)}
    b.partial_fit([client("t", "c2", B, C, 2)])
    assert set(b.last_change_.added_edges) == {(B, C)}
    assert b.graph_.version == 2


services = [("svc", x) for x in "ABCDE"]


@st.composite
def span_forests(draw):
    """Random traces mixing parent/child links and client spans with peers."""
    out = []
    for t in range(draw(st.integers(1, 5))):
        ids = []
        for i in range(draw(st.integers(1, 6))):
            owner = draw(st.sampled_from(services))
            parent = draw(st.sampled_from(ids)) if ids and draw(st.booleans()) else None
            peer = draw(st.sampled_from(services)) if draw(st.booleans()) else None
            start = draw(st.integers(0, 1000))
            sid = f"{t}-{i}"
            out.append(span(f"t{t}", sid, owner[0], owner[1], start, start + 3, parent=parent, peer=peer))
            ids.append(sid)
    return out


@settings(max_examples=80, deadline=None)
@given(span_forests(), st.data())
def test_rebuild_equivalence(spans, data):
    cuts = sorted(data.draw(st.lists(st.integers(0, len(spans)), max_size=4)))
    parts, prev = [], 0
    for c in cuts + [len(spans)]:
        parts.append(spans[prev:c])
        prev = c
    g = DependencyGraph()
    last = {}
    for part in parts:
        g = update(g, part)
        for k, e in g.edges.items():
            assert e.last_communication >= last.get(k, e.last_communication)
            last[k] = e.last_communication
    whole = build_dependency_graph(spans)
    assert dict(g.nodes) == dict(whole.nodes)
    assert dict(g.edges) == dict(whole.edges)


@settings(max_examples=80, deadline=None)
@given(span_forests())
def test_edges_match_pairing_oracle(spans):
    assert set(build_dependency_graph(spans).edges) == _pairing_oracle(spans)


def test_simulator_graph_matches_declared(clean_sim):
    g = build_dependency_graph(clean_sim.spans)
    gt = clean_sim.ground_truth
    assert set(g.nodes) == set(gt.declared_nodes)
    assert set(g.edges) == set(gt.declared_edges)
    assert all(g.nodes[n].node == gt.placement[n] for n in g.nodes)
