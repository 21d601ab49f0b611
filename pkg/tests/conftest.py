import numpy as np
import pytest

from sdvdiag.simulator import FaultSpec, simulate
from sdvdiag.telemetry import SeriesKey, Span


def span(trace, sid, service, instance, start, end=None, parent=None, peer=None, node="n1"):
    peer_service, peer_instance = peer if peer else (None, None)
    return Span(trace, sid, service, instance, node, start, start + 5 if end is None else end,
                parent_span_id=parent, peer_service=peer_service, peer_instance=peer_instance)


def key(instance, metric="cpu_usage", service="svc"):
    return SeriesKey(metric, service, instance)


def expected_visits(weights, start, steps):
    """Exact expected visit vector of the reset-on-dead-end walk.

    ``weights[v, u]`` is the weight of stepping from ``v`` to ``u``.
    Brute force over the state distribution, step by step.
    """
    n = weights.shape[0]
    tot = weights.sum(axis=1)
    p = np.zeros((n, n))
    live = tot > 0
    p[live] = weights[live] / tot[live, None]
    dist = np.zeros(n)
    dist[start] = 1.0
    visits = np.zeros(n)
    for _ in range(steps):
        moved = np.zeros(n)
        for v in range(n):
            if dist[v] == 0:
                continue
            if live[v]:
                moved += dist[v] * p[v]
                visits += dist[v] * p[v]
            else:
                moved[start] += dist[v]
        dist = moved
    return visits


@pytest.fixture(scope="session")
def faulted_sim():
    return simulate(seed=3, fault=FaultSpec.parse("cpu:B1@worker1"))


@pytest.fixture(scope="session")
def clean_sim():
    return simulate(seed=3)


def random_fusion_inputs(rng, max_instances=8, max_metrics=3):
    """Random dependency graph, metric keys and a dense causal model."""
    from sdvdiag.causal import CausalEdge, CausalModel
    from sdvdiag.dependency import DependencyEdge, DependencyGraph, DependencyNode

    n = int(rng.integers(1, max_instances + 1))
    workers = [f"w{i}" for i in range(int(rng.integers(1, 4)))]
    inst = [(f"s{int(rng.integers(0, 3))}", f"i{i}") for i in range(n)]
    nodes = {i: DependencyNode(i, str(rng.choice(workers)), 0, 1) for i in inst}
    edges = {}
    for a in inst:
        for b in inst:
            if a != b and rng.random() < 0.25:
                edges[(a, b)] = DependencyEdge(a, b, int(rng.integers(0, 100)), 1)
    dep = DependencyGraph(nodes, edges, version=int(rng.integers(1, 5)))
    keys = []
    for i in inst:
        for m in range(int(rng.integers(1, max_metrics + 1))):
            keys.append(SeriesKey(f"m{m}", i[0], i[1]))
    for w in workers:
        if rng.random() < 0.7:
            keys.append(SeriesKey("tx_bytes", "node", w))
    keys.append(SeriesKey("cpu_usage", "ghost", "g0"))  # never attachable
    causal = []
    for a in keys:
        for b in keys:
            if a != b and rng.random() < 0.3:
                causal.append(CausalEdge(a, b, float(rng.uniform(0.05, 1.0)), 1))
    return dep, keys, CausalModel("lagged_correlation", {}, tuple(causal), version=int(rng.integers(1, 4)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
