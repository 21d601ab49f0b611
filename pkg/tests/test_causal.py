import random

import numpy as np
import pytest

from sdvdiag.causal import (
    DISCOVERY_METHODS,
    CausalEdge,
    CausalModel,
    LaggedCorrelationDiscovery,
    discover,
    make_discovery,
    pairwise_causal_weight,
    refit_on_change,
)
from sdvdiag.dependency import TopologyChange
from sdvdiag.exceptions import InsufficientData, ZeroVariance
from sdvdiag.telemetry import SeriesKey, TimeSeries


def ts(name, values, service="svc", step=1000):
    values = np.asarray(values, dtype=float)
    return TimeSeries(SeriesKey("cpu_usage", service, name), np.arange(values.size) * step, values)


def _lag_oracle(a, b, max_lag):
    """max over lags of |corr(a[t-lag], b[t])| with numpy's corrcoef."""
    best = (0.0, 0)
    for lag in range(1, max_lag + 1):
        c = abs(np.corrcoef(a[:-lag], b[lag:])[0, 1])
        if c > best[0]:
            best = (c, lag)
    return best


def test_shifted_copy():
    x = np.random.default_rng(0).normal(size=500)
    y = np.r_[0.0, x[:-1]]
    w, lag, direction = pairwise_causal_weight(ts("x", x), ts("y", y))
    assert w == pytest.approx(1.0, abs=1e-6)
    assert lag == 1 and direction == "x->y"


def test_independent_noise_is_weak():
    rng = np.random.default_rng(1)
    w, _, _ = pairwise_causal_weight(ts("x", rng.normal(size=2000)), ts("y", rng.normal(size=2000)))
    assert w < 0.2


def test_constant_input():
    with pytest.raises(ZeroVariance):
        pairwise_causal_weight(ts("x", np.ones(100)), ts("y", np.arange(100.0)))


def test_lag_zero_is_ignored():
    x = np.random.default_rng(2).normal(size=400)
    w, _, _ = pairwise_causal_weight(ts("x", x), ts("y", x * 2.0))
    assert w < 0.2


def _chain(seed, n=1500):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = np.r_[0.0, 0.9 * x[:-1]] + 0.3 * rng.normal(size=n)
    z = np.r_[0.0, 0.9 * y[:-1]] + 0.3 * rng.normal(size=n)
    return [ts("x", x), ts("y", y), ts("z", z)]


@pytest.mark.parametrize("seed", range(5))
def test_chain_against_pairwise_oracle(seed):
    series = _chain(seed)
    model = discover(series, max_lag=3, weight_threshold=0.4)
    expected = set()
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = series[i].values, series[j].values
            w_ab, _ = _lag_oracle(a, b, 3)
            w_ba, _ = _lag_oracle(b, a, 3)
            if w_ab >= 0.4 and w_ab >= w_ba:
                expected.add((series[i].key, series[j].key))
            if w_ba >= 0.4 and w_ba >= w_ab:
                expected.add((series[j].key, series[i].key))
    got = {(e.source, e.target) for e in model.edges}
    assert got == expected
    x, y, z = (s.key for s in series)
    assert {(x, y), (y, z)} <= got
    for e in model.edges:
        assert e.weight == pytest.approx(_lag_oracle(
            next(s.values for s in series if s.key == e.source),
            next(s.values for s in series if s.key == e.target), 3)[0], abs=1e-9)


def test_single_series():
    with pytest.raises(InsufficientData):
        discover([ts("x", np.arange(50.0))])


def test_all_constant_gives_no_edges():
    assert discover([ts("x", np.ones(50)), ts("y", np.full(50, 2.0))]).edges == ()


def test_threshold_and_permutation_invariance():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(6, 600))
    for i in range(1, 6):
        base[i, 1:] += 0.7 * base[i - 1, :-1]
    series = [ts(f"m{i}", base[i]) for i in range(6)]
    model = discover(series, weight_threshold=0.3)
    assert all(e.weight >= 0.3 for e in model.edges)
    shuffled = list(series)
    random.Random(0).shuffle(shuffled)
    assert discover(shuffled, weight_threshold=0.3).edges == model.edges


def test_direction_recovery():
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=2000)
        # SNR 10: signal variance a^2, noise variance a^2 / 10
        a = 1.5
        y = np.r_[0.0, a * x[:-1]] + rng.normal(0, a / np.sqrt(10), 2000)
        m = discover([ts("x", x), ts("y", y)], weight_threshold=0.0 + 1e-9)
        w = {(e.source.instance, e.target.instance): e.weight for e in m.edges}
        wins += w.get(("x", "y"), 0.0) > w.get(("y", "x"), 0.0)
    assert wins >= 95


def test_empty_change_is_noop():
    series = _chain(0)
    model = discover(series)
    change = TopologyChange((), (), (), (), 1, 1)
    assert refit_on_change(model, change, series) is model


def _owned(name, values):
    return ts("cpu", values, service=name)


def test_removed_instance_loses_edges():
    rng = np.random.default_rng(4)
    a = rng.normal(size=600)
    b = np.r_[0.0, a[:-1]] + 0.2 * rng.normal(size=600)
    c = np.r_[0.0, b[:-1]] + 0.2 * rng.normal(size=600)
    series = [_owned("A", a), _owned("B", b), _owned("C", c)]
    model = discover(series)
    assert any(e.target.service == "C" for e in model.edges)
    change = TopologyChange((), (("C", "cpu"),), (), ((("B", "cpu"), ("C", "cpu")),), 1, 2)
    refit = refit_on_change(model, change, series)
    assert all("C" not in (e.source.service, e.target.service) for e in refit.edges)
    assert refit.version == model.version + 1 and refit.fitted_on_version == 2


def test_added_instance_matches_full_rediscovery():
    rng = np.random.default_rng(5)
    n = 800
    a, b = rng.normal(size=n), rng.normal(size=n)
    b[1:] += 0.8 * a[:-1]
    c = np.r_[0.0, 0.9 * a[:-1]] + 0.3 * rng.normal(size=n)
    old = [_owned("A", a), _owned("B", b)]
    new = old + [_owned("C", c)]
    model = discover(old)
    change = TopologyChange((("C", "cpu"),), (), ((("A", "cpu"), ("C", "cpu")),), (), 1, 2)
    refit = refit_on_change(model, change, new)
    full = discover(new)

    def touching(edges):
        return {e for e in edges if "C" in (e.source.service, e.target.service)}

    assert touching(refit.edges) == touching(full.edges)
    assert touching(refit.edges)
    assert set(refit.edges) - touching(refit.edges) == set(model.edges)


def test_edge_list_round_trip():
    model = discover(_chain(1))
    back = CausalModel.from_edge_list(model.to_edge_list(), params=model.params)
    assert [(e.source, e.target, e.lag) for e in back.edges] == \
        [(e.source, e.target, e.lag) for e in model.edges]
    assert [round(e.weight, 6) for e in model.edges] == [e.weight for e in back.edges]


def test_edge_validation():
    k1, k2 = SeriesKey("m", "s", "a"), SeriesKey("m", "s", "b")
    with pytest.raises(ValueError):
        CausalEdge(k1, k1, 0.5, 1)
    with pytest.raises(ValueError):
        CausalEdge(k1, k2, 1.5, 1)


def test_forward_fill_alignment():
    rng = np.random.default_rng(6)
    x = rng.normal(size=400)
    y = np.r_[0.0, x[:-1]]
    keep = np.ones(400, dtype=bool)
    keep[rng.choice(400, 20, replace=False)] = False
    sparse = TimeSeries(SeriesKey("cpu_usage", "svc", "y"), (np.arange(400) * 1000)[keep], y[keep])
    w, lag, direction = pairwise_causal_weight(ts("x", x), sparse)
    assert direction == "x->y" and lag == 1 and w > 0.9


def test_registry_and_estimator():
    assert DISCOVERY_METHODS["lagged_correlation"] is LaggedCorrelationDiscovery
    est = make_discovery(max_lag=3)
    assert est.get_params()["max_lag"] == 3
    est.fit(_chain(2))
    assert est.edges_ == discover(_chain(2), max_lag=3).edges
