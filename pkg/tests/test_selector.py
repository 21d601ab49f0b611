import numpy as np
import pytest
from sklearn.base import clone

from sdvdiag.anomaly import (
    POOL_ORDER,
    DetectorSelector,
    LabeledDataset,
    SelectorPolicy,
    detect,
    evaluate_detector,
    evaluate_policy,
    extract_features,
    make_detector,
    make_labeled_corpus,
    point_adjusted_f1,
    select_detector,
    train_selector,
)
from sdvdiag.anomaly.selector import DEFAULT_K_GRID, bucket_key
from sdvdiag.exceptions import EmptyCorpus
from sdvdiag.telemetry import SeriesKey, TimeSeries


def _oracle_mapping(corpus):
    """Exhaustive per-bucket mean F1 over every (detector, k) pair."""
    groups = {}
    for e in corpus:
        groups.setdefault(bucket_key(extract_features(e.series)), []).append(e)
    out = {}
    for bucket, entries in groups.items():
        best = None
        for name in POOL_ORDER:
            for k in DEFAULT_K_GRID[name]:
                scores = []
                for e in entries:
                    det = make_detector(name)
                    s = np.nan_to_num(det.fit(e.series).score_samples(e.series), nan=0.0)
                    scores.append(point_adjusted_f1(e.series, s > k, e.intervals))
                m = float(np.mean(scores))
                if best is None or m > best[0] + 1e-12:
                    best = (m, name, k)
        out[bucket] = best
    return out


def test_empty_policy_falls_back_to_rolling_zscore():
    f = extract_features(np.random.default_rng(0).normal(size=200))
    assert select_detector(f, SelectorPolicy()) == ("rolling_zscore", {})


def test_degenerate_bucket_uses_iqr_without_anomalies():
    s = TimeSeries(SeriesKey("m", "s", "i"), np.arange(100) * 1000, np.full(100, 3.0))
    name, params = select_detector(extract_features(s), SelectorPolicy())
    assert name == "iqr"
    assert detect(s, name, params) == []


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        train_selector(LabeledDataset())


def test_spiky_corpus_where_zscore_is_perfect():
    full = make_labeled_corpus(n_per_class=20, seed=4, classes=("spiky",))
    perfect = [e for e in full if evaluate_detector([e], "rolling_zscore")[0] == 1.0]
    assert len(perfect) >= 5
    policy = train_selector(LabeledDataset(perfect))
    assert set(policy.mapping.values()) == {"rolling_zscore"}
    assert all(p == {} for p in policy.params.values())


def test_seasonal_corpus_maps_to_seasonal_residual():
    corpus = make_labeled_corpus(n_per_class=12, seed=2, classes=("seasonal",))
    policy = train_selector(corpus)
    high = [b for b in policy.mapping if b.startswith("season=high")]
    assert high
    assert all(policy.mapping[b] == "seasonal_residual" for b in high)


def test_mixed_corpus_mapping():
    corpus = make_labeled_corpus(n_per_class=14, seed=1, classes=("seasonal", "spiky"))
    policy = train_selector(corpus)
    by_class = {}
    for e in corpus:
        by_class.setdefault(e.series.key.service, set()).add(bucket_key(extract_features(e.series)))
    assert {policy.mapping[b] for b in by_class["synthetic-seasonal"]} == {"seasonal_residual"}
    assert {policy.mapping[b] for b in by_class["synthetic-spiky"]} == {"rolling_zscore"}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_matches_exhaustive_oracle(seed):
    corpus = make_labeled_corpus(n_per_class=8, seed=seed)
    policy = train_selector(corpus)
    oracle = _oracle_mapping(corpus)
    for bucket, (f1, name, k) in oracle.items():
        assert policy.mapping[bucket] == name
        assert policy.params[bucket].get("k", make_detector(name).k) == k
        assert policy.bucket_f1[bucket] == pytest.approx(f1, abs=1e-6)


def test_selector_dominates_fixed_detectors():
    corpus = make_labeled_corpus(n_per_class=14, seed=0)
    sel = evaluate_policy(corpus, train_selector(corpus)).mean()
    for name in POOL_ORDER:
        assert sel >= evaluate_detector(corpus, name).mean()


def test_retraining_on_misclassified_does_not_hurt():
    base = make_labeled_corpus(n_per_class=10, seed=0)
    policy = train_selector(base)
    fresh = make_labeled_corpus(n_per_class=10, seed=9)
    missed = [e for e, f in zip(fresh, evaluate_policy(fresh, policy)) if f < 1.0]
    assert missed
    extended = LabeledDataset(list(base) + missed)
    before = evaluate_policy(extended, policy).mean()
    after = evaluate_policy(extended, train_selector(extended)).mean()
    assert after >= before


def test_policy_round_trip(tmp_path):
    policy = train_selector(make_labeled_corpus(n_per_class=4, seed=3))
    policy.save(tmp_path / "p.json")
    assert SelectorPolicy.load(tmp_path / "p.json") == policy


def test_estimator_wrapper():
    corpus = make_labeled_corpus(n_per_class=4, seed=5)
    est = DetectorSelector()
    assert clone(est).get_params() == est.get_params()
    est.fit(corpus)
    picks = est.predict([e.series for e in corpus])
    assert len(picks) == len(corpus)
    assert est.score(corpus) == pytest.approx(evaluate_policy(corpus, est.policy_).mean())
