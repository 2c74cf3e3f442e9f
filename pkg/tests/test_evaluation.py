import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedssl.datasets import synth_generate
from fedssl.errors import ConfigError, MetricError
from fedssl.evaluation import (KnnConfig, MetricsRecord, accuracy, evaluate_all_clients, evaluate_client,
                               extract_features, knn_classify, pooled_accuracy, summarize, weighted_f1)
from fedssl.federation import ClientState
from fedssl.model import build_model, desk_spec, tiny_spec


def knn_oracle(train, labels, queries, k):
    out = []
    for q in queries:
        dists = [(sum((q[j] - t[j]) ** 2 for j in range(len(q))), i) for i, t in enumerate(train)]
        dists.sort()
        votes = {}
        for _, i in dists[:k]:
            votes[labels[i]] = votes.get(labels[i], 0) + 1
        best = max(votes.values())
        out.append(min(c for c, v in votes.items() if v == best))
    return out


def test_knn_matches_all_pairs_oracle():
    rng = np.random.default_rng(0)
    train = rng.normal(size=(50, 8))
    labels = rng.integers(0, 3, 50)
    queries = rng.normal(size=(30, 8))
    assert knn_classify(train, labels, queries, 20).tolist() == knn_oracle(train, labels, queries, 20)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(2, 4))
def test_knn_oracle_property(seed, k, n_classes):
    rng = np.random.default_rng(seed)
    # coarse integer grid forces distance ties
    train = rng.integers(0, 3, size=(15, 2)).astype(float)
    labels = rng.integers(0, n_classes, 15)
    queries = rng.integers(0, 3, size=(6, 2)).astype(float)
    assert knn_classify(train, labels, queries, k, chunk=4).tolist() == knn_oracle(train, labels, queries, k)


def test_knn_hand_cases():
    train = np.array([[1.0], [2.0], [3.0]])
    assert knn_classify(train, [0, 0, 1], np.array([[0.0]]), 3).tolist() == [0]
    assert knn_classify(train, [0, 1, 1], np.array([[2.0]]), 1).tolist() == [1]
    # vote tie between classes 1 and 0 goes to 0
    assert knn_classify(train, [1, 0, 1], np.array([[1.5]]), 2).tolist() == [0]
    # equal distances: lower reference index wins
    assert knn_classify(np.array([[1.0], [-1.0]]), [1, 0], np.array([[0.0]]), 1).tolist() == [1]
    with pytest.raises(ConfigError):
        knn_classify(train, [0, 0, 1], np.array([[0.0]]), 4)
    with pytest.raises(ConfigError):
        KnnConfig(k=0)
    with pytest.raises(ConfigError):
        KnnConfig(metric="cosine")


def test_weighted_f1_hand_cases():
    assert weighted_f1([0, 1, 1, 1, 0], [0, 0, 1, 1, 1], 2) == pytest.approx(0.6, abs=1e-15)
    assert weighted_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert weighted_f1([1, 0, 1], [0, 1, 0], 2) == 0.0
    # class 2 never predicted nor present contributes nothing
    assert weighted_f1([0, 0], [0, 0], 3) == 1.0
    assert accuracy([0, 1, 1, 1, 0], [0, 0, 1, 1, 1]) == 0.6
    for fn in (lambda p, y: weighted_f1(p, y, 2), accuracy):
        with pytest.raises(MetricError):
            fn([], [])
        with pytest.raises(MetricError):
            fn([0], [0, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_metric_bounds(pairs):
    p, y = zip(*pairs)
    f1, acc = weighted_f1(p, y, 4), accuracy(p, y)
    assert 0.0 <= f1 <= 1.0 and 0.0 <= acc <= 1.0
    if p == y:
        assert f1 == acc == 1.0


def test_feature_extraction_batch_invariance():
    params = build_model(desk_spec(), np.random.default_rng(0))
    data = synth_generate(70, 2, seed=2)
    a, la = extract_features(params, data, batch_size=1)
    b, lb = extract_features(params, data, batch_size=64)
    assert a.shape == (70, 64) and np.array_equal(la, lb)
    assert np.max(np.abs(a - b)) <= 1e-12
    dup = data.subset([3, 3])
    f, _ = extract_features(params, dup)
    assert np.array_equal(f[0], f[1])


def test_summarize_hand_values():
    recs = [MetricsRecord(1, i, a, f, 10) for i, (a, f) in enumerate([(0.5, 0.4), (0.7, 0.6), (0.9, 0.8)])]
    mean, std = summarize(recs)
    assert mean["accuracy"] == pytest.approx(0.7, abs=1e-15)
    assert mean["weighted_f1"] == pytest.approx(0.6, abs=1e-15)
    assert std["accuracy"] == pytest.approx(np.sqrt(0.08 / 3), abs=1e-15)
    assert summarize(recs[:1])[1] == {"accuracy": 0.0, "weighted_f1": 0.0}


def clients_for(params_list, shards):
    return [ClientState(i, p, s) for i, (p, s) in enumerate(zip(params_list, shards))]


def test_identical_clients_zero_std():
    params = build_model(tiny_spec(), np.random.default_rng(0))
    shard, test = synth_generate(30, 2, seed=1), synth_generate(20, 2, seed=2)
    recs, mean, std = evaluate_all_clients(clients_for([params, params.snapshot()], [shard, shard]),
                                           test, KnnConfig(5))
    assert len(recs) == 2 and std == {"accuracy": 0.0, "weighted_f1": 0.0}
    assert recs[0].n_eval == 20


def test_small_shard_shrinks_k(caplog):
    params = build_model(tiny_spec(), np.random.default_rng(0))
    rec = evaluate_client(params, synth_generate(6, 2, seed=1), synth_generate(10, 2, seed=2),
                          KnnConfig(20), 0, 0)
    assert rec.k == 6
    assert "shrinking k" in caplog.text


def test_fedbn_bn_swap_changes_scores():
    spec = tiny_spec()
    a = build_model(spec, np.random.default_rng(0))
    b = a.snapshot()
    for n in b.bn_names():
        if n.endswith("running_mean"):
            b[n].data[...] = np.random.default_rng(9).normal(0, 3, b[n].shape)
    shard_a = synth_generate(40, 2, pattern="blobs", seed=3)
    shard_b = synth_generate(40, 2, pattern="stripes", seed=4)
    test = synth_generate(60, 2, pattern="blobs", seed=5)
    before, _, _ = evaluate_all_clients(clients_for([a, b], [shard_a, shard_b]), test, KnnConfig(5))
    a2, b2 = a.snapshot(), b.snapshot()
    a2.assign_from(b, b.bn_names())
    b2.assign_from(a, a.bn_names())
    after, _, _ = evaluate_all_clients(clients_for([a2, b2], [shard_a, shard_b]), test, KnnConfig(5))
    assert [(r.accuracy, r.weighted_f1) for r in before] != [(r.accuracy, r.weighted_f1) for r in after]


def test_pooled_accuracy_bounds():
    params = build_model(tiny_spec(), np.random.default_rng(0))
    ref, query = synth_generate(40, 2, seed=1), synth_generate(20, 2, seed=2)
    acc = pooled_accuracy(params, ref, query, k=5)
    assert 0.0 <= acc <= 1.0
    assert pooled_accuracy(params, ref, ref, k=1) == 1.0
