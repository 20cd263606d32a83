import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparelab.inference import (choose_k, choose_lambda, infer_groups, kmeans, silhouette,
                                write_groups_json)
from sparelab.model import init_symmetric


def brute_silhouette(X, labels):
    n = len(X)
    out = np.zeros(n)
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            continue
        a = np.mean([np.linalg.norm(X[i] - X[j]) for j in own])
        b = min(np.mean([np.linalg.norm(X[i] - X[j]) for j in range(n) if labels[j] == c])
                for c in set(labels.tolist()) if c != labels[i])
        out[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return out


def blobs(centers, n_per, spread, seed):
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, float)
    X = np.vstack([c + spread * rng.standard_normal((n_per, centers.shape[1])) for c in centers])
    return X, np.repeat(np.arange(len(centers)), n_per)


def test_kmeans_single_cluster_is_mean():
    X = np.random.default_rng(0).standard_normal((20, 3))
    res = kmeans(X, 1)
    np.testing.assert_allclose(res.centroids[0], X.mean(0))


def test_kmeans_two_blobs():
    X, truth = blobs([[-10, 0], [10, 0]], 25, 1.0, 0)
    res = kmeans(X, 2, seed=3)
    assert len(set(zip(res.labels.tolist(), truth.tolist()))) == 2


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


def test_kmeans_objective_non_increasing():
    for seed in range(50):
        X = np.random.default_rng(seed).standard_normal((40, 3))
        res = kmeans(X, 3, seed=seed, n_init=1)
        assert np.all(np.diff(res.history) <= 1e-9)


def test_kmeans_empty_cluster_repair():
    X = np.array([[0.0], [0.0], [0.0], [5.0]])
    res = kmeans(X, 3, seed=0)
    assert sorted(np.bincount(res.labels, minlength=3).tolist())[0] >= 1


@given(st.integers(0, 10**6))
def test_kmeans_deterministic(seed):
    X = np.random.default_rng(seed).standard_normal((30, 2))
    a, b = kmeans(X, 3, seed=seed), kmeans(X, 3, seed=seed)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_silhouette_matches_brute_force():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((30, 2))
        labels = rng.integers(0, 3, 30)
        labels[:3] = [0, 1, 2]
        s, mean, _ = silhouette(X, labels, chunk=7)
        worst = max(worst, np.abs(s - brute_silhouette(X, labels)).max())
    assert worst <= 1e-12


def test_silhouette_special_cases():
    s, mean, flag = silhouette(np.array([[0.0], [0.0], [10.0], [10.0]]), np.array([0, 0, 1, 1]))
    assert s.tolist() == [1.0] * 4 and not flag
    s, _, _ = silhouette(np.array([[0.0], [1.0]]), np.array([0, 1]))
    assert s.tolist() == [0.0, 0.0]
    s, mean, flag = silhouette(np.ones((4, 2)), np.zeros(4))
    assert flag and mean == 0.0


@given(st.integers(0, 10**5))
def test_silhouette_bounds_and_separation(seed):
    X, labels = blobs([[0, 0], [3, 0]], 10, 1.0, seed)
    _, m1, _ = silhouette(X, labels)
    far = X.copy()
    far[labels == 1] += np.array([27.0, 0.0])
    _, m2, _ = silhouette(far, labels)
    assert -1 <= m1 <= 1 and m2 >= m1 - 1e-12


def test_choose_k():
    X, _ = blobs([[-10, 0], [10, 0]], 20, 0.5, 0)
    assert choose_k(X)[0] == 2
    X3, _ = blobs([[0, 0], [20, 0], [0, 20]], 20, 0.5, 1)
    k, profile = choose_k(X3)
    assert k == 3 and profile[3] == max(profile.values())


def test_choose_k_tie_goes_to_smallest():
    X = np.zeros((10, 2))
    k, profile = choose_k(X)
    assert set(profile.values()) == {0.0} and k == 2


def test_choose_k_too_few_points():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert choose_k(np.zeros((1, 2)))[0] == 1
    assert w


@pytest.mark.parametrize("score,lam", [(0.95, 1), (0.9, 1), (0.85, 2), (0.7, 2), (0.5, 3), (-1.0, 3)])
def test_choose_lambda(score, lam):
    assert choose_lambda(score) == lam


def test_infer_groups_covers_every_example(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((60, 4))
    y = np.repeat([0, 1, 2], 20)
    y[-1] = 3  # singleton class
    net = init_symmetric(10, 4, 4, seed=0)
    net.Z[:] = rng.standard_normal(net.Z.shape)
    res = infer_groups(net, X, y, seed=0, T_init=2)
    covered = np.concatenate([cc.indices for cc in res.classes.values()])
    assert sorted(covered.tolist()) == list(range(60))
    assert res.classes[3].k == 1
    for cc in res.classes.values():
        assert cc.labels.min() >= 0 and cc.labels.max() < cc.k
        assert np.all(np.abs(cc.silhouette) <= 1)
    write_groups_json(res, tmp_path / "g.json")
    doc = json.loads((tmp_path / "g.json").read_text())
    assert len(doc["examples"]) == 60 and doc["T_init"] == 2


def test_lambda_override_and_norm():
    rng = np.random.default_rng(1)
    net = init_symmetric(10, 3, 2, seed=0)
    net.Z[:] = rng.standard_normal(net.Z.shape)
    X, y = rng.standard_normal((30, 3)), np.repeat([0, 1], 15)
    res = infer_groups(net, X, y, output_norm="l2", lambda_override=2)
    assert set(res.lambdas().values()) == {2}
    with pytest.raises(ValueError):
        infer_groups(net, X, y, output_norm="zscore")
