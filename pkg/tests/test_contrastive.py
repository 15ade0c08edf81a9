import math

import numpy as np
import pytest

from ppcl.contrastive import (InfluenceClustering, cluster_influence, crd_loss,
                              kmeans_1d, level_penalty, pair_labels,
                              pair_views, rnc_loss, supcon_loss, uid_loss,
                              uisd_loss)
from ppcl.errors import ConfigError
from ppcl.tensor import Tensor


def close(got, want, tol=1e-10):
    return abs(got - want) <= tol * max(1.0, abs(want))


def unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def supcon_oracle(features, labels, tau):
    """Plain double-loop transcription of the anchor-averaged SupCon loss."""
    f = unit_rows(features)
    n = len(labels)
    total = 0.0
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(float(f[i] @ f[a]) / tau) for a in range(n) if a != i)
        inner = 0.0
        for p in pos:
            inner += math.log(math.exp(float(f[i] @ f[p]) / tau) / denom)
        total += -inner / len(pos)
    return total / n


def rnc_oracle(features, labels, tau):
    f = unit_rows(features)
    n = len(labels)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            dij = abs(labels[i] - labels[j])
            denom = sum(
                math.exp(float(f[i] @ f[k]) / tau)
                for k in range(n)
                if k != i and abs(labels[i] - labels[k]) >= dij
            )
            total += -math.log(math.exp(float(f[i] @ f[j]) / tau) / denom) / (n - 1)
    return total / n


class TestSupCon:
    def test_matches_oracle_200_random_batches(self):
        rng = np.random.default_rng(7)
        for trial in range(200):
            n = int(rng.integers(2, 13))
            feats = rng.normal(size=(n, int(rng.integers(2, 9))))
            labels = rng.integers(0, 4, size=n)
            got = float(supcon_loss(Tensor(feats), labels, 0.1).data)
            want = supcon_oracle(feats, labels, 0.1)
            assert close(got, want), f"trial {trial}"

    def test_all_singletons_zero(self):
        feats = np.random.default_rng(0).normal(size=(5, 4))
        assert float(supcon_loss(Tensor(feats), np.arange(5), 0.1).data) == 0.0

    def test_one_pair_two_anchors(self):
        feats = np.random.default_rng(1).normal(size=(4, 6))
        labels = np.array([0, 0, 1, 2])
        got = float(supcon_loss(Tensor(feats), labels, 0.5).data)
        assert abs(got - supcon_oracle(feats, labels, 0.5)) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(8, 5))
        labels = np.array([0, 0, 1, 1, 2, 2, 2, 3])
        base = float(supcon_loss(Tensor(feats), labels, 0.1).data)
        perm = rng.permutation(8)
        shuffled = float(supcon_loss(Tensor(feats[perm]), labels[perm], 0.1).data)
        assert abs(base - shuffled) < 1e-10

    def test_row_scale_invariance(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(6, 4))
        labels = np.array([0, 0, 1, 1, 2, 2])
        scales = rng.uniform(0.1, 10.0, size=(6, 1))
        a = float(supcon_loss(Tensor(feats), labels, 0.1).data)
        b = float(supcon_loss(Tensor(feats * scales), labels, 0.1).data)
        assert abs(a - b) < 1e-9

    def test_nonpositive_temperature_rejected(self):
        feats = np.ones((2, 2))
        with pytest.raises(ConfigError):
            supcon_loss(Tensor(feats), np.array([0, 0]), 0.0)

    def test_identical_positives_beat_scattered(self):
        proto = np.array([1.0, 0.0, 0.0])
        tight = np.stack([proto, proto, [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        loose = np.stack([proto, [0.0, 1.0, 0.0], proto * -1, [0.0, 0.0, 1.0]])
        labels = np.array([0, 0, 1, 1])
        lt = float(supcon_loss(Tensor(tight), labels, 0.1).data)
        ll = float(supcon_loss(Tensor(loose), labels, 0.1).data)
        assert lt < ll


class TestPairing:
    def test_interleave_order(self):
        a = Tensor(np.array([[1.0], [2.0]]))
        b = Tensor(np.array([[10.0], [20.0]]))
        np.testing.assert_array_equal(pair_views(a, b).data, [[1.0], [10.0], [2.0], [20.0]])

    def test_pair_labels_repeat(self):
        np.testing.assert_array_equal(pair_labels(np.array([3, 5])), [3, 3, 5, 5])

    def test_pair_labels_2d(self):
        lab = np.array([[1, 2], [3, 4]])
        np.testing.assert_array_equal(pair_labels(lab), [[1, 2], [1, 2], [3, 4], [3, 4]])


class TestCRD:
    def test_matches_per_level_sum(self):
        rng = np.random.default_rng(4)
        for trial in range(200):
            n = int(rng.integers(2, 13))
            L = int(rng.integers(1, 4))
            feats = rng.normal(size=(n, 5))
            levels = rng.integers(0, 3, size=(n, L))
            got = float(crd_loss(Tensor(feats), levels, 0.1).data)
            want = sum(
                supcon_oracle(feats, levels[:, l - 1], 0.1) * level_penalty(l) / L
                for l in range(1, L + 1)
            )
            assert close(got, want), f"trial {trial}"

    def test_penalty_values(self):
        assert level_penalty(1) == 1.0
        assert level_penalty(2) == 0.25
        assert abs(level_penalty(3) - 1.0 / 9.0) < 1e-15

    def test_coarse_level_dominates(self):
        # same label structure on both levels: level-1 term carries 4x weight
        rng = np.random.default_rng(5)
        feats = rng.normal(size=(6, 4))
        labels = np.array([0, 0, 1, 1, 2, 2])
        both = np.stack([labels, labels], axis=1)
        got = float(crd_loss(Tensor(feats), both, 0.1).data)
        single = supcon_oracle(feats, labels, 0.1)
        assert abs(got - single * (1.0 + 0.25) / 2.0) < 1e-10


class TestUISDandUID:
    def test_uisd_is_supcon_on_clusters(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n = int(rng.integers(2, 13))
            feats = rng.normal(size=(n, 4))
            cids = rng.integers(0, 3, size=n)
            got = float(uisd_loss(Tensor(feats), cids, 0.1).data)
            assert close(got, supcon_oracle(feats, cids, 0.1))

    def test_uid_is_supcon_on_user_ids(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(2, 13))
            feats = rng.normal(size=(n, 4))
            uids = rng.integers(0, 5, size=n)
            got = float(uid_loss(Tensor(feats), uids, 0.1).data)
            assert close(got, supcon_oracle(feats, uids, 0.1))


class TestRNC:
    def test_matches_oracle_200_random_batches(self):
        rng = np.random.default_rng(8)
        for trial in range(200):
            n = int(rng.integers(2, 13))
            feats = rng.normal(size=(n, int(rng.integers(2, 7))))
            labels = rng.normal(size=n)
            got = float(rnc_loss(Tensor(feats), labels, 2.0).data)
            want = rnc_oracle(feats, labels, 2.0)
            assert close(got, want), f"trial {trial}"

    def test_tied_distances(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n = int(rng.integers(3, 10))
            feats = rng.normal(size=(n, 4))
            labels = rng.integers(0, 3, size=n).astype(float)
            got = float(rnc_loss(Tensor(feats), labels, 2.0).data)
            assert close(got, rnc_oracle(feats, labels, 2.0))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(10)
        feats = rng.normal(size=(7, 5))
        labels = rng.normal(size=7)
        t = Tensor(feats.copy())
        rnc_loss(t, labels, 2.0).backward()
        h = 1e-6
        num = np.zeros_like(feats)
        for i in range(feats.shape[0]):
            for j in range(feats.shape[1]):
                up, dn = feats.copy(), feats.copy()
                up[i, j] += h
                dn[i, j] -= h
                num[i, j] = (rnc_oracle(up, labels, 2.0) - rnc_oracle(dn, labels, 2.0)) / (2 * h)
        scale = np.maximum(np.abs(t.grad) + np.abs(num), 1e-6)
        assert np.max(np.abs(t.grad - num) / scale) < 1e-5

    def test_too_small_batch(self):
        with pytest.raises(ConfigError):
            rnc_loss(Tensor(np.ones((1, 3))), np.array([0.0]), 2.0)


class TestKMeans:
    def test_well_separated_clusters_recovered(self):
        rng = np.random.default_rng(0)
        vals = np.concatenate([rng.normal(0, 0.1, 50),
                               rng.normal(10, 0.1, 50),
                               rng.normal(20, 0.1, 50)])
        centroids, labels = kmeans_1d(vals, 3, seed=0)
        np.testing.assert_allclose(centroids, [0, 10, 20], atol=0.1)
        assert set(labels[:50]) == {0}
        assert set(labels[50:100]) == {1}
        assert set(labels[100:]) == {2}

    def test_centroids_sorted_ascending(self):
        vals = np.random.default_rng(1).uniform(0, 100, 200)
        centroids, _ = kmeans_1d(vals, 7, seed=3)
        assert np.all(np.diff(centroids) > 0)

    def test_deterministic(self):
        vals = np.random.default_rng(2).uniform(0, 50, 300)
        a = kmeans_1d(vals, 5, seed=11)
        b = kmeans_1d(vals, 5, seed=11)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_local_optimality(self):
        # each point is assigned to its nearest centroid and each centroid
        # equals the mean of its assigned points
        vals = np.random.default_rng(3).uniform(0, 10, 120)
        centroids, labels = kmeans_1d(vals, 4, seed=0)
        nearest = np.argmin(np.abs(vals[:, None] - centroids[None, :]), axis=1)
        np.testing.assert_array_equal(labels, nearest)
        for c in range(4):
            np.testing.assert_allclose(centroids[c], vals[labels == c].mean(), atol=1e-8)

    def test_fewer_distinct_values_than_k_warns(self):
        vals = np.array([1.0, 1.0, 2.0, 2.0])
        with pytest.warns(UserWarning):
            centroids, labels = kmeans_1d(vals, 5, seed=0)
        assert len(centroids) == 2

    def test_cluster_influence_log_transform(self):
        counts = {f"u{i}": 2 ** i for i in range(12)}
        clust = cluster_influence(counts, 3, seed=0)
        assert isinstance(clust, InfluenceClustering)
        # log2(1+2^i) ~ i, so ordering of cluster ids follows follower count
        ids = [clust.assignment[f"u{i}"] for i in range(12)]
        assert ids == sorted(ids)

    def test_assign_value_unseen(self):
        counts = {"a": 10, "b": 1000, "c": 100000}
        clust = cluster_influence(counts, 3, seed=0)
        assert clust.assign_value(9.0) == clust.assignment["a"]
