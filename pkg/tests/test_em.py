import math

import numpy as np
import pytest

import dcgmm.em as em
import dcgmm.gmm as G
from dcgmm.errors import DomainError


def two_blobs(rng, n=200, sep=6.0):
    a = rng.normal(size=(n // 2, 2)) * 0.5 + [-sep / 2, 0]
    b = rng.normal(size=(n - n // 2, 2)) * 0.5 + [sep / 2, 0]
    return np.concatenate([a, b]), np.array([0] * (n // 2) + [1] * (n - n // 2))


class TestKmeans:
    def test_k_equals_n_zero_distortion(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(8, 3))
        centers, assign = em.kmeans(data, 8, seed=1)
        sorted_centers = centers[np.lexsort(centers.T)]
        sorted_data = data[np.lexsort(data.T)]
        np.testing.assert_allclose(sorted_centers, sorted_data, atol=1e-12)
        d = data - centers[assign]
        assert np.sum(d * d) == pytest.approx(0.0, abs=1e-20)

    def test_two_separated_blobs(self):
        rng = np.random.default_rng(1)
        data, _ = two_blobs(rng, n=400)
        centers, _ = em.kmeans(data, 2, seed=2)
        centers = centers[np.argsort(centers[:, 0])]
        np.testing.assert_allclose(centers[0], [-3.0, 0.0], atol=0.1)
        np.testing.assert_allclose(centers[1], [3.0, 0.0], atol=0.1)

    def test_distortion_non_increasing(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(120, 4))
        distortions = []
        centers = data[np.random.default_rng(3).choice(120, 5, replace=False)].copy()
        for _ in range(15):                      # explicit Lloyd iterations
            d2 = ((data[:, None, :] - centers[None]) ** 2).sum(axis=2)
            assign = np.argmin(d2, axis=1)
            distortions.append(float(d2[np.arange(120), assign].sum()))
            for j in range(5):
                members = data[assign == j]
                if len(members):
                    centers[j] = members.mean(axis=0)
        assert all(b <= a + 1e-9 for a, b in zip(distortions, distortions[1:]))

    def test_k_larger_than_n_rejected(self):
        with pytest.raises(DomainError):
            em.kmeans(np.zeros((3, 2)), 4)


class TestEmFit:
    def test_single_component_matches_moments(self):
        rng = np.random.default_rng(4)
        data = rng.normal(loc=2.0, scale=1.5, size=(300, 3))
        init = em.FlatGmm(pi=np.ones(1), mu=np.zeros((1, 3)), var=np.ones((1, 3)))
        fitted, _, _ = em.em_fit(data, 1, init, max_iters=1)
        np.testing.assert_allclose(fitted.mu[0], data.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(fitted.var[0], data.var(axis=0), atol=1e-10)
        assert fitted.pi[0] == 1.0

    def test_log_likelihood_monotone(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(200, 2)) + rng.integers(0, 2, (200, 1)) * 4.0
        init = em.init_from_kmeans(data, 3, seed=6)
        _, _, history = em.em_fit(data, 3, init, max_iters=40)
        for a, b in zip(history, history[1:]):
            assert b >= a - 1e-9

    def test_two_separated_gaussians_recovered(self):
        rng = np.random.default_rng(7)
        n = 2000
        data = np.concatenate([
            rng.normal(-5.0, 1.0, size=(n // 2, 1)),
            rng.normal(+5.0, 1.0, size=(n // 2, 1)),
        ])
        init = em.init_from_kmeans(data, 2, seed=8)
        fitted, _, _ = em.em_fit(data, 2, init)
        mu = np.sort(fitted.mu[:, 0])
        assert abs(mu[0] + 5.0) < 0.1 and abs(mu[1] - 5.0) < 0.1
        np.testing.assert_allclose(fitted.pi, [0.5, 0.5], atol=0.05)

    def test_responsibilities_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        data = rng.normal(size=(50, 2))
        gmm = em.FlatGmm(pi=np.array([0.3, 0.7]), mu=rng.normal(size=(2, 2)),
                         var=np.ones((2, 2)))
        resp = em.responsibilities(data, gmm)
        np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-12)


def brute_force_davies_bouldin(data, assign):
    labels = np.unique(assign)
    cents, scat = [], []
    for c in labels:
        pts = data[assign == c]
        cent = pts.mean(axis=0)
        cents.append(cent)
        scat.append(np.mean([np.linalg.norm(p - cent) for p in pts]))
    total = 0.0
    for i in range(len(labels)):
        worst = 0.0
        for j in range(len(labels)):
            if i == j:
                continue
            r = (scat[i] + scat[j]) / np.linalg.norm(np.array(cents[i]) - cents[j])
            worst = max(worst, r)
        total += worst
    return total / len(labels)


def brute_force_dunn(data, assign):
    labels = np.unique(assign)
    diam = 0.0
    for c in labels:
        pts = data[assign == c]
        for a in pts:
            for b in pts:
                diam = max(diam, np.linalg.norm(a - b))
    sep = math.inf
    for i, ci in enumerate(labels):
        for cj in labels[i + 1:]:
            for a in data[assign == ci]:
                for b in data[assign == cj]:
                    sep = min(sep, np.linalg.norm(a - b))
    return sep / diam


class TestClusteringMetrics:
    def test_tight_separated_clusters_limit(self):
        # two essentially point-like clusters far apart
        data = np.array([[0.0, 0.0], [1e-9, 0.0], [100.0, 0.0], [100.0, 1e-9]])
        assign = np.array([0, 0, 1, 1])
        assert em.davies_bouldin(data, assign) < 1e-9
        assert em.dunn_index(data, assign) > 1e9

    def test_against_brute_force(self):
        rng = np.random.default_rng(10)
        data = rng.normal(size=(50, 3))
        assign = rng.integers(0, 3, size=50)
        assert em.davies_bouldin(data, assign) == pytest.approx(
            brute_force_davies_bouldin(data, assign), abs=1e-10)
        assert em.dunn_index(data, assign) == pytest.approx(
            brute_force_dunn(data, assign), abs=1e-10)

    def test_davies_bouldin_scale_invariant(self):
        rng = np.random.default_rng(11)
        data = rng.normal(size=(60, 2))
        assign = rng.integers(0, 4, size=60)
        a = em.davies_bouldin(data, assign)
        b = em.davies_bouldin(2.0 * data, assign)
        assert a == pytest.approx(b, abs=1e-12)

    def test_single_cluster_rejected(self):
        with pytest.raises(DomainError):
            em.davies_bouldin(np.zeros((5, 2)), np.zeros(5, dtype=int))
        with pytest.raises(DomainError):
            em.dunn_index(np.zeros((5, 2)), np.zeros(5, dtype=int))


class TestSgdEmEquivalence:
    def test_small_dataset_parity(self):
        # annealed SGD reaches a likelihood within 2% of batch EM's
        rng = np.random.default_rng(12)
        k, d, n = 3, 6, 500
        means = rng.uniform(-1, 1, size=(k, d))
        data = np.concatenate([
            rng.normal(means[j], 0.08, size=(n // k, d)) for j in range(k)])
        init = em.init_from_kmeans(data, k, seed=13)
        _, em_ll, _ = em.em_fit(data, k, init)
        # stability of plain gradient ascent requires eps * d^2 < 2
        params, _ = G.train_gmm(data, k, epochs=25, batch_size=1, eps=0.005,
                                alpha=0.05, mu_range=0.2, d_max=20.0, seed=14,
                                grid=(1, 3))
        sgd_ll = G.full_log_likelihood(data, params)
        assert abs(sgd_ll - em_ll) / abs(em_ll) < 0.02
