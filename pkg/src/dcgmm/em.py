"""Classical batch EM for diagonal GMMs, k-means init and clustering metrics.

This module is deliberately simple and self-contained: it is the trusted
reference that the SGD training path is compared against, so it shares no
code with the gradient machinery beyond the logsumexp kernel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .tensor import logsumexp_rows

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlatGmm:
    """Plain mixture state: weights, means and diagonal variances."""

    pi: np.ndarray    # (K,) summing to 1
    mu: np.ndarray    # (K, D)
    var: np.ndarray   # (K, D) strictly positive

    @property
    def n_components(self) -> int:
        return self.pi.shape[0]

    def copy(self) -> "FlatGmm":
        return FlatGmm(self.pi.copy(), self.mu.copy(), self.var.copy())


def _log_densities(data: np.ndarray, gmm: FlatGmm) -> np.ndarray:
    """(N, K) matrix of log(pi_k N_k(x_n)) for diagonal covariances."""
    n, d = data.shape
    out = np.empty((n, gmm.n_components))
    for k in range(gmm.n_components):
        diff = data - gmm.mu[k]
        out[:, k] = (np.log(gmm.pi[k])
                     - 0.5 * np.sum(np.log(gmm.var[k]))
                     - 0.5 * d * LOG_2PI
                     - 0.5 * np.sum(diff * diff / gmm.var[k], axis=1))
    return out


def log_likelihood(data: np.ndarray, gmm: FlatGmm) -> float:
    """Mean per-sample incomplete-data log-likelihood."""
    return float(np.mean(logsumexp_rows(_log_densities(data, gmm))))


def responsibilities(data: np.ndarray, gmm: FlatGmm) -> np.ndarray:
    """(N, K) posterior membership probabilities; rows sum to one."""
    lwd = _log_densities(data, gmm)
    return np.exp(lwd - logsumexp_rows(lwd)[:, None])


def kmeans(data: np.ndarray, k: int, seed: int = 0,
           max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from k distinct random data points (Forgy init).

    Returns (centers, assignments).  Empty clusters are re-seeded from a
    random data point.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k > n:
        raise DomainError(f"k-means needs N >= K, got N={n}, K={k}")
    rng = np.random.default_rng(seed)
    centers = data[rng.choice(n, size=k, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = (np.sum(data ** 2, axis=1)[:, None]
              - 2.0 * data @ centers.T
              + np.sum(centers ** 2, axis=1)[None, :])
        new_assign = np.argmin(d2, axis=1)
        for j in range(k):
            members = data[new_assign == j]
            if len(members) == 0:
                centers[j] = data[rng.integers(n)]
            else:
                centers[j] = members.mean(axis=0)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return centers, assign


def kmeans_distortion(data: np.ndarray, centers: np.ndarray,
                      assign: np.ndarray) -> float:
    diff = data - centers[assign]
    return float(np.sum(diff * diff))


def init_from_kmeans(data: np.ndarray, k: int, seed: int = 0,
                     n_init: int = 5) -> FlatGmm:
    """Mixture initialization from the best of ``n_init`` k-means restarts."""
    data = np.asarray(data, dtype=np.float64)
    best = None
    for attempt in range(n_init):
        c, a = kmeans(data, k, seed=seed + 7919 * attempt)
        d = kmeans_distortion(data, c, a)
        if best is None or d < best[0]:
            best = (d, c, a)
    _, centers, assign = best
    var = np.empty_like(centers)
    pi = np.empty(k)
    for j in range(k):
        members = data[assign == j]
        if len(members) < 2:
            var[j] = np.maximum(data.var(axis=0), VAR_FLOOR)
        else:
            var[j] = np.maximum(members.var(axis=0), VAR_FLOOR)
        pi[j] = max(len(members), 1)
    return FlatGmm(pi=pi / pi.sum(), mu=centers, var=var)


def em_fit(data: np.ndarray, k: int, init: FlatGmm, max_iters: int = 200,
           tol: float = 1e-7, seed: int = 0) -> tuple[FlatGmm, float, list[float]]:
    """Batch EM until the relative log-likelihood change drops below tol.

    Returns (fitted mixture, final mean log-likelihood, per-iteration trace).
    The trace is non-decreasing apart from iterations where a collapsed
    component had to be re-seeded from a random data point.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    rng = np.random.default_rng(seed)
    gmm = init.copy()
    history: list[float] = []
    prev = -np.inf
    for _ in range(max_iters):
        lwd = _log_densities(data, gmm)
        per_sample = logsumexp_rows(lwd)
        ll = float(np.mean(per_sample))
        history.append(ll)
        resp = np.exp(lwd - per_sample[:, None])       # E step
        nk = resp.sum(axis=0)
        for j in range(k):
            if nk[j] < 1e-10:
                log.info("EM: component %d collapsed; re-seeding from data", j)
                gmm.mu[j] = data[rng.integers(n)]
                gmm.var[j] = np.maximum(data.var(axis=0), VAR_FLOOR)
                gmm.pi[j] = 1.0 / n
                gmm.pi /= gmm.pi.sum()
                lwd = _log_densities(data, gmm)
                per_sample = logsumexp_rows(lwd)
                resp = np.exp(lwd - per_sample[:, None])
                nk = resp.sum(axis=0)
        gmm.mu = (resp.T @ data) / nk[:, None]          # M step
        ex2 = (resp.T @ (data ** 2)) / nk[:, None]
        gmm.var = np.maximum(ex2 - gmm.mu ** 2, VAR_FLOOR)
        gmm.pi = nk / n
        if prev > -np.inf and abs(ll - prev) < tol * max(1.0, abs(prev)):
            break
        prev = ll
    final = log_likelihood(data, gmm)
    history.append(final)
    return gmm, final, history


def _cluster_groups(data: np.ndarray, assignments: np.ndarray) -> list[np.ndarray]:
    labels = np.unique(assignments)
    groups = [data[assignments == c] for c in labels]
    if len(groups) < 2:
        raise DomainError("clustering metrics need at least 2 non-empty clusters")
    return groups


def davies_bouldin(data: np.ndarray, assignments: np.ndarray) -> float:
    """Davies-Bouldin score (lower is better).

    Mean over clusters of the worst (scatter_i + scatter_j) / centroid
    distance ratio, with scatter the mean Euclidean distance to the
    centroid.
    """
    data = np.asarray(data, dtype=np.float64)
    groups = _cluster_groups(data, assignments)
    centroids = np.array([g.mean(axis=0) for g in groups])
    scatter = np.array([np.mean(np.linalg.norm(g - c, axis=1))
                        for g, c in zip(groups, centroids)])
    m = len(groups)
    worst = np.zeros(m)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            dist = np.linalg.norm(centroids[i] - centroids[j])
            worst[i] = max(worst[i], (scatter[i] + scatter[j]) / dist)
    return float(np.mean(worst))


def dunn_index(data: np.ndarray, assignments: np.ndarray) -> float:
    """Dunn index (higher is better).

    Smallest between-cluster point distance divided by the largest
    within-cluster diameter.
    """
    data = np.asarray(data, dtype=np.float64)
    groups = _cluster_groups(data, assignments)
    diameter = 0.0
    for g in groups:
        if len(g) > 1:
            d2 = (np.sum(g ** 2, axis=1)[:, None]
                  - 2.0 * g @ g.T + np.sum(g ** 2, axis=1)[None, :])
            diameter = max(diameter, math.sqrt(max(float(d2.max()), 0.0)))
    if diameter == 0.0:
        return float("inf")
    separation = float("inf")
    m = len(groups)
    for i in range(m):
        for j in range(i + 1, m):
            a, b = groups[i], groups[j]
            d2 = (np.sum(a ** 2, axis=1)[:, None]
                  - 2.0 * a @ b.T + np.sum(b ** 2, axis=1)[None, :])
            separation = min(separation, math.sqrt(max(float(d2.min()), 0.0)))
    return separation / diameter
