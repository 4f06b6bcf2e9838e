"""Trainable Gaussian mixture parameter block with SGD losses and annealing.

A mixture of K diagonal-covariance Gaussians over D-dimensional data is held
in :class:`GmmParams`.  Component weights are parameterized through free
logits ``xi`` (softmax keeps them normalized structurally), and precisions
through the diagonal Cholesky factor ``chol_d`` (precision = chol_d**2 keeps
them positive).  Training maximizes the smoothed max-component log-likelihood
by plain gradient ascent; a grid-neighbourhood smoothing with shrinking
radius sigma drives the self-organization that replaces data-driven
initialization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, ShapeError, TrainingError
from .tensor import logsumexp_rows

__all__ = [
    "GmmParams",
    "AnnealingState",
    "GmmGradients",
    "CHOL_D_FLOOR",
    "init_params",
    "component_weights",
    "log_weighted_densities",
    "full_log_likelihood",
    "max_component_loss",
    "smoothing_weights",
    "smoothed_loss",
    "loss_gradients",
    "loss_gradients_with_stats",
    "apply_gradients",
    "sgd_step",
    "update_annealing",
    "annealing_mask",
    "bmu_responsibilities",
    "train_gmm",
]

log = logging.getLogger(__name__)

# Strictly positive floor for the Cholesky diagal entries; prevents singular
# components on constant input dimensions.
CHOL_D_FLOOR = 1e-4

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmParams:
    """Free parameters of one GMM (layer): weight logits, centroids, precisions."""

    xi: np.ndarray          # (K,) free weight logits
    mu: np.ndarray          # (K, D) centroids
    chol_d: np.ndarray      # (K, D) diagonal Cholesky factors, in (0, d_max]
    grid: tuple[int, int]   # (gh, gw) component grid, gh*gw == K
    d_max: float = 20.0     # clipping ceiling for chol_d entries

    @property
    def n_components(self) -> int:
        return self.xi.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def copy(self) -> "GmmParams":
        return GmmParams(self.xi.copy(), self.mu.copy(), self.chol_d.copy(),
                         self.grid, self.d_max)

    def check(self) -> None:
        """Assert the structural invariants; raises on violation."""
        k = self.n_components
        gh, gw = self.grid
        if gh * gw != k:
            raise ShapeError(f"grid {self.grid} does not tile K={k} components")
        if self.mu.shape[0] != k or self.chol_d.shape != self.mu.shape:
            raise ShapeError("xi, mu and chol_d disagree on K or D")
        if not (np.all(np.isfinite(self.xi)) and np.all(np.isfinite(self.mu))
                and np.all(np.isfinite(self.chol_d))):
            raise TrainingError("non-finite GMM parameters")
        if np.any(self.chol_d <= 0) or np.any(self.chol_d > self.d_max):
            raise TrainingError("chol_d outside (0, d_max]")
        pi = component_weights(self.xi)
        if abs(pi.sum() - 1.0) > 1e-12 or np.any(pi <= 0):
            raise TrainingError("component weights are not a valid distribution")


@dataclass
class AnnealingState:
    """Sigma schedule plus the sliding-loss bookkeeping that drives it.

    ``ell`` is the sliding average of the training loss, ``ell_t0`` its value
    at the start of training and ``ell_prev`` its value at the previous
    stationarity check.  Every ceil(1/alpha) iterations the relative progress

        delta = (ell(t) - ell(t - 1/alpha)) / (ell(t - 1/alpha) - ell_t0)

    is evaluated; progress below the threshold ``delta_threshold`` (or a
    vanishing denominator) counts as stationary and shrinks sigma by 0.9,
    never below ``sigma_inf``.
    """

    sigma: float
    sigma0: float
    sigma_inf: float
    alpha: float
    delta_threshold: float = 0.05
    ell: float | None = None
    ell_prev: float | None = None
    ell_t0: float | None = None
    iteration: int = 0

    @property
    def check_period(self) -> int:
        return max(1, int(math.ceil(1.0 / self.alpha)))

    @property
    def at_floor(self) -> bool:
        return self.sigma <= self.sigma_inf * (1.0 + 1e-9)

    def copy(self) -> "AnnealingState":
        return AnnealingState(self.sigma, self.sigma0, self.sigma_inf, self.alpha,
                              self.delta_threshold, self.ell, self.ell_prev,
                              self.ell_t0, self.iteration)

    def reset_sigma(self, factor: float) -> None:
        """Re-open the annealing radius to factor*sigma0 (factor < 0 disables)."""
        if factor < 0:
            return
        self.sigma = max(factor * self.sigma0, self.sigma_inf)
        self.ell = None
        self.ell_prev = None
        self.ell_t0 = None


def default_annealing(k: int, eps: float, sigma0: float | None = None,
                      sigma_inf: float = 0.01, alpha: float | None = None,
                      delta: float = 0.05) -> AnnealingState:
    """Annealing state with the universal defaults: sigma0=sqrt(K), alpha=eps."""
    s0 = math.sqrt(k) if sigma0 is None else sigma0
    a = eps if alpha is None else alpha
    return AnnealingState(sigma=s0, sigma0=s0, sigma_inf=sigma_inf, alpha=a,
                          delta_threshold=delta)


def init_params(k: int, dim: int, mu_range: float, d_max: float,
                seed: int | np.random.Generator,
                grid: tuple[int, int] | None = None) -> GmmParams:
    """Fresh mixture parameters: uniform weights, small random centroids.

    Centroids are drawn from U(-mu_range, +mu_range); chol_d starts at the
    clipping ceiling d_max.  K must tile the component grid exactly (a square
    grid is inferred when none is given).
    """
    if k < 1 or dim < 1:
        raise DomainError(f"need K >= 1 and D >= 1, got K={k}, D={dim}")
    if mu_range <= 0:
        raise DomainError("mu_range must be positive")
    if grid is None:
        side = int(round(math.sqrt(k)))
        if side * side != k:
            raise DomainError(f"K={k} is not a perfect square; pass an explicit grid")
        grid = (side, side)
    gh, gw = grid
    if gh * gw != k:
        raise DomainError(f"grid {grid} does not tile K={k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return GmmParams(
        xi=np.zeros(k),
        mu=rng.uniform(-mu_range, mu_range, size=(k, dim)),
        chol_d=np.full((k, dim), float(d_max)),
        grid=(gh, gw),
        d_max=float(d_max),
    )


def component_weights(xi: np.ndarray) -> np.ndarray:
    """Softmax of the weight logits; positive and summing to one."""
    shifted = xi - np.max(xi)
    e = np.exp(shifted)
    return e / e.sum()


def log_weighted_densities(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """log(pi_k * N_k(x)) for one D-vector, over all K components."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dim,):
        raise ShapeError(f"expected a vector of length {params.dim}, got {x.shape}")
    return log_weighted_densities_batch(x[None, :], params)[0]


def log_weighted_densities_batch(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """log(pi_k * N_k(x_n)) as an (N, K) matrix.

    For diagonal precisions P_k = chol_d_k**2 the component log-density is
    sum_j log(d_kj) - D/2 log(2 pi) - 1/2 sum_j d_kj^2 (x_j - mu_kj)^2; the
    quadratic term is evaluated with three matrix products rather than an
    (N, K, D) intermediate.
    """
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ShapeError(f"expected an (N, {params.dim}) matrix, got {x.shape}")
    prec = params.chol_d ** 2                       # (K, D)
    log_pi = params.xi - logsumexp_rows(params.xi[None, :])[0]
    log_det = np.sum(np.log(params.chol_d), axis=1)  # (K,)
    const = log_pi + log_det - 0.5 * params.dim * LOG_2PI
    quad = (0.5 * (x ** 2) @ prec.T
            - x @ (prec * params.mu).T
            + 0.5 * np.sum(prec * params.mu ** 2, axis=1)[None, :])
    return const[None, :] - quad


def full_log_likelihood(x: np.ndarray, params: GmmParams) -> float:
    """Mean per-sample log sum_k pi_k N_k(x_n), via logsumexp."""
    lwd = log_weighted_densities_batch(np.asarray(x, dtype=np.float64), params)
    return float(np.mean(logsumexp_rows(lwd)))


def max_component_loss(x: np.ndarray, params: GmmParams) -> float:
    """Mean per-sample log(pi_k* N_k*(x_n)) with k* the best matching unit."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise DomainError("empty batch")
    lwd = log_weighted_densities_batch(x, params)
    return float(np.mean(np.max(lwd, axis=1)))


def smoothing_weights(sigma: float, grid: tuple[int, int],
                      sigma_floor: float = 0.0) -> np.ndarray:
    """Row-stochastic (K, K) neighbourhood weights on a periodic grid.

    Component k spreads its update over grid neighbours j with weight
    proportional to exp(-dist(k, j)^2 / (2 sigma^2)) where dist is the
    toroidal Euclidean distance on the gh x gw grid; rows are normalized to
    sum to one so the smoothed loss stays a convex combination.  At
    sigma <= sigma_floor*(1+1e-9) (and in the sigma -> 0 limit) the identity
    matrix is returned.
    """
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    return _smoothing_weights_cached(float(sigma), tuple(grid), float(sigma_floor))


@lru_cache(maxsize=512)
def _smoothing_weights_cached(sigma: float, grid: tuple[int, int],
                              sigma_floor: float) -> np.ndarray:
    gh, gw = grid
    k = gh * gw
    if sigma <= max(sigma_floor * (1.0 + 1e-9), 1e-12):
        out = np.eye(k)
    else:
        rows, cols = np.divmod(np.arange(k), gw)
        dr = np.abs(rows[:, None] - rows[None, :])
        dr = np.minimum(dr, gh - dr)
        dc = np.abs(cols[:, None] - cols[None, :])
        dc = np.minimum(dc, gw - dc)
        dist_sq = dr.astype(np.float64) ** 2 + dc.astype(np.float64) ** 2
        out = np.exp(-dist_sq / (2.0 * sigma * sigma))
        out /= out.sum(axis=1, keepdims=True)
    out.flags.writeable = False
    return out


def annealing_mask(params: GmmParams, state: AnnealingState) -> np.ndarray:
    """Current smoothing matrix for the state's sigma (identity at the floor)."""
    return smoothing_weights(state.sigma, params.grid, sigma_floor=state.sigma_inf)


def _smoothed_terms(x: np.ndarray, params: GmmParams, g: np.ndarray):
    """Per-sample smoothed loss terms, BMU indices and the (N, K) densities."""
    lwd = log_weighted_densities_batch(x, params)
    inner = lwd @ g.T                      # (N, K): smoothed sum for every candidate k
    kstar = np.argmax(inner, axis=1)       # ties break to the lowest index
    return inner[np.arange(x.shape[0]), kstar], kstar, lwd


def smoothed_loss(x: np.ndarray, params: GmmParams, g: np.ndarray) -> float:
    """Mean per-sample max_k sum_j g[k][j] log(pi_j N_j(x_n))."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise DomainError("empty batch")
    terms, _, _ = _smoothed_terms(x, params, g)
    return float(np.mean(terms))


@dataclass
class GmmGradients:
    """Ascent-direction gradients of the smoothed loss, one array per group."""

    xi: np.ndarray
    mu: np.ndarray
    chol_d: np.ndarray


def _loss_gradients_inner(x: np.ndarray, params: GmmParams, g: np.ndarray):
    """Loss, gradients and the raw (N, K) density matrix from one forward pass."""
    n = x.shape[0]
    terms, kstar, lwd = _smoothed_terms(x, params, g)
    w = g[kstar]                                  # (N, K)
    s0 = w.sum(axis=0)                            # (K,)
    s1 = w.T @ x                                  # (K, D)
    s2 = w.T @ (x ** 2)                           # (K, D)
    prec = params.chol_d ** 2
    pi = component_weights(params.xi)

    grad_xi = s0 / n - pi
    grad_mu = prec * (s1 - s0[:, None] * params.mu) / n
    # sum_n w_nk (x_nj - mu_kj)^2, expanded so no (N, K, D) array is built
    sq = s2 - 2.0 * params.mu * s1 + (params.mu ** 2) * s0[:, None]
    grad_d = (s0[:, None] / params.chol_d - params.chol_d * sq) / n
    grads = GmmGradients(xi=grad_xi, mu=grad_mu, chol_d=grad_d)
    return float(np.mean(terms)), grads, lwd


def _loss_and_gradients(x: np.ndarray, params: GmmParams,
                        g: np.ndarray) -> tuple[float, GmmGradients]:
    """Smoothed loss and its gradients from a single forward pass."""
    loss, grads, _ = _loss_gradients_inner(x, params, g)
    return loss, grads


def loss_gradients_with_stats(x: np.ndarray, params: GmmParams,
                              g: np.ndarray) -> tuple[float, GmmGradients, np.ndarray]:
    """Loss, gradients and per-row best-matching-unit log-likelihoods.

    The third element is max_k log(pi_k N_k(x_n)) per row, the quantity
    tracked by the outlier statistics; sharing the forward pass avoids a
    second density evaluation per training step.
    """
    x = np.asarray(x, dtype=np.float64)
    loss, grads, lwd = _loss_gradients_inner(x, params, g)
    return loss, grads, np.max(lwd, axis=1)


def loss_gradients(x: np.ndarray, params: GmmParams, g: np.ndarray) -> GmmGradients:
    """Analytic gradients of the smoothed max-component loss.

    Each sample contributes through its best matching unit k*: component k
    receives the neighbourhood weight w_k = g[k*][k].  With w summing to one
    along each row the gradients are

        d/dxi_k    mean_n [w_nk - pi_k]
        d/dmu_kj   mean_n [w_nk * d_kj^2 (x_nj - mu_kj)]
        d/dd_kj    mean_n [w_nk * (1/d_kj - d_kj (x_nj - mu_kj)^2)]

    which reduce to the plain max-component gradients when g is the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    return _loss_and_gradients(x, params, g)[1]


def apply_gradients(params: GmmParams, grads: GmmGradients, eps: float,
                    iteration: int = 0, update_chol_d: bool = True) -> GmmParams:
    """Move parameters by +eps*gradient and re-impose the constraints."""
    xi = params.xi + eps * grads.xi
    mu = params.mu + eps * grads.mu
    if update_chol_d:
        chol_d = np.clip(params.chol_d + eps * grads.chol_d, CHOL_D_FLOOR, params.d_max)
    else:
        chol_d = params.chol_d.copy()
    if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(mu))
            and np.all(np.isfinite(chol_d))):
        raise TrainingError(f"non-finite parameter after SGD step at iteration {iteration}")
    return GmmParams(xi=xi, mu=mu, chol_d=chol_d, grid=params.grid, d_max=params.d_max)


def sgd_step(x: np.ndarray, params: GmmParams, state: AnnealingState, eps: float,
             update_chol_d: bool = True) -> GmmParams:
    """One gradient-ascent step on the smoothed loss; returns updated params.

    After the step the Cholesky diagonals are clipped into
    (CHOL_D_FLOOR, d_max]; weight normalization needs no projection because
    it is built into the softmax parameterization.  ``update_chol_d=False``
    freezes the precisions (centroids-first warmup).
    """
    if eps < 0:
        raise DomainError("learning rate must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    g = annealing_mask(params, state)
    _, grads = _loss_and_gradients(x, params, g)
    return apply_gradients(params, grads, eps, state.iteration, update_chol_d)


def update_annealing(state: AnnealingState, loss: float) -> AnnealingState:
    """Fold one loss value into the sliding average and shrink sigma on stagnation.

    Mutates and returns ``state``.  The first check after training starts
    only records the window baseline; from the second check on the progress
    ratio is evaluated.  A vanishing denominator counts as stationary.
    """
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at iteration {state.iteration}")
    if state.ell is None:
        state.ell = loss
        state.ell_t0 = loss
    else:
        a = state.alpha
        state.ell = (1.0 - a) * state.ell + a * loss
    state.iteration += 1
    if state.iteration % state.check_period == 0:
        if state.ell_prev is None:
            state.ell_prev = state.ell
            return state
        denom = state.ell_prev - state.ell_t0
        stationary = False
        if abs(denom) < 1e-300:
            log.info("annealing: zero progress denominator at iteration %d; "
                     "treating loss as stationary", state.iteration)
            stationary = True
        else:
            stationary = (state.ell - state.ell_prev) / denom < state.delta_threshold
        if stationary and not state.at_floor:
            state.sigma = max(0.9 * state.sigma, state.sigma_inf)
        state.ell_prev = state.ell
    return state


def bmu_responsibilities(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """Posterior responsibility of the best matching unit for each sample."""
    lwd = log_weighted_densities_batch(np.asarray(x, dtype=np.float64), params)
    return np.exp(np.max(lwd, axis=1) - logsumexp_rows(lwd))


def train_gmm(data: np.ndarray, k: int, *, epochs: int, batch_size: int, eps: float,
              mu_range: float = 0.1, d_max: float = 20.0,
              sigma0: float | None = None, sigma_inf: float = 0.01,
              alpha: float | None = None, delta: float = 0.05,
              warmup_fraction: float = 0.5, annealing: bool = True,
              seed: int = 0, grid: tuple[int, int] | None = None,
              callback=None) -> tuple[GmmParams, AnnealingState]:
    """Full annealed SGD training loop for a flat GMM on an (N, D) matrix.

    Precisions are frozen for the first ``warmup_fraction`` of all iterations
    (centroids first, covariances later).  ``annealing=False`` starts sigma at
    the floor, i.e. trains on the raw max-component loss from iteration 0.
    """
    data = np.asarray(data, dtype=np.float64)
    n, dim = data.shape
    if n == 0:
        raise DomainError("empty training set")
    root = np.random.SeedSequence(seed)
    init_seed, shuffle_seed = root.spawn(2)
    params = init_params(k, dim, mu_range, d_max,
                         np.random.default_rng(init_seed), grid=grid)
    state = default_annealing(k, eps, sigma0=sigma0, sigma_inf=sigma_inf,
                              alpha=alpha, delta=delta)
    if not annealing:
        state.sigma = state.sigma_inf
    shuffle_rng = np.random.default_rng(shuffle_seed)
    batches_per_epoch = int(math.ceil(n / batch_size))
    total = epochs * batches_per_epoch
    step = 0
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for b in range(batches_per_epoch):
            batch = data[order[b * batch_size:(b + 1) * batch_size]]
            g = annealing_mask(params, state)
            loss, grads = _loss_and_gradients(batch, params, g)
            params = apply_gradients(params, grads, eps, state.iteration,
                                     update_chol_d=(step >= warmup_fraction * total))
            update_annealing(state, loss)
            step += 1
            if callback is not None:
                callback(step, params, state, loss)
    return params, state
