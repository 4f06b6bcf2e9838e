import math

import numpy as np
import pytest

import dcgmm.gmm as G
from dcgmm.errors import DomainError, TrainingError


def random_params(rng, k=4, d=3, grid=None, spread=1.0):
    p = G.init_params(k, d, 0.5, 20.0, seed=int(rng.integers(1 << 30)), grid=grid)
    p.xi = rng.normal(scale=0.5, size=k)
    p.mu = rng.normal(scale=spread, size=(k, d))
    p.chol_d = rng.uniform(0.5, 3.0, size=(k, d))
    return p


class TestInitParams:
    def test_mnist_scale_defaults(self):
        p = G.init_params(64, 784, 0.1, 20.0, seed=0)
        pi = G.component_weights(p.xi)
        np.testing.assert_allclose(pi, np.full(64, 1 / 64), atol=1e-15)
        assert np.all(p.chol_d == 20.0)
        assert np.all(np.abs(p.mu) <= 0.1)
        assert p.grid == (8, 8)

    def test_single_component(self):
        p = G.init_params(1, 3, 0.1, 20.0, seed=1)
        np.testing.assert_array_equal(G.component_weights(p.xi), [1.0])

    def test_seed_determinism(self):
        a = G.init_params(9, 5, 0.2, 20.0, seed=123)
        b = G.init_params(9, 5, 0.2, 20.0, seed=123)
        c = G.init_params(9, 5, 0.2, 20.0, seed=124)
        np.testing.assert_array_equal(a.mu, b.mu)
        assert not np.array_equal(a.mu, c.mu)

    def test_bad_arguments(self):
        with pytest.raises(DomainError):
            G.init_params(0, 3, 0.1, 20.0, seed=0)
        with pytest.raises(DomainError):
            G.init_params(4, 0, 0.1, 20.0, seed=0)
        with pytest.raises(DomainError):
            G.init_params(7, 3, 0.1, 20.0, seed=0)   # not a grid product


class TestComponentWeights:
    def test_zeros_give_uniform(self):
        np.testing.assert_allclose(G.component_weights(np.zeros(5)), np.full(5, 0.2))

    def test_analytic_two_component(self):
        pi = G.component_weights(np.array([math.log(2.0), 0.0]))
        np.testing.assert_allclose(pi, [2 / 3, 1 / 3], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        xi = rng.normal(size=6)
        for c in rng.normal(size=5) * 100:
            np.testing.assert_allclose(G.component_weights(xi),
                                       G.component_weights(xi + c), atol=1e-12)


class TestLogWeightedDensities:
    def test_standard_normal_at_mean(self):
        p = G.GmmParams(xi=np.zeros(1), mu=np.zeros((1, 1)),
                        chol_d=np.ones((1, 1)), grid=(1, 1))
        out = G.log_weighted_densities(np.zeros(1), p)
        assert out[0] == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_two_dimensional_unit(self):
        p = G.GmmParams(xi=np.zeros(1), mu=np.zeros((1, 2)),
                        chol_d=np.ones((1, 2)), grid=(1, 1))
        out = G.log_weighted_densities(np.ones(2), p)
        assert out[0] == pytest.approx(-math.log(2 * math.pi) - 1.0, abs=1e-12)

    def test_against_dense_covariance_oracle(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(11)
        p = random_params(rng, k=3, d=4, grid=(1, 3))
        x = rng.normal(size=4)
        pi = G.component_weights(p.xi)
        got = G.log_weighted_densities(x, p)
        for k in range(3):
            cov = np.diag(1.0 / p.chol_d[k] ** 2)   # dense-formula oracle
            want = math.log(pi[k]) + scipy_stats.multivariate_normal.logpdf(
                x, mean=p.mu[k], cov=cov)
            assert got[k] == pytest.approx(want, abs=1e-10)


class TestMaxComponentLoss:
    def test_single_component_equals_mean_density(self):
        rng = np.random.default_rng(5)
        p = random_params(rng, k=1, d=3, grid=(1, 1))
        x = rng.normal(size=(10, 3))
        want = np.mean([G.log_weighted_densities(xi, p)[0] for xi in x])
        assert G.max_component_loss(x, p) == pytest.approx(want, abs=1e-12)

    def test_sample_at_centroid_frozen_value(self):
        # two components, uniform weights, sample exactly at centroid 0
        p = G.GmmParams(xi=np.zeros(2), mu=np.array([[0.0], [5.0]]),
                        chol_d=np.ones((2, 1)), grid=(1, 2))
        got = G.max_component_loss(np.zeros((1, 1)), p)
        assert got == pytest.approx(math.log(0.5) - 0.5 * math.log(2 * math.pi),
                                    abs=1e-12)

    def test_full_likelihood_dominates(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            k = int(rng.integers(1, 7))
            p = random_params(rng, k=k, d=int(rng.integers(1, 5)), grid=(1, k))
            x = rng.normal(size=(int(rng.integers(1, 12)), p.dim))
            assert G.full_log_likelihood(x, p) >= G.max_component_loss(x, p) - 1e-12


class TestSmoothingWeights:
    def test_sigma_zero_limit_is_identity(self):
        np.testing.assert_array_equal(G.smoothing_weights(0.0, (3, 3)), np.eye(9))
        np.testing.assert_array_equal(
            G.smoothing_weights(0.01, (3, 3), sigma_floor=0.01), np.eye(9))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            g = G.smoothing_weights(float(rng.uniform(0.05, 10)), (4, 4))
            np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)

    def test_symmetry_on_torus(self):
        for sigma in (0.3, 1.0, 2.5, 7.0):
            g = G.smoothing_weights(sigma, (5, 5))
            for a in range(25):                  # direct check over all pairs
                for b in range(25):
                    assert g[a, b] == pytest.approx(g[b, a], abs=1e-12)


class TestSmoothedLoss:
    def test_identity_recovers_max_component(self):
        rng = np.random.default_rng(21)
        p = random_params(rng, k=9, d=4)
        x = rng.normal(size=(8, 4))
        got = G.smoothed_loss(x, p, np.eye(9))
        assert got == pytest.approx(G.max_component_loss(x, p), abs=1e-12)

    def test_never_exceeds_max_component(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            p = random_params(rng, k=9, d=3)
            x = rng.normal(size=(6, 3))
            g = G.smoothing_weights(float(rng.uniform(0.2, 5)), (3, 3))
            assert G.smoothed_loss(x, p, g) <= G.max_component_loss(x, p) + 1e-12

    def test_single_component_unaffected_by_sigma(self):
        rng = np.random.default_rng(23)
        p = random_params(rng, k=1, d=2, grid=(1, 1))
        x = rng.normal(size=(5, 2))
        for sigma in (0.0, 1.0, 10.0):
            g = G.smoothing_weights(sigma, (1, 1))
            assert G.smoothed_loss(x, p, g) == pytest.approx(
                G.max_component_loss(x, p), abs=1e-12)

    def test_likelihood_chain_over_random_pairs(self):
        # full incomplete-data >= max-component >= smoothed, 1000 random pairs
        rng = np.random.default_rng(24)
        for _ in range(1000):
            k = int(rng.integers(1, 10))
            d = int(rng.integers(1, 6))
            p = random_params(rng, k=k, d=d, grid=(1, k))
            x = rng.normal(size=(int(rng.integers(1, 8)), d))
            g = G.smoothing_weights(float(rng.uniform(0.0, 4.0)), (1, k))
            full = G.full_log_likelihood(x, p)
            maxc = G.max_component_loss(x, p)
            smooth = G.smoothed_loss(x, p, g)
            assert full >= maxc - 1e-12
            assert maxc >= smooth - 1e-12


def finite_difference_gradients(x, p, g, h=1e-5):
    """Central finite differences of the smoothed loss over every parameter."""
    groups = {}
    for name in ("xi", "mu", "chol_d"):
        base = getattr(p, name)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (+1, -1):
                q = p.copy()
                arr = getattr(q, name).copy()
                arr[idx] += sign * h
                setattr(q, name, arr)
                grad[idx] += sign * G.smoothed_loss(x, q, g)
        groups[name] = grad / (2 * h)
    return groups


def max_rel_error(analytic, numeric):
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


class TestGradients:
    def test_zero_mu_gradient_at_centroid(self):
        # one sample exactly at centroid k*, identity smoothing
        p = G.GmmParams(xi=np.zeros(2), mu=np.array([[1.0, 2.0], [5.0, 5.0]]),
                        chol_d=np.full((2, 2), 1.5), grid=(1, 2))
        grads = G.loss_gradients(np.array([[1.0, 2.0]]), p, np.eye(2))
        np.testing.assert_allclose(grads.mu[0], 0.0, atol=1e-14)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(77)
        p = random_params(rng, k=4, d=3, grid=(2, 2))
        x = rng.normal(size=(7, 3))
        g = G.smoothing_weights(1.0, (2, 2))
        analytic = G.loss_gradients(x, p, g)
        numeric = finite_difference_gradients(x, p, g)
        assert max_rel_error(analytic.xi, numeric["xi"]) < 1e-4
        assert max_rel_error(analytic.mu, numeric["mu"]) < 1e-4
        assert max_rel_error(analytic.chol_d, numeric["chol_d"]) < 1e-4

    def test_untouched_components_get_zero_distribution_gradient(self):
        # with identity smoothing, a component that is never the BMU receives
        # no centroid or precision update (its weight logit still feels the
        # softmax normalization pressure -pi_k)
        rng = np.random.default_rng(78)
        p = random_params(rng, k=3, d=2, grid=(1, 3))
        p.mu[2] = np.array([100.0, 100.0])      # never wins
        x = rng.normal(size=(9, 2))
        grads = G.loss_gradients(x, p, np.eye(3))
        np.testing.assert_allclose(grads.mu[2], 0.0, atol=1e-15)
        np.testing.assert_allclose(grads.chol_d[2], 0.0, atol=1e-15)
        pi = G.component_weights(p.xi)
        assert grads.xi[2] == pytest.approx(-pi[2], abs=1e-12)


class TestSgdStep:
    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(31)
        p = random_params(rng, k=4, d=3, grid=(2, 2))
        state = G.default_annealing(4, eps=0.01)
        x = rng.normal(size=(5, 3))
        q = G.sgd_step(x, p, state, eps=0.0)
        np.testing.assert_array_equal(p.xi, q.xi)
        np.testing.assert_array_equal(p.mu, q.mu)
        np.testing.assert_array_equal(p.chol_d, q.chol_d)

    def test_small_step_increases_loss(self):
        rng = np.random.default_rng(32)
        p = random_params(rng, k=4, d=3, grid=(2, 2))
        state = G.default_annealing(4, eps=1e-3)
        x = rng.normal(size=(1, 3)) * 0.1
        g = G.annealing_mask(p, state)
        before = G.smoothed_loss(x, p, g)
        q = G.sgd_step(x, p, state, eps=1e-3)
        after = G.smoothed_loss(x, q, g)
        assert after > before

    def test_chol_d_clipped_to_ceiling(self):
        p = G.GmmParams(xi=np.zeros(1), mu=np.zeros((1, 1)),
                        chol_d=np.array([[19.9999]]), grid=(1, 1), d_max=20.0)
        state = G.default_annealing(1, eps=1.0)
        # sample at the centroid: d-gradient is 1/d > 0, pushing above 20
        q = G.sgd_step(np.zeros((1, 1)), p, state, eps=10.0)
        assert q.chol_d[0, 0] == 20.0

    def test_invariants_hold_after_many_steps(self):
        rng = np.random.default_rng(33)
        p = G.init_params(9, 4, 0.3, 20.0, seed=5)
        state = G.default_annealing(9, eps=0.05)
        for _ in range(200):
            x = rng.normal(size=(4, 4))
            g = G.annealing_mask(p, state)
            loss = G.smoothed_loss(x, p, g)
            p = G.sgd_step(x, p, state, eps=0.05)
            G.update_annealing(state, loss)
            p.check()


class TestAnnealing:
    def test_improving_loss_keeps_sigma(self):
        state = G.AnnealingState(sigma=3.0, sigma0=3.0, sigma_inf=0.01, alpha=0.5)
        for t in range(12):
            G.update_annealing(state, float(2.0 ** t))
        assert state.sigma == 3.0

    def test_constant_loss_reduces_sigma(self):
        state = G.AnnealingState(sigma=3.0, sigma0=3.0, sigma_inf=0.01, alpha=0.25)
        for _ in range(2 * state.check_period):
            G.update_annealing(state, 1.0)
        assert state.sigma == pytest.approx(0.9 * 3.0, abs=1e-15)

    def test_long_run_never_drops_below_floor(self):
        state = G.AnnealingState(sigma=2.0, sigma0=2.0, sigma_inf=0.01, alpha=0.5)
        for _ in range(1_000_000):
            G.update_annealing(state, 1.0)
        assert state.sigma == pytest.approx(0.01, abs=1e-15)
        assert state.sigma >= state.sigma_inf

    def test_sigma_monotone_under_arbitrary_losses(self):
        rng = np.random.default_rng(40)
        state = G.AnnealingState(sigma=5.0, sigma0=5.0, sigma_inf=0.1, alpha=0.2)
        last = state.sigma
        for _ in range(500):
            G.update_annealing(state, float(rng.normal()))
            assert state.sigma <= last + 1e-15
            last = state.sigma

    def test_sliding_average_is_convex_combination(self):
        state = G.AnnealingState(sigma=1.0, sigma0=1.0, sigma_inf=0.01, alpha=0.25)
        G.update_annealing(state, 10.0)     # first call initializes
        before = state.ell
        G.update_annealing(state, 2.0)
        assert state.ell == pytest.approx(0.75 * before + 0.25 * 2.0, abs=1e-12)

    def test_non_finite_loss_rejected(self):
        state = G.default_annealing(4, eps=0.1)
        with pytest.raises(TrainingError):
            G.update_annealing(state, float("nan"))


class TestAnnealingNecessity:
    def test_annealed_training_beats_disabled_annealing(self, digits):
        # qualitative: switched-off annealing lands in a sparse-component
        # optimum with a clearly worse final likelihood
        train, _ = digits
        x = train.samples.flatten_features()[:600]
        ll = {}
        for flag in (True, False):
            params, _ = G.train_gmm(x, 25, epochs=4, batch_size=10, eps=0.05,
                                    mu_range=0.1, annealing=flag, seed=3)
            ll[flag] = G.full_log_likelihood(x, params)
        assert ll[True] > ll[False] + 5.0
