import numpy as np
import pytest

from cbdid.errors import SeparationError
from cbdid.propensity import (
    LogisticPropensity,
    Weighting,
    fit_cbd,
    fit_mle,
    gmm_objective,
    moment_h,
    moment_jacobian,
    predict_e0,
    predict_e1,
)


def logistic_sample(n, alpha, seed=0, p=None):
    rng = np.random.default_rng(seed)
    p = len(alpha) - 1 if p is None else p
    X = np.hstack([np.ones((n, 1)), rng.uniform(0, 2, size=(n, p))])
    e = 1.0 / (1.0 + np.exp(-X @ alpha))
    d = rng.random(n) < e
    return X, d


class TestPredict:
    def test_zero_alpha_gives_half(self):
        model = LogisticPropensity(np.zeros(3))
        X = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(predict_e1(model, X), 0.5)

    def test_cancelling_inner_product(self):
        model = LogisticPropensity(np.array([-1.0, 1.0]))
        np.testing.assert_allclose(predict_e1(model, np.array([[1.0, 1.0]])), [0.5])

    def test_sigmoid_two(self):
        model = LogisticPropensity(np.array([0.0, 1.0]))
        np.testing.assert_allclose(
            predict_e1(model, np.array([[1.0, 2.0]])), [0.8807970779778823], rtol=1e-12
        )

    def test_complement_identity(self):
        model = LogisticPropensity(np.array([0.3, -0.7]))
        X = np.random.default_rng(1).normal(size=(50, 2))
        np.testing.assert_array_equal(
            predict_e0(model, X), 1.0 - predict_e1(model, X)
        )


class TestFitMle:
    def test_intercept_only_closed_form(self):
        rng = np.random.default_rng(2)
        n = 400
        d = rng.random(n) < 0.3
        X = np.ones((n, 1))
        fit = fit_mle(X, d)
        share = d.mean()
        np.testing.assert_allclose(fit.model.alpha, [np.log(share / (1 - share))], rtol=1e-8)
        assert fit.converged and fit.score_norm < 1e-8

    def test_consistency(self):
        X, d = logistic_sample(10000, np.array([0.0, -1.0]), seed=3)
        fit = fit_mle(X, d)
        np.testing.assert_allclose(fit.model.alpha, [0.0, -1.0], atol=0.1)

    def test_all_treated_raises(self):
        X = np.ones((5, 1))
        with pytest.raises(SeparationError):
            fit_mle(X, np.ones(5, dtype=bool))

    def test_perfect_separation_raises(self):
        X = np.column_stack([np.ones(20), np.arange(20.0)])
        d = np.arange(20) >= 10
        with pytest.raises(SeparationError):
            fit_mle(X, d)

    def test_fisher_information_matches_score_variance(self):
        alpha = np.array([0.2, -0.8])
        X, d = logistic_sample(100000, alpha, seed=4)
        fit = fit_mle(X, d)
        e = predict_e1(LogisticPropensity(alpha), X)
        scores = (d.astype(float) - e)[:, None] * X
        emp = scores.T @ scores / X.shape[0]
        rel = np.linalg.norm(fit.fisher_information - emp) / np.linalg.norm(emp)
        assert rel < 0.05


class TestMoments:
    def test_defining_formula_agreement(self):
        # Rows must match e1*(d/e1 - 1) x x' and e1*(d0/e0 - 1) x x' exactly.
        rng = np.random.default_rng(5)
        n, p = 40, 3
        X = rng.normal(size=(n, p))
        d = rng.random(n) < 0.4
        alpha = rng.normal(size=p)
        H = moment_h(alpha, X, d)
        e1 = predict_e1(LogisticPropensity(alpha), X)
        m = p * (p + 1) // 2
        for i in range(n):
            xx = np.outer(X[i], X[i])
            rows, cols = np.tril_indices(p)
            order = np.lexsort((rows, cols))
            tri = xx[rows[order], cols[order]]
            d1 = float(d[i])
            h1 = e1[i] * (d1 / e1[i] - 1.0) * tri
            h0 = e1[i] * ((1.0 - d1) / (1.0 - e1[i]) - 1.0) * tri
            np.testing.assert_allclose(H[i, :m], h1, atol=1e-12)
            np.testing.assert_allclose(H[i, m:], h0, atol=1e-12)

    def test_hand_example_p1(self):
        # p=1, x=1, treated, e1=0.5: treated block 0.5, control block -0.5
        H = moment_h(np.array([0.0]), np.array([[1.0]]), np.array([True]))
        np.testing.assert_allclose(H, [[0.5, -0.5]])

    def test_treated_block_vanishes_when_pinned(self):
        # e1 -> 1 makes d/e1 - 1 -> 0 for treated units
        H = moment_h(np.array([40.0]), np.array([[1.0]]), np.array([True]))
        assert abs(H[0, 0]) < 1e-9

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(20, 100))
            p = int(rng.integers(1, 5))
            X = rng.normal(size=(n, p))
            d = rng.random(n) < 0.5
            alpha = rng.normal(scale=0.8, size=p)
            G = moment_jacobian(alpha, X, d)
            Gfd = np.empty_like(G)
            for j in range(p):
                h = 1e-5 * (1 + abs(alpha[j]))
                e = np.zeros(p)
                e[j] = h
                Gfd[:, j] = (
                    moment_h(alpha + e, X, d).mean(axis=0)
                    - moment_h(alpha - e, X, d).mean(axis=0)
                ) / (2 * h)
            scale = max(np.max(np.abs(Gfd)), 1e-12)
            worst = max(worst, float(np.max(np.abs(G - Gfd)) / scale))
        assert worst < 1e-6

    def test_jacobian_saturated_treated_rows(self):
        # With e1 ~ 1 the treated-block derivative carries e1(1-e1) ~ 0.
        G = moment_jacobian(np.array([40.0]), np.array([[1.0]]), np.array([True]))
        assert abs(G[0, 0]) < 1e-9  # e1(1-e1) at the clip floor


class TestGmmObjective:
    def test_zero_moments(self):
        # Balanced two-unit design where the solution zeroes the moments.
        X = np.array([[1.0], [1.0]])
        d = np.array([True, False])
        val = gmm_objective(np.array([0.0]), X, d, np.eye(2))
        assert val == pytest.approx(0.0, abs=1e-30)

    def test_identity_weight_is_squared_norm(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(30, 2))
        d = rng.random(30) < 0.5
        alpha = rng.normal(size=2)
        hbar = moment_h(alpha, X, d).mean(axis=0)
        np.testing.assert_allclose(
            gmm_objective(alpha, X, d, np.eye(6)), hbar @ hbar, rtol=1e-12
        )

    def test_solution_beats_grid(self):
        X, d = logistic_sample(200, np.array([0.0, -1.0]), seed=8)
        Xs = X[:, 1:]
        fit = fit_cbd(Xs, d)
        # Compare in raw coordinates under the realized weighting.
        at_solution = gmm_objective(fit.model.alpha, Xs, d, fit.weight_matrix)
        best_grid = min(
            gmm_objective(np.array([a]), Xs, d, fit.weight_matrix)
            for a in np.linspace(-5, 5, 401)
        )
        assert at_solution <= best_grid + 1e-12


class TestFitCbd:
    def test_consistency_under_correct_model(self):
        X, d = logistic_sample(5000, np.array([0.0, -1.0]), seed=9)
        cbd = fit_cbd(X, d)
        mle = fit_mle(X, d)
        np.testing.assert_allclose(cbd.model.alpha, [0.0, -1.0], atol=0.1)
        np.testing.assert_allclose(mle.model.alpha, [0.0, -1.0], atol=0.1)

    def test_first_order_condition_norm(self):
        X, d = logistic_sample(300, np.array([0.2, -0.5]), seed=10)
        fit = fit_cbd(X, d, tol=1e-8)
        assert fit.converged
        assert fit.foc_norm <= 1e-8

    def test_descent_from_init(self):
        X, d = logistic_sample(300, np.array([0.2, -0.5]), seed=11)
        fit = fit_cbd(X, d)
        assert fit.objective <= fit.objective_at_init + 1e-15

    def test_weight_matrix_shape_and_psd(self):
        X, d = logistic_sample(400, np.array([0.0, -1.0]), seed=12)
        fit = fit_cbd(X, d, weighting=Weighting.OPTIMAL)
        q = 2 * 3
        assert fit.weight_matrix.shape == (q, q)
        np.testing.assert_allclose(fit.weight_matrix, fit.weight_matrix.T, atol=1e-8)
        assert np.all(np.linalg.eigvalsh(fit.weight_matrix) > -1e-8)
        assert fit.converged

    def test_single_class_raises(self):
        with pytest.raises(SeparationError):
            fit_cbd(np.ones((1, 1)), np.array([True]))

    def test_row_permutation_invariance(self):
        X, d = logistic_sample(300, np.array([0.1, -0.7]), seed=13)
        perm = np.random.default_rng(14).permutation(300)
        a = fit_cbd(X, d).model.alpha
        b = fit_cbd(X[perm], d[perm]).model.alpha
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_matches_scalar_bisection_oracle(self):
        # p = 1: the first-order condition G(a)' h_bar(a) is scalar; bracket
        # and bisect it independently and compare against the fitted slope.
        X, d = logistic_sample(150, np.array([0.0, -1.0]), seed=16)
        Xs = X[:, 1:]
        fit = fit_cbd(Xs, d)
        W = fit.weight_matrix

        def foc(a):
            alpha = np.array([a])
            hbar = moment_h(alpha, Xs, d).mean(axis=0)
            return float((moment_jacobian(alpha, Xs, d).T @ (W @ hbar))[0])

        lo, hi = -5.0, 5.0
        assert foc(lo) * foc(hi) < 0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if foc(lo) * foc(mid) <= 0:
                hi = mid
            else:
                lo = mid
        assert fit.model.alpha[0] == pytest.approx(0.5 * (lo + hi), abs=1e-6)

    def test_moment_residual_recorded(self):
        X, d = logistic_sample(250, np.array([0.0, -1.0]), seed=15)
        fit = fit_cbd(X, d)
        hbar = moment_h(fit.model.alpha, X, d).mean(axis=0)
        np.testing.assert_allclose(fit.moment_residual, hbar, atol=1e-12)
        assert fit.moment_residual_norm == pytest.approx(np.max(np.abs(hbar)))
