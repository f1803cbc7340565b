import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from logcausal.propensity import (
    NaturalSpline,
    SeparationWarning,
    fit_mlogit,
    laplace_objective,
    natural_spline_basis,
    predict_logit,
    propensity_design,
)


def irls_logistic(X, y, iters=50):
    A = np.column_stack([np.ones(len(y)), X])
    b = np.zeros(A.shape[1])
    for _ in range(iters):
        mu = expit(A @ b)
        W = mu * (1 - mu)
        b = b + np.linalg.solve(A.T @ (W[:, None] * A), A.T @ (y - mu))
    return b


def truncated_power_natural(x, knots):
    """Basis of the natural cubic spline space, built from scratch.

    Cubic truncated-power functions with the four natural-boundary
    constraints imposed via a null-space projection.
    """
    k = np.asarray(knots)
    T = np.column_stack([np.ones_like(x), x, x ** 2, x ** 3] + [np.maximum(x - kk, 0) ** 3 for kk in k])
    # coefficients (a0, a1, a2, a3, t_1..t_K); linear left of k_1 needs
    # a2 = a3 = 0, linear right of k_K needs sum t = 0 and sum t k = 0
    C = np.zeros((4, 4 + k.size))
    C[0, 2] = 1
    C[1, 3] = 1
    C[2, 4:] = 1
    C[3, 4:] = k
    _, s, vt = np.linalg.svd(C)
    null = vt[4:].T
    return T @ null


class TestNaturalSpline:
    @pytest.fixture
    def x(self):
        return np.random.default_rng(0).normal(size=300)

    def test_shape_and_knots(self, x):
        B, sp = natural_spline_basis(x, df=5, return_spline=True)
        assert B.shape == (300, 5)
        assert sp.knots[0] == x.min() and sp.knots[-1] == x.max()
        np.testing.assert_allclose(sp.knots[1:-1], np.quantile(x, [0.2, 0.4, 0.6, 0.8]))

    def test_matches_truncated_power_space(self, x):
        B, sp = natural_spline_basis(x, df=5, return_spline=True)
        k = np.array(sp.knots)
        grid = np.r_[k, np.linspace(k[0], k[-1], 17)]
        mine = np.column_stack([np.ones_like(grid), sp(grid)])
        oracle = truncated_power_natural(grid, k)
        assert oracle.shape[1] == mine.shape[1] == 6
        # same column space: projecting one onto the other leaves nothing
        coef, *_ = np.linalg.lstsq(oracle, mine, rcond=None)
        assert np.max(np.abs(oracle @ coef - mine)) < 1e-8
        coef, *_ = np.linalg.lstsq(mine, oracle, rcond=None)
        assert np.max(np.abs(mine @ coef - oracle)) < 1e-8

    def test_linear_beyond_boundaries(self, x):
        _, sp = natural_spline_basis(x, df=5, return_spline=True)
        lo, hi = sp.knots[0], sp.knots[-1]
        h = 0.1
        for base in (lo - 3, hi + 3):
            pts = np.array([base - h, base, base + h])
            B = sp(pts)
            second = (B[0] - 2 * B[1] + B[2]) / h ** 2
            assert np.max(np.abs(second)) < 1e-6

    def test_df_one_is_linear(self, x):
        B = natural_spline_basis(x, df=1)
        assert B.shape == (300, 1)
        np.testing.assert_allclose(B[:, 0], x)

    def test_too_few_distinct(self):
        with pytest.raises(ValueError):
            natural_spline_basis(np.array([1.0, 2, 3, 1, 2, 3]), df=5)


def clustered(n_schools=200, per=20, school_sd=1.0, seed=0, beta=(0.5, -0.3, 0.2), a=-0.5):
    rng = np.random.default_rng(seed)
    n = n_schools * per
    school = np.repeat(np.arange(n_schools), per)
    state = school % 5
    klass = np.repeat(np.arange(2 * n_schools), per // 2)
    X = rng.normal(size=(n, len(beta)))
    eta = a + X @ np.asarray(beta) + rng.normal(0, school_sd, n_schools)[school] if school_sd else a + X @ np.asarray(beta)
    H = (rng.uniform(size=n) < expit(eta)).astype(int)
    return X, H, {"state": state, "school": school, "class": klass}


@pytest.fixture(scope="module")
def school_fit():
    X, H, g = clustered(seed=1)
    return fit_mlogit(X, H, g), (X, H, g)


class TestFitMlogit:
    def test_zero_variance_matches_logistic(self):
        X, H, g = clustered(n_schools=100, school_sd=0.0, seed=2)
        fit = fit_mlogit(X, H, g)
        oracle = irls_logistic(X, H)
        if max(fit.sd.values()) == 0:
            assert np.max(np.abs(fit.coef.to_numpy() - oracle)) < 1e-4
        else:
            pytest.fail(f"nonzero variance estimated: {fit.sd}")

    def test_school_variance_recovered(self, school_fit):
        fit, _ = school_fit
        assert abs(fit.variances["school"] - 1.0) < 0.3

    def test_deviance_monotone(self, school_fit):
        fit, _ = school_fit
        tr = np.array(fit.deviance_trace)
        assert len(tr) >= 2
        assert np.all(np.diff(tr) <= 1e-9 * np.abs(tr[:-1]))

    def test_gradient_at_optimum(self, school_fit):
        fit, (X, H, g) = school_fit
        s = np.array([fit.sd[k] for k in g])
        h = 1e-4
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            grad = (laplace_objective((X, H, g), s + e) - laplace_objective((X, H, g), np.abs(s - e))) / (2 * h)
            if s[j] > 0:
                assert abs(grad) < 1e-6
            else:
                assert grad > -1e-6  # boundary: no descent into the interior

    def test_constant_h(self):
        X, H, g = clustered(n_schools=10, seed=3)
        with pytest.raises(ValueError, match="constant"):
            fit_mlogit(X, np.ones_like(H), g)

    def test_separation_ridge(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=200)
        H = (x > 0).astype(int)
        school = np.arange(200) % 10
        with pytest.warns(SeparationWarning):
            fit = fit_mlogit(x[:, None], H, {"school": school})
        assert fit.ridge > 0
        assert np.all(np.isfinite(fit.logit))

    def test_affine_invariance(self):
        X, H, g = clustered(n_schools=40, seed=5)
        a = fit_mlogit(X, H, g)
        b = fit_mlogit(X * np.array([10.0, -0.5, 3.0]) + np.array([100.0, 2.0, -7.0]), H, g)
        assert np.max(np.abs(a.logit.to_numpy() - b.logit.to_numpy())) < 1e-6

    def test_logits_strictly_inside(self, school_fit):
        fit, _ = school_fit
        assert np.all(np.isfinite(fit.logit))
        p = expit(fit.logit)
        assert np.all((p > 0) & (p < 1))

    def test_csv(self, school_fit, tmp_path):
        fit, _ = school_fit
        fit.to_csv(tmp_path / "s.csv")
        back = pd.read_csv(tmp_path / "s.csv", float_precision="round_trip")
        assert list(back.columns) == ["student_id", "logit_pi"]
        np.testing.assert_array_equal(back["logit_pi"].to_numpy(), fit.logit.to_numpy())


class TestPredict:
    def test_zero_coefficients(self, school_fit):
        fit, (X, H, g) = school_fit
        z = fit.__class__(**{**fit.__dict__, "coef": fit.coef * 0,
                             "random_effects": {k: v * 0 for k, v in fit.random_effects.items()}})
        eta, unseen = predict_logit(z, X[:3], {k: v[:3] for k, v in g.items()})
        assert np.all(eta == 0) and not unseen.any()

    def test_intercept_only(self):
        H = np.r_[np.ones(30), np.zeros(70)].astype(int)
        fit = fit_mlogit(np.zeros((100, 0)), H, {})
        eta, _ = predict_logit(fit, np.zeros((1, 0)))
        assert eta[0] == pytest.approx(np.log(0.3 / 0.7), abs=1e-8)
        assert eta[0] == pytest.approx(-0.847, abs=1e-3)

    def test_unseen_school(self, school_fit):
        fit, (X, H, g) = school_fit
        groups = {"state": [0], "school": ["new"], "class": [0]}
        eta, unseen = predict_logit(fit, X[:1], groups)
        assert unseen[0]
        expected = fit.coef.iloc[0] + X[0] @ fit.coef.iloc[1:].to_numpy()
        expected += fit.random_effects["state"].loc[0] + fit.random_effects["class"].loc[0]
        assert eta[0] == pytest.approx(expected)

    def test_matches_fitted(self, school_fit):
        fit, (X, H, g) = school_fit
        eta, unseen = predict_logit(fit, X, g)
        np.testing.assert_allclose(eta, fit.logit.to_numpy(), atol=1e-8)
        assert not unseen.any()


def test_propensity_design():
    rng = np.random.default_rng(6)
    df = pd.DataFrame({"grade": rng.choice(["9", "10"], 50), "sex": rng.choice(["f", "m"], 50),
                       "pretest": rng.normal(size=50), "miss_grade": 0, "miss_race": 0, "miss_sex": 1})
    X, names, sp = propensity_design(df, ["grade", "sex"])
    assert isinstance(sp, NaturalSpline)
    assert X.shape == (50, 2 + 3 + 5)
    assert names[-1] == "ns(pretest)5"
