import json
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from logcausal.effects import (
    Z975,
    EffectError,
    EffectEstimate,
    benchmark_covariate,
    cr2_vcov,
    direct_effect,
    hc3_vcov,
    impute_y10,
    indirect_by_summation,
    indirect_effect,
    matched_set_effects,
    ols_equivalence_check,
    read_table3,
    sensitivity_interval,
    weighted_effect,
    write_results_json,
    write_table3,
)


def fuzz_match(rng, n_sets=None):
    """Random matched sets with random compositions and outcomes."""
    n_sets = n_sets or int(rng.integers(2, 30))
    rows = []
    for m in range(n_sets):
        n1, n0 = rng.integers(1, 6, 2)
        shift = rng.normal()
        for h, k in ((1, n1), (0, n0)):
            for _ in range(k):
                rows.append((f"m{m}", h, shift + 0.3 * h + rng.normal()))
    df = pd.DataFrame(rows, columns=["m", "H", "Y"])
    df.index = [f"s{i:04d}" for i in range(len(df))]
    return df


def dummy_design(df):
    D = pd.get_dummies(df.m).to_numpy(float)
    return np.column_stack([df.H.to_numpy(float), D])


class TestSetEffects:
    def test_simple(self):
        se = matched_set_effects(pd.Series(["a", "a"]), [1.0, 0.0], [1, 0])
        assert se.tau["a"] == 1.0

    def test_equal_means(self):
        se = matched_set_effects(pd.Series(["a"] * 4), [1.0, 2.0, 2.0, 1.0], [1, 1, 0, 0])
        assert se.tau["a"] == 0.0

    def test_three_sets_by_hand(self):
        m = pd.Series(["a", "a", "a", "b", "b", "c", "c", "c"])
        Y = [3.0, 1.0, 2.0, 5.0, 4.0, 0.0, 1.0, 5.0]
        H = [1, 0, 0, 0, 1, 1, 1, 0]
        tau = matched_set_effects(m, Y, H).tau
        assert tau["a"] == pytest.approx(3 - 1.5)
        assert tau["b"] == pytest.approx(4 - 5)
        assert tau["c"] == pytest.approx(0.5 - 5)

    def test_missing_class_dropped(self):
        se = matched_set_effects(pd.Series(["a", "a", "b", "b"]), [1.0, 0.0, np.nan, 2.0], [1, 0, 1, 0])
        assert se.dropped == ["b"]
        assert list(se.tau.index) == ["a"]


class TestWeightedEffect:
    def test_hand_weights(self):
        m = pd.Series(["a", "a", "b", "b", "b", "b"])
        Y = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        H = [1, 0, 1, 1, 1, 0]
        se = matched_set_effects(m, Y, H)
        assert weighted_effect(se, "ATE").estimate == pytest.approx(1 / 3)
        assert weighted_effect(se, "TOT").estimate == pytest.approx(1 / 4)
        assert weighted_effect(se, "OLS").estimate == pytest.approx(0.4)

    def test_pairs_coincide(self):
        rng = np.random.default_rng(0)
        m = pd.Series(np.repeat([f"m{i}" for i in range(20)], 2))
        se = matched_set_effects(m, rng.normal(size=40), np.tile([1, 0], 20))
        est = [weighted_effect(se, s).estimate for s in ("ATE", "TOT", "OLS")]
        assert est[0] == est[1] == pytest.approx(est[2], abs=1e-15)

    def test_regression_form_reproduces_estimate(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            df = fuzz_match(rng)
            se = matched_set_effects(df.m, df.Y, df.H)
            for scheme in ("ATE", "TOT", "OLS"):
                e = weighted_effect(se, scheme)
                assert e.fit.coef == pytest.approx(e.estimate, abs=1e-12)

    def test_hc3_matches_full_design(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            df = fuzz_match(rng)
            se = matched_set_effects(df.m, df.Y, df.H)
            for scheme in ("ATE", "TOT", "OLS"):
                e = weighted_effect(se, scheme)
                f = e.fit
                A = dummy_design(df.loc[f.index])
                W = f.v
                beta = np.linalg.solve(A.T @ (W[:, None] * A), A.T @ (W * f.y))
                resid = f.y - A @ beta
                hat = W * np.einsum("ij,jk,ik->i", A, np.linalg.inv(A.T @ (W[:, None] * A)), A)
                V = hc3_vcov(A, resid, hat, W)
                assert e.std_error == pytest.approx(np.sqrt(V[0, 0]), rel=1e-10)

    def test_location_invariance(self):
        rng = np.random.default_rng(3)
        df = fuzz_match(rng)
        a = weighted_effect(matched_set_effects(df.m, df.Y, df.H), "ATE")
        b = weighted_effect(matched_set_effects(df.m, df.Y + 7.0, df.H), "ATE")
        assert a.estimate == pytest.approx(b.estimate, abs=1e-12)
        assert a.std_error == pytest.approx(b.std_error, rel=1e-9)

    def test_ci(self):
        df = fuzz_match(np.random.default_rng(4))
        e = weighted_effect(matched_set_effects(df.m, df.Y, df.H), "TOT")
        assert e.ci_95 == pytest.approx((e.estimate - Z975 * e.std_error, e.estimate + Z975 * e.std_error))

    def test_empty(self):
        se = matched_set_effects(pd.Series(["a"]), [1.0], [1])
        with pytest.raises(EffectError):
            weighted_effect(se, "ATE")


class TestHC3:
    def test_three_point_fixture(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 3.0]])
        y = np.array([1.0, 0.5, 4.0])
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        e = y - X @ beta
        h = np.diag(X @ np.linalg.inv(X.T @ X) @ X.T)
        # direct formula, written out elementwise
        B = np.linalg.inv(X.T @ X)
        meat = sum(np.outer(X[i], X[i]) * e[i] ** 2 / (1 - h[i]) ** 2 for i in range(3))
        expected = B @ meat @ B
        assert np.max(np.abs(hc3_vcov(X, e, h) - expected)) < 1e-12

    def test_homoskedastic_close_to_ols(self):
        rng = np.random.default_rng(5)
        n = 2000
        X = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(size=n)])
        y = X @ [1.0, 0.5, -0.2] + rng.normal(size=n)
        B = np.linalg.inv(X.T @ X)
        beta = B @ X.T @ y
        e = y - X @ beta
        h = np.einsum("ij,jk,ik->i", X, B, X)
        ols = np.sqrt(np.diag(B) * (e @ e) / (n - 3))
        hc3 = np.sqrt(np.diag(hc3_vcov(X, e, h)))
        assert np.all(np.abs(hc3 / ols - 1) < 0.1)

    def test_hc3_not_below_hc0(self):
        X = np.column_stack([np.ones(8), np.tile([0.0, 1.0], 4)])
        y = np.array([1.0, 2, 0, 3, 1, 1, 2, 5])
        B = np.linalg.inv(X.T @ X)
        e = y - X @ (B @ X.T @ y)
        h = np.einsum("ij,jk,ik->i", X, B, X)
        hc0 = B @ X.T @ np.diag(e ** 2) @ X @ B
        assert np.all(np.diag(hc3_vcov(X, e, h)) >= np.diag(hc0))

    def test_saturated(self):
        with pytest.raises(EffectError):
            hc3_vcov(np.eye(2), [0.0, 0.0], [1.0, 1.0])


class TestOLSEquivalence:
    def test_fuzz(self):
        rng = np.random.default_rng(6)
        worst = max(ols_equivalence_check(df.Y, df.H, df.m) for df in (fuzz_match(rng) for _ in range(100)))
        assert worst < 1e-10

    def test_single_set(self):
        df = fuzz_match(np.random.default_rng(7), n_sets=1)
        tau = matched_set_effects(df.m, df.Y, df.H).tau.iloc[0]
        assert ols_equivalence_check(df.Y, df.H, df.m) < 1e-12
        assert weighted_effect(matched_set_effects(df.m, df.Y, df.H), "OLS").estimate == pytest.approx(tau)

    def test_singleton_class_sets_excluded(self):
        df = fuzz_match(np.random.default_rng(8))
        extra = pd.DataFrame({"m": ["lonely"] * 2, "H": [1, 1], "Y": [5.0, 9.0]}, index=["x1", "x2"])
        assert ols_equivalence_check(pd.concat([df, extra]).Y, pd.concat([df, extra]).H,
                                     pd.concat([df, extra]).m) < 1e-10


def estimate(est=-0.18, se=0.04, df=500):
    return EffectEstimate("OLS", est, se, (est - Z975 * se, est + Z975 * se), df)


class TestSensitivity:
    def test_zero_zero_is_ci(self):
        e = estimate()
        lo, hi = sensitivity_interval(e, 0.0, 0.0)
        assert abs(lo - e.ci_95[0]) < 1e-12 and abs(hi - e.ci_95[1]) < 1e-12

    def test_zero_t_is_ci(self):
        e = estimate()
        for r in (0.1, 0.5, 0.9):
            assert sensitivity_interval(e, r, 0.0) == pytest.approx(e.ci_95, abs=1e-12)

    def test_monotone_grid(self):
        e = estimate()
        grid_r = np.linspace(0, 0.9, 10)
        grid_t = np.linspace(0, 10, 10)
        W = np.array([[np.diff(sensitivity_interval(e, r, t))[0] for t in grid_t] for r in grid_r])
        assert np.all(np.diff(W, axis=0) >= -1e-12)
        assert np.all(np.diff(W, axis=1) >= -1e-12)

    def test_matches_bruteforce_union(self):
        e = estimate(df=200)
        R, T = 0.15, 3.0
        rho = np.linspace(-np.sqrt(R), np.sqrt(R), 2001)
        t = np.linspace(-T, T, 601)
        rr, tt = np.meshgrid(rho, t)
        shift = e.std_error * tt * rr
        se = e.std_error * np.sqrt(1 - rr ** 2) * np.sqrt(1 + tt ** 2 / e.df)
        lo = np.min(e.estimate - shift - Z975 * se)
        hi = np.max(e.estimate - shift + Z975 * se)
        got = sensitivity_interval(e, R, T)
        assert got == pytest.approx((lo, hi), abs=1e-5)

    def test_errors(self):
        with pytest.raises(EffectError):
            sensitivity_interval(estimate(), 1.0, 1.0)
        with pytest.raises(EffectError):
            sensitivity_interval(estimate(), 0.1, np.inf)


def benchmark_data(rng, n_sets=300):
    rows = []
    for m in range(n_sets):
        k = 4
        x1 = rng.normal(size=k)
        h = (x1 + rng.normal(size=k) > 0).astype(int)
        h[0], h[1] = 1, 0
        rows.append(pd.DataFrame({"m": f"m{m}", "H": h, "x1": x1, "x2": rng.normal(size=k),
                                  "noise": rng.normal(size=k)}))
    df = pd.concat(rows, ignore_index=True)
    df.index = [f"s{i:05d}" for i in range(len(df))]
    df["Y"] = 0.2 * df.H + 1.0 * df.x1 + 0.3 * df.x2 + rng.normal(size=len(df))
    return df


@pytest.fixture(scope="module")
def fit():
    df = benchmark_data(np.random.default_rng(9))
    se = matched_set_effects(df.m, df.Y, df.H)
    return weighted_effect(se, "OLS", X=df[["x1", "x2", "noise"]]), df


class TestBenchmark:
    def test_independent_covariate(self, fit):
        e, _ = fit
        r, t = benchmark_covariate(e, "noise")
        assert r < 0.01 and abs(t) < 3

    def test_driver_partial_r2(self, fit):
        e, df = fit
        r, _ = benchmark_covariate(e, "x1")
        # planted: coefficient 1 on x1 and unit noise, so the partial R^2 is
        # s2 / (s2 + 1) with s2 the residual variance of x1 given H, x2, noise, sets
        D = pd.get_dummies(df.m).to_numpy(float)
        A = np.column_stack([df.H, df.x2, df.noise, D])
        res = df.x1 - A @ np.linalg.lstsq(A, df.x1, rcond=None)[0]
        s2 = np.sum(res ** 2) / (len(df) - A.shape[1])
        assert r == pytest.approx(s2 / (s2 + 1), abs=0.03)

    def test_ranking(self, fit):
        e, _ = fit
        r1, t1 = benchmark_covariate(e, "x1")
        r2, t2 = benchmark_covariate(e, "x2")
        assert r1 > r2 and abs(t1) > abs(t2)

    def test_group_composite(self, fit):
        e, _ = fit
        r_single, _ = benchmark_covariate(e, "x2")
        r_group, _ = benchmark_covariate(e, ["x2", "noise"])
        assert r_group >= r_single - 1e-12

    def test_errors(self, fit):
        e, df = fit
        with pytest.raises(EffectError):
            benchmark_covariate(e, "absent")
        with pytest.raises(EffectError):
            bad = weighted_effect(matched_set_effects(df.m, df.Y, df.H), "OLS",
                                  X=df[["x1", "x2"]].assign(x3=df.x1 * 2))
            benchmark_covariate(bad, "x3")


class TestImputeAndIndirect:
    def test_impute(self):
        m = pd.Series(["a", "a", "a", "a", "b", "b"], index=list("pqrstu"))
        Y = [0.7, 0.0, 1.0, 9.0, 3.0, 4.0]
        H = [0, 0, 1, 1, 1, 0]
        out = impute_y10(m, Y, H)
        assert out.loc["p", "y10"] == 0.7 and out.loc["p", "source"] == "observed"
        assert out.loc["r", "y10"] == pytest.approx((0.7 + 0.0) / 2)
        assert out.loc["r", "y10"] == out.loc["s", "y10"]
        assert (out.source == "observed").tolist() == [h == 0 for h in H]

    def test_orphan(self):
        with pytest.raises(EffectError):
            impute_y10(pd.Series(["a", "a"]), [1.0, np.nan], [1, 0])

    def test_paper_arithmetic(self):
        tot = EffectEstimate("TOT", -0.14, 0.06, (0, 0))
        ind = indirect_effect(tot, 0.3)
        assert ind.estimate == pytest.approx(-0.042, abs=1e-15)
        assert ind.std_error == pytest.approx(0.018, abs=1e-15)
        assert round(ind.estimate, 2) == -0.04 and round(ind.std_error, 2) == 0.02

    def test_zero(self):
        assert indirect_effect(EffectEstimate("TOT", 0.0, 0.1, (0, 0)), 0.4).estimate == 0.0

    def test_summation_chain(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            df = fuzz_match(rng)
            se = matched_set_effects(df.m, df.Y, df.H)
            tot = weighted_effect(se, "TOT")
            pr = df.H.sum() / len(df)
            chain = indirect_by_summation(se)
            y10 = impute_y10(df.m, df.Y, df.H).y10
            direct_sum = np.mean(df.Y - y10)
            assert abs(indirect_effect(tot, pr).estimate - chain) < 1e-12
            assert abs(direct_sum - chain) < 1e-12

    def test_bad_pr(self):
        with pytest.raises(EffectError):
            indirect_effect(estimate(), 1.5)


def clustered_trial(rng, n_pairs=10, schools_per_arm=2, per_school=15, delta=0.3):
    rows = []
    for p in range(n_pairs):
        a_p = rng.normal()
        for z in (0, 1):
            for k in range(schools_per_arm):
                u = rng.normal(scale=0.5)
                x = rng.normal(size=per_school)
                y = a_p + u + delta * z + 0.5 * x + rng.normal(size=per_school)
                rows.append(pd.DataFrame({"pair": p, "school": f"p{p}z{z}k{k}", "Z": z, "x": x, "y": y}))
    return pd.concat(rows, ignore_index=True)


class TestDirect:
    def test_coverage(self):
        rng = np.random.default_rng(11)
        hits = 0
        for _ in range(50):
            d = clustered_trial(rng)
            e = direct_effect(d.y, d.Z, d.pair, d.school)
            hits += abs(e.estimate - 0.3) < 2 * e.std_error
        assert hits >= 45

    def test_adjusted(self):
        d = clustered_trial(np.random.default_rng(12))
        a = direct_effect(d.y, d.Z, d.pair, d.school)
        b = direct_effect(d.y, d.Z, d.pair, d.school, X=d[["x"]])
        assert b.scheme == "DIRECT_ADJ" and b.std_error < a.std_error
        q = stats.t.ppf(0.975, b.df)
        assert b.ci_95 == pytest.approx((b.estimate - q * b.std_error, b.estimate + q * b.std_error))

    def test_singleton_clusters_give_hc2(self):
        d = clustered_trial(np.random.default_rng(13), n_pairs=4, schools_per_arm=1, per_school=6)
        e = direct_effect(d.y, d.Z, d.pair, np.arange(len(d)))
        D = pd.get_dummies(d.pair).to_numpy(float)
        X = np.column_stack([d.Z.to_numpy(float), D])
        B = np.linalg.inv(X.T @ X)
        res = d.y.to_numpy() - X @ B @ X.T @ d.y.to_numpy()
        h = np.einsum("ij,jk,ik->i", X, B, X)
        hc2 = B @ X.T @ np.diag(res ** 2 / (1 - h)) @ X @ B
        assert abs(e.std_error - np.sqrt(hc2[0, 0])) < 1e-8

    def test_satterthwaite_df_homoskedastic_independent(self):
        # with singleton clusters and a balanced design the Bell-McCaffrey df is large
        d = clustered_trial(np.random.default_rng(14), n_pairs=20, schools_per_arm=1, per_school=10)
        _, df = cr2_vcov(np.column_stack([np.ones(len(d)), d.Z]), np.ones(len(d)), np.arange(len(d)), [0, 1])
        assert df > 100

    def test_missing_arm(self):
        d = clustered_trial(np.random.default_rng(15), n_pairs=3)
        d = d[~((d.pair == 0) & (d.Z == 1))]
        with pytest.raises(EffectError):
            direct_effect(d.y, d.Z, d.pair, d.school)


class TestOutputs:
    def test_table3_roundtrip(self, tmp_path):
        e = estimate()
        e.sensitivity["pretest"] = sensitivity_interval(e, 0.3, 4.0)
        write_table3(tmp_path / "t.csv", [e], ["pretest"])
        back = read_table3(tmp_path / "t.csv")
        assert list(back.columns[:5]) == ["Weights", "Estimate", "Std. Error", "CI_lo", "CI_hi"]
        assert back["SI[pretest]_lo"].iloc[0] == e.sensitivity["pretest"][0]
        assert back["Estimate"].iloc[0] == e.estimate

    def test_json(self, tmp_path):
        write_results_json(tmp_path / "r.json", [estimate()], {"pr_h1": 0.3})
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["estimates"][0]["scheme"] == "OLS" and data["pr_h1"] == 0.3
