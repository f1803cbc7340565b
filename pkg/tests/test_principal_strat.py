import numpy as np
import pandas as pd
import pytest
from scipy import stats
from scipy.special import expit

from logcausal.principal_strat import (
    PSData,
    PSDataError,
    PSFit,
    PSTarget,
    binned_residual_table,
    binned_residuals,
    fake_data_duplicate,
    fit_ps,
    parse_effect,
    ppc_density,
    principal_effect_curve,
    ps_log_density,
    residual_table,
    simulate_ps_data,
)
from logcausal.sampler import PosteriorDraws, SamplerConfig, _flatten_constrained


@pytest.fixture(scope="module")
def small():
    return simulate_ps_data(n_schools=6, students_per_school=8, n_sections=5, sections_per_student=3, seed=3)


def point_fit(data, thetas, chains=2):
    """PSFit whose draws are the given unconstrained points (stacked)."""
    tgt = PSTarget(data)
    thetas = np.atleast_2d(thetas)
    flat, cols, shapes = _flatten_constrained(tgt.transform(thetas), thetas.shape[0])
    samples = flat.reshape(chains, thetas.shape[0] // chains, -1)
    return PSFit(PosteriorDraws(samples, cols, shapes), data, True)


def fd_check(tgt, theta, h=1e-5):
    _, g = tgt(theta[None])
    fd = np.empty(tgt.dim)
    for i in range(tgt.dim):
        e = np.zeros(tgt.dim)
        e[i] = h
        fd[i] = (tgt((theta + e)[None])[0][0] - tgt((theta - e)[None])[0][0]) / (2 * h)
    return np.max(np.abs(fd - g[0]) / np.maximum(1.0, np.abs(fd)))


class TestDensity:
    def test_gradient_matches_finite_differences(self, small):
        data, _ = small
        tgt = PSTarget(data)
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert fd_check(tgt, rng.normal(0, 0.7, tgt.dim)) < 1e-5

    def test_kernel_matches_reference(self, small):
        tgt = PSTarget(small[0])
        th = np.random.default_rng(13).normal(0, 0.8, (5, tgt.dim))
        (lp, g), (lp2, g2) = tgt(th), tgt.reference(th)
        assert np.allclose(lp, lp2, rtol=1e-12)
        assert np.allclose(g, g2, rtol=1e-10, atol=1e-10)
        comp = tgt.components(th)
        assert np.allclose(sum(comp.values()), lp, rtol=1e-12)

    def test_non_finite_is_minus_inf(self, small):
        tgt = PSTarget(small[0])
        th = np.zeros((1, tgt.dim))
        th[0, tgt.slices["log_scales"]] = -800.0
        assert tgt(th)[0][0] == -np.inf
        with pytest.raises(FloatingPointError):
            ps_log_density(th[0], tgt)

    def test_batched_rows_independent(self, small):
        tgt = PSTarget(small[0])
        th = np.random.default_rng(1).normal(size=(3, tgt.dim))
        lp, g = tgt(th)
        for r in range(3):
            lp1, g1 = ps_log_density(th[r], tgt)
            assert lp1 == pytest.approx(lp[r], rel=1e-12)
            assert np.allclose(g1, g[r])

    def test_student_without_hints(self, small):
        data, _ = small
        first_t = int(np.flatnonzero(data.Z == 1)[0])
        keep = data.h_student != first_t
        d2 = PSData(**{**data.__dict__, "h_student": data.h_student[keep], "h_section": data.h_section[keep],
                       "hint": data.hint[keep]})
        tgt = PSTarget(d2)
        th = np.random.default_rng(2).normal(0, 0.5, tgt.dim)
        assert np.isfinite(tgt(th[None])[0][0])
        assert fd_check(tgt, th) < 1e-5

    def test_against_direct_density(self):
        # two students, one per arm, one teacher/school each, a single pair
        data = PSData(["a", "b"], np.array([1, 0]), np.array([0.4, -0.3]), np.array([[1.0], [-1.0]]), ["x"],
                      np.array([0, 1]), np.array([0, 1]), np.array([0, 0]), np.array([0, 0, 0]),
                      np.array([0, 0, 0]), np.array([1.0, 0.0, 1.0]), ["s"], ["t0", "t1"], ["c0", "c1"], ["p"])
        tgt = PSTarget(data)
        rng = np.random.default_rng(3)

        def direct(v):
            eta, muU = v["eta"], v["muU"]
            lp = np.sum(stats.bernoulli.logpmf([1, 0, 1], expit(v["delta"][0] + eta[0])))
            lp += np.sum(stats.norm.logpdf(eta, muU, v["sigU"]))
            mu = v["muY"]
            lp += stats.norm.logpdf(0.4, mu[0], v["sigY1"]) + stats.norm.logpdf(-0.3, mu[1], v["sigY0"])
            lp += stats.norm.logpdf(v["betaU"], 0, 2).sum() + stats.norm.logpdf(v["betaY"], 0, 2).sum()
            lp += stats.norm.logpdf(v["pairEffect"], 0, 2).sum() + stats.norm.logpdf(v["delta"], 0, 5).sum()
            lp += sum(stats.norm.logpdf(v[k], 0, 1) for k in ("a1", "b0", "b1"))
            for eff, s in (("teacherEffU", "sigTchU"), ("schoolEffU", "sigSclU"), ("teacherEffY", "sigTchY"),
                           ("schoolEffY", "sigSclY")):
                lp += stats.norm.logpdf(v[eff], 0, v[s]).sum()
            for s in ("sigTchU", "sigSclU", "sigU", "sigTchY", "sigSclY", "sigY0", "sigY1"):
                lp += stats.halfnorm.logpdf(v[s], scale=5) + np.log(v[s])
            # change of variables for the non-centred blocks
            lp += np.log(v["sigU"]) + 2 * np.log(v["sigTchU"]) + 2 * np.log(v["sigSclU"])
            lp += 2 * np.log(v["sigTchY"]) + 2 * np.log(v["sigSclY"])
            return lp

        pts = rng.normal(0, 0.6, (4, tgt.dim))
        ours = tgt(pts)[0]
        ref = []
        for p in pts:
            u = tgt.unpack(p[None])
            ref.append(direct({k: (np.asarray(x)[0] if np.ndim(x) else x) for k, x in u.items()}))
        ref = np.array(ref)
        assert np.allclose(ours - ours[0], ref - ref[0], atol=1e-6)

    def test_single_student_grid(self):
        # conditional density of one treated eta on a grid, normalized by quadrature
        data = PSData(["a", "b"], np.array([1, 0]), np.array([0.4, -0.3]), np.zeros((2, 1)), ["x"],
                      np.array([0, 0]), np.array([0, 0]), np.array([0, 0]), np.array([0, 0, 0, 0]),
                      np.array([0, 0, 0, 0]), np.array([1.0, 0.0, 1.0, 1.0]), ["s"], ["t"], ["c"], ["p"])
        tgt = PSTarget(data)
        th = tgt.pack(a1=0.3, b0=0.1, b1=-0.2, sigU=0.9, sigY=(0.5, 0.6))
        grid = np.linspace(-6, 8, 2801)
        pts = np.tile(th, (grid.size, 1))
        pts[:, tgt.slices["etaT"]] = grid[:, None]
        ours = tgt(pts)[0]
        direct = (stats.bernoulli.logpmf(1, expit(grid)) * 3 + stats.bernoulli.logpmf(0, expit(grid))
                  + stats.norm.logpdf(grid, 0, 0.9) + stats.norm.logpdf(0.4, 0.1 + 0.1 * grid, 0.6))
        d1 = np.exp(ours - ours.max())
        d2 = np.exp(direct - direct.max())
        d1 /= np.trapezoid(d1, grid)
        d2 /= np.trapezoid(d2, grid)
        assert np.max(np.abs(d1 - d2)) < 1e-6
        assert np.allclose(ours - ours[0], direct - direct[0], atol=1e-9)

    def test_outcome_location_identity(self, small):
        data, _ = small
        tgt = PSTarget(data)
        th = np.random.default_rng(14).normal(0, 0.5, tgt.dim)
        shifted = PSTarget(PSData(**{**data.__dict__, "Y": data.Y + 1.3}))
        th2 = th.copy()
        th2[tgt.slices["pair"]] += 1.3
        a, b = tgt.components(th[None]), shifted.components(th2[None])
        for part in ("hint", "eta", "outcome"):
            assert a[part][0] == pytest.approx(b[part][0], abs=1e-9)

    def test_section_relabel_invariance(self, small):
        data, _ = small
        perm = np.random.default_rng(4).permutation(len(data.section_ids))
        inv = np.argsort(perm)
        d2 = PSData(**{**data.__dict__, "h_section": perm[data.h_section],
                       "section_ids": [data.section_ids[j] for j in inv]})
        t1, t2 = PSTarget(data), PSTarget(d2)
        th = np.random.default_rng(5).normal(0, 0.5, t1.dim)
        th2 = th.copy()
        th2[t2.slices["delta"]] = th[t1.slices["delta"]][inv]
        assert t1(th[None])[0][0] == pytest.approx(t2(th2[None])[0][0], rel=1e-12)

    def test_likelihood_location_invariance(self, small):
        data, _ = small
        tgt = PSTarget(data)
        rng = np.random.default_rng(6)
        u = tgt.unpack(rng.normal(0, 0.5, tgt.dim)[None])
        v = {k: (x[0] if np.ndim(x) > 0 else x) for k, x in u.items()}
        v["sigY"] = (v["sigY0"], v["sigY1"])
        c = 0.7
        base = tgt.pack(**v)
        shifted = dict(v, eta=v["eta"] + c, delta=v["delta"] - c, schoolEffU=v["schoolEffU"] + c,
                       pairEffect=v["pairEffect"] - v["a1"] * c, b0=v["b0"] - v["b1"] * c)
        moved = tgt.pack(**shifted)
        a, b = tgt.components(base[None]), tgt.components(moved[None])
        for part in ("hint", "eta", "outcome"):
            assert a[part][0] == pytest.approx(b[part][0], abs=1e-9)
        assert a["prior"][0] != pytest.approx(b["prior"][0])

    def test_pack_round_trip(self, small):
        tgt = PSTarget(small[0])
        th = np.random.default_rng(7).normal(size=tgt.dim)
        u = tgt.transform(th[None])
        v = {k: x[0] for k, x in u.items()}
        assert np.allclose(tgt.pack(**v), th)


class TestData:
    def test_build_from_frames(self):
        students = pd.DataFrame({"student_id": ["a", "b", "c", "d"], "z": [1, 1, 0, 0], "y": [1.0, np.nan, 0.5, 0.2],
                                 "teacher_id": ["t1", "t1", "t2", "t2"], "school_id": ["A", "A", "B", "B"],
                                 "block_id": ["p", "p", "p", "p"]})
        cov = pd.DataFrame({"pretest": [0.1, 0.5, -0.2, 0.9], "male": [1, 0, 0, 1]})
        hints = pd.DataFrame({"student_id": ["a", "a", "b"], "section_id": ["s1", "s2", "s1"],
                              "hint_requested": [1, 0, 1]})
        d = PSData.build(students, cov, hints)
        assert d.student_ids == ["a", "c", "d"]
        assert d.x_names == ["pretest", "male", "pretest^2"]
        assert np.allclose(d.X.mean(axis=0), 0) and np.allclose(d.X.std(axis=0), 1)
        assert len(d.hint) == 2

    def test_hints_for_control_rejected(self, small):
        data, _ = small
        c = int(np.flatnonzero(data.Z == 0)[0])
        with pytest.raises(PSDataError):
            PSData(**{**data.__dict__, "h_student": np.r_[data.h_student, c], "h_section": np.r_[data.h_section, 0],
                      "hint": np.r_[data.hint, 1.0]})

    def test_bad_index(self, small):
        data, _ = small
        with pytest.raises(IndexError):
            PSData(**{**data.__dict__, "h_section": data.h_section + 100})


@pytest.fixture(scope="module")
def truth_fit(small):
    """Draws concentrated at the data-generating values (zero outcome noise)."""
    data, true = small
    tgt = PSTarget(data)
    vals = {k: true[k] for k in ("eta", "delta", "betaU", "betaY", "a1", "b0", "b1", "teacherEffU", "schoolEffU",
                                 "teacherEffY", "schoolEffY", "pairEffect", "sigTchU", "sigSclU", "sigU",
                                 "sigTchY", "sigSclY", "sigY")}
    th = tgt.pack(**vals)
    mu = tgt.unpack(th[None])["muY"][0]
    clean = PSData(**{**data.__dict__, "Y": mu})
    rng = np.random.default_rng(8)
    pts = th + np.zeros((200, tgt.dim))
    b = tgt.slices["b1"]
    pts[:, b] += rng.normal(0, 0.05, (200, 1))
    return point_fit(clean, pts), th


class TestSummaries:
    def test_curve_identities(self, truth_fit):
        fit, _ = truth_fit
        grid = np.linspace(-2, 2, 9)
        c = principal_effect_curve(fit, grid)
        b0, b1 = fit.flat("b0"), fit.flat("b1")
        assert np.allclose(c.draws, b0[:, None] + b1[:, None] * grid)
        assert c.p_b1_positive == pytest.approx(np.mean(b1 > 0))
        assert c.b1_hdi[0] <= np.median(b1) <= c.b1_hdi[1]
        assert len(principal_effect_curve(fit).grid) == 41

    def test_invalid_fit_suppressed(self, truth_fit):
        fit, _ = truth_fit
        bad = PSFit(fit.draws, fit.data, False, ["R-hat above 1.01 for b1"])
        with pytest.raises(ValueError, match="diagnostics"):
            principal_effect_curve(bad)
        assert "parameters" not in bad.summary()

    def test_residuals_zero_without_noise(self, truth_fit):
        fit, th = truth_fit
        # b1 jitter enters only through Z * eta; use a fit with no jitter at all
        exact = point_fit(fit.data, np.tile(th, (4, 1)))
        r = residual_table(exact)
        assert np.allclose(r.residual, 0, atol=1e-10)
        assert len(residual_table(exact, "control")) == int(np.sum(fit.data.Z == 0))

    def test_ppc_pooled_is_mixture_of_arms(self, truth_fit):
        fit, _ = truth_fit
        p = ppc_density(fit, "pooled", n_rep=20, seed=1)
        t = ppc_density(fit, "treatment", n_rep=20, seed=1, grid=p.grid)
        c = ppc_density(fit, "control", n_rep=20, seed=1, grid=p.grid)
        w = np.mean(fit.data.Z == 1)
        assert np.allclose(p.observed, w * t.observed + (1 - w) * c.observed)
        assert np.allclose(p.replicates, w * t.replicates + (1 - w) * c.replicates)
        lo, hi = p.envelope
        assert np.all(lo <= hi)
        with pytest.raises(ValueError):
            ppc_density(fit, "everyone")

    def test_ppc_flags_truncation(self):
        data, true = simulate_ps_data(n_schools=10, students_per_school=40, seed=9)
        cut, _ = simulate_ps_data(n_schools=10, students_per_school=40, seed=9, outcome_floor=-0.3)
        tgt = PSTarget(data)
        keys = ("eta", "delta", "betaU", "betaY", "a1", "b0", "b1", "teacherEffU", "schoolEffU", "teacherEffY",
                "schoolEffY", "pairEffect", "sigTchU", "sigSclU", "sigU", "sigTchY", "sigSclY", "sigY")
        th = np.tile(tgt.pack(**{k: true[k] for k in keys}), (100, 1))
        good = ppc_density(point_fit(data, th), n_rep=100, seed=2)
        # same parameters restricted to the surviving students
        keep = np.isin(data.student_ids, cut.student_ids)
        t2 = PSTarget(cut)
        th2 = np.tile(t2.pack(**{**{k: true[k] for k in keys}, "eta": true["eta"][keep]}), (100, 1))
        bad = ppc_density(point_fit(cut, th2), n_rep=100, seed=2, grid=good.grid, bandwidth=good.bandwidth)
        assert good.coverage() > 0.9
        assert bad.coverage() < good.coverage() - 0.1


class TestBinnedResiduals:
    def test_calibrated_predictions(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(0.05, 0.95, 20000)
        y = rng.uniform(size=p.size) < p
        t = binned_residual_table(p, y, 20)
        assert t.n.sum() == p.size
        assert np.mean(np.abs(t.residual) < 2 * t.se) > 0.85

    def test_shifted_offset_sign(self):
        rng = np.random.default_rng(11)
        lin = rng.normal(size=20000)
        y = rng.uniform(size=lin.size) < expit(lin)
        t = binned_residual_table(expit(lin - 0.5), y, 20)
        assert (t.residual > 0).mean() > 0.9

    def test_single_bin(self):
        rng = np.random.default_rng(12)
        p = rng.uniform(size=300)
        y = (rng.uniform(size=300) < 0.5).astype(float)
        t = binned_residual_table(p, y, 1)
        assert t.residual.iloc[0] == pytest.approx(y.mean() - p.mean())

    def test_from_fit(self, truth_fit):
        fit, _ = truth_fit
        t = binned_residuals(fit, n_bins=5, n_draws=3, seed=0)
        assert set(t.columns) == {"draw", "bin", "p_mean", "residual", "n", "se"}
        assert t.groupby("draw").n.sum().eq(len(fit.data.hint)).all()


class TestFakeData:
    def test_duplicate_structure(self, small):
        data, _ = small
        dup, truth = fake_data_duplicate(data, "none")
        nT = int(np.sum(data.Z == 1))
        assert dup.n == 2 * nT
        assert np.allclose(dup.Y[dup.Z == 1], dup.Y[dup.Z == 0])
        assert np.all(dup.Z[dup.h_student] == 1)
        assert len(dup.hint) == len(data.hint)
        assert not set(dup.teacher[dup.Z == 1]) & set(dup.teacher[dup.Z == 0])
        assert np.array_equal(dup.pair[dup.Z == 1], dup.pair[dup.Z == 0])
        assert truth["b1"] == 0.0

    def test_effect_specs(self, small):
        data, _ = small
        eta = np.linspace(-1, 1, int(np.sum(data.Z == 1)))
        dup, truth = fake_data_duplicate(data, "linear(0.2, 0.1)", eta=eta)
        assert np.allclose(dup.Y[dup.Z == 1] - dup.Y[dup.Z == 0], 0.2 + 0.1 * eta)
        dup, truth = fake_data_duplicate(data, ("quadratic", 0.0, 0.0, 0.3), eta=eta)
        assert np.allclose(truth["tau"], 0.3 * eta ** 2)
        assert parse_effect("random(0.1, 0.2)") == ("random", 0.1, 0.2)
        with pytest.raises(ValueError):
            fake_data_duplicate(data, "cubic")


class TestFit:
    def test_requires_both_arms(self, small):
        data, _ = small
        t = data.Z == 1
        idx = np.flatnonzero(t)
        only_t = PSData(**{**data.__dict__, "student_ids": [data.student_ids[i] for i in idx], "Z": data.Z[idx],
                           "Y": data.Y[idx], "X": data.X[idx], "teacher": data.teacher[idx],
                           "school": data.school[idx], "pair": data.pair[idx],
                           "h_student": np.searchsorted(idx, data.h_student)})
        with pytest.raises(PSDataError):
            fit_ps(only_t, SamplerConfig(chains=2, warmup=100, iters=100))

    def test_short_fit_runs(self):
        data, true = simulate_ps_data(n_schools=8, students_per_school=15, seed=12)
        fit = fit_ps(data, SamplerConfig(chains=2, warmup=300, iters=200, seed=1))
        assert fit.draws["eta"].shape == (2, 200, data.n)
        assert np.all(fit.flat("sigU") > 0)
        assert abs(fit.flat("sigY").mean(axis=0)[1] - true["sigY"][1]) < 0.2
        s = fit.summary()
        assert s["valid"] == fit.valid
        if fit.valid:
            r = residual_table(fit)
            assert abs(r.residual.mean()) < 2 * r.residual.std() / np.sqrt(len(r))
