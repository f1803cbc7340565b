"""Matched-set effect estimators, sensitivity intervals and mediation effects."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

SCHEMES = ("ATE", "TOT", "OLS")
Z975 = float(stats.norm.ppf(0.975))


class EffectError(ValueError):
    pass


@dataclass
class EffectEstimate:
    """A point estimate with its standard error and intervals.

    Attributes:
        scheme: one of ATE, TOT, OLS, INDIRECT, DIRECT, DIRECT_ADJ.
        estimate: effect in outcome SD units.
        std_error: standard error.
        ci_95: two-sided 95% interval.
        df: residual (or Satterthwaite) degrees of freedom.
        sensitivity: benchmark name -> (lo, hi) sensitivity interval.
    """

    scheme: str
    estimate: float
    std_error: float
    ci_95: tuple
    df: float = math.inf
    sensitivity: dict = field(default_factory=dict)
    n: int = 0
    fit: Optional["_MatchedFit"] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        out = {"scheme": self.scheme, "estimate": self.estimate, "std_error": self.std_error,
               "ci_95": list(self.ci_95), "df": None if math.isinf(self.df) else self.df, "n": self.n}
        out["sensitivity"] = {k: list(v) for k, v in self.sensitivity.items()}
        return out


@dataclass
class SetEffects:
    """Per-set effects plus the unit data they came from."""

    table: pd.DataFrame  # match_id, n1, n0, ybar1, ybar0, tau
    units: pd.DataFrame  # student_id index; match_id, H, Y (observed only)
    dropped: list = field(default_factory=list)

    @property
    def tau(self) -> pd.Series:
        return self.table.set_index("match_id")["tau"]


def matched_set_effects(match_id, Y, H) -> SetEffects:
    """Within-set difference of class means.

    Args:
        match_id: Series of matched-set ids indexed by student id.
        Y: outcomes aligned with ``match_id`` (NaN for missing).
        H: exposure aligned with ``match_id``.

    Returns:
        SetEffects; sets where one class has no observed outcome are
        dropped and listed in ``dropped``.
    """
    m = pd.Series(match_id)
    units = pd.DataFrame({"match_id": m.to_numpy(), "H": np.asarray(H).astype(int),
                          "Y": np.asarray(Y, dtype=float)}, index=m.index)
    units = units[np.isfinite(units.Y)]
    g = units.groupby(["match_id", "H"]).Y.agg(["size", "mean"]).unstack("H")
    g = g.reindex(columns=pd.MultiIndex.from_product([["size", "mean"], [0, 1]]))
    all_sets = pd.unique(m.to_numpy())
    ok = g.index[(g["size"].fillna(0) > 0).all(axis=1)]
    dropped = sorted(set(all_sets) - set(ok))
    g = g.loc[ok]
    table = pd.DataFrame({"match_id": g.index, "n1": g["size"][1].astype(int).to_numpy(),
                          "n0": g["size"][0].astype(int).to_numpy(), "ybar1": g["mean"][1].to_numpy(),
                          "ybar0": g["mean"][0].to_numpy()})
    table["tau"] = table.ybar1 - table.ybar0
    units = units[units.match_id.isin(ok)]
    return SetEffects(table.reset_index(drop=True), units, dropped)


def set_weights(n1, n0, scheme: str) -> np.ndarray:
    n1 = np.asarray(n1, dtype=float)
    n0 = np.asarray(n0, dtype=float)
    if scheme == "ATE":
        return n1 + n0
    if scheme == "TOT":
        return n1
    if scheme == "OLS":
        return 1.0 / (1.0 / n1 + 1.0 / n0)
    raise EffectError(f"unknown scheme {scheme!r}")


def hc3_vcov(design, residuals, hat_diagonals, weights=None) -> np.ndarray:
    """HC3 sandwich covariance, optionally for weighted least squares.

    Args:
        design: n x p matrix.
        residuals: n residuals (unweighted scale).
        hat_diagonals: diagonal of the (weighted) hat matrix.
        weights: optional WLS precision weights.

    Returns:
        p x p covariance matrix.
    """
    X = np.asarray(design, dtype=float)
    e = np.asarray(residuals, dtype=float)
    h = np.asarray(hat_diagonals, dtype=float)
    w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(h >= 1 - 1e-12):
        raise EffectError("hat value of 1: saturated point, HC3 undefined")
    bread = np.linalg.inv(X.T @ (w[:, None] * X))
    omega = (w * e) ** 2 / (1 - h) ** 2
    meat = X.T @ (omega[:, None] * X)
    return bread @ meat @ bread


@dataclass
class _MatchedFit:
    """Weighted regression of Y on H with matched-set fixed effects."""

    y: np.ndarray
    h: np.ndarray
    sets: np.ndarray  # integer codes
    v: np.ndarray  # unit precision weights
    index: pd.Index
    coef: float
    resid: np.ndarray
    leverage: np.ndarray
    df: int
    X: Optional[pd.DataFrame] = None

    def demean(self, A):
        """Weighted within-set demeaning of the columns of ``A``."""
        A = np.asarray(A, dtype=float)
        A2 = A.reshape(len(self.y), -1)
        k = self.sets.max() + 1
        sw = np.bincount(self.sets, weights=self.v, minlength=k)
        out = np.empty_like(A2)
        for j in range(A2.shape[1]):
            mean = np.bincount(self.sets, weights=self.v * A2[:, j], minlength=k) / sw
            out[:, j] = A2[:, j] - mean[self.sets]
        return out.reshape(A.shape)


def _fit_matched(se: SetEffects, scheme: str) -> _MatchedFit:
    u = se.units
    codes, uniq = pd.factorize(u.match_id)
    comp = se.table.set_index("match_id").loc[uniq]
    w = set_weights(comp.n1, comp.n0, scheme)
    h = u.H.to_numpy().astype(float)
    y = u.Y.to_numpy()
    if scheme == "OLS":
        v = np.ones(len(y))
    else:
        n_class = np.where(h == 1, comp.n1.to_numpy()[codes], comp.n0.to_numpy()[codes])
        v = w[codes] / n_class
    k = len(uniq)
    sw = np.bincount(codes, weights=v, minlength=k)
    hbar = np.bincount(codes, weights=v * h, minlength=k) / sw
    ybar = np.bincount(codes, weights=v * y, minlength=k) / sw
    r = h - hbar[codes]
    srr = np.sum(v * r * r)
    coef = float(np.sum(v * r * (y - ybar[codes])) / srr)
    resid = (y - ybar[codes]) - coef * r
    lev = v / sw[codes] + v * r * r / srr
    df = len(y) - k - 1
    return _MatchedFit(y, h, codes, v, u.index, coef, resid, lev, df)


def weighted_effect(set_effects: SetEffects, scheme: str, X: Optional[pd.DataFrame] = None) -> EffectEstimate:
    """Weighted mean of per-set effects with an HC3 standard error.

    The point estimate is ``sum(w_m tau_m) / sum(w_m)``.  The standard
    error comes from the equivalent regression of Y on H and set dummies:
    ordinary least squares for OLS weights, weighted least squares with
    unit weights ``w_m / n_hm`` for ATE and TOT (these reproduce the same
    coefficient).

    Args:
        set_effects: output of ``matched_set_effects``.
        scheme: ATE, TOT or OLS.
        X: optional covariates (indexed by student id) kept for
            ``benchmark_covariate``.

    Returns:
        EffectEstimate.
    """
    tab = set_effects.table
    if len(tab) == 0:
        raise EffectError("no matched sets")
    w = set_weights(tab.n1, tab.n0, scheme)
    est = float(np.sum(w * tab.tau) / np.sum(w))
    fit = _fit_matched(set_effects, scheme)
    if fit.df < 1 or np.any(fit.leverage >= 1 - 1e-12):
        se = math.nan
    else:
        # FWL: the H coefficient is sum(v r y) / sum(v r^2) with r the
        # within-set residual of H, so the sandwich reduces to a scalar
        r = fit.demean(fit.h)
        srr = np.sum(fit.v * r * r)
        var = np.sum((fit.v * r * fit.resid) ** 2 / (1 - fit.leverage) ** 2) / srr ** 2
        se = float(np.sqrt(var))
    if X is not None:
        fit.X = X.loc[fit.index]
    out = EffectEstimate(scheme, est, se, (est - Z975 * se, est + Z975 * se), fit.df, n=len(fit.y), fit=fit)
    return out


def ols_equivalence_check(Y, H, match_ids) -> float:
    """Discrepancy between the OLS-weighted mean and the dummy regression.

    Sets lacking one class (or observed outcomes in it) are removed on
    both sides before comparing.
    """
    se = matched_set_effects(pd.Series(np.asarray(match_ids)), Y, H)
    tab = se.table
    if len(tab) == 0:
        raise EffectError("no matched sets with both classes")
    w = set_weights(tab.n1, tab.n0, "OLS")
    eq3 = np.sum(w * tab.tau) / np.sum(w)
    codes, uniq = pd.factorize(se.units.match_id)
    D = np.zeros((len(codes), len(uniq)))
    D[np.arange(len(codes)), codes] = 1.0
    A = np.column_stack([se.units.H.to_numpy(float), D])
    beta, *_ = np.linalg.lstsq(A, se.units.Y.to_numpy(), rcond=None)
    return float(abs(eq3 - beta[0]))


def _si_multiplier(rho_sq, t_z, df, q=Z975):
    if not 0 <= rho_sq < 1:
        raise EffectError("rho_sq must lie in [0, 1)")
    if not np.isfinite(t_z):
        raise EffectError("t_z must be finite")
    T = abs(float(t_z))
    k = q * math.sqrt(1 + T * T / df) if math.isfinite(df) else q
    rho_star = T / math.hypot(T, k)
    r = math.sqrt(rho_sq)
    if r >= rho_star:
        return math.hypot(T, k)
    return T * r + k * math.sqrt(1 - rho_sq)


def sensitivity_interval(effect_fit: EffectEstimate, rho_sq: float, t_z: float) -> tuple:
    """Omitted-confounder sensitivity interval.

    Union of the 95% intervals after adjusting for every hypothetical
    confounder U with squared partial correlation to Y at most
    ``rho_sq`` and treatment-model t-statistic at most ``|t_z|``.  Adding
    U moves the estimate by ``SE * t * rho`` and rescales the standard
    error by ``sqrt(1 - rho**2) * sqrt(1 + t**2 / df)``.

    Returns:
        (lo, hi).
    """
    g = _si_multiplier(rho_sq, t_z, effect_fit.df)
    return (effect_fit.estimate - g * effect_fit.std_error, effect_fit.estimate + g * effect_fit.std_error)


def _resolve_columns(X: pd.DataFrame, covariate) -> list:
    if isinstance(covariate, str):
        if covariate in X.columns:
            return [covariate]
        cols = [c for c in X.columns if str(c).startswith(covariate)]
    else:
        cols = list(covariate)
    missing = [c for c in cols if c not in X.columns]
    if not cols or missing:
        raise EffectError(f"covariate {covariate!r} not among the fitted controls")
    return cols


def _wls(A, b, v):
    sv = np.sqrt(v)
    coef, *_ = np.linalg.lstsq(A * sv[:, None], b * sv, rcond=None)
    return coef, b - A @ coef


def benchmark_covariate(effect_fit: EffectEstimate, covariate) -> tuple:
    """Sensitivity parameters implied by an observed covariate.

    ``rho_sq`` is the squared partial correlation of Y with the covariate
    given H, the other covariates and the matched sets; ``t_z`` is the
    covariate's t-statistic in the regression of H on all covariates and
    the matched sets.  A group of columns (dummies sharing a prefix, or a
    list) is reduced to its fitted composite ``X_g @ gamma``.

    Args:
        effect_fit: an estimate from ``weighted_effect`` that was given X.
        covariate: column name, column prefix, or list of columns.

    Returns:
        (rho_sq, t_z).
    """
    fit = effect_fit.fit
    if fit is None or fit.X is None:
        raise EffectError("effect fit carries no covariates")
    X = fit.X.astype(float)
    cols = _resolve_columns(X, covariate)
    others = [c for c in X.columns if c not in cols]
    y = fit.demean(fit.y)
    h = fit.demean(fit.h)
    Xg = fit.demean(X[cols].to_numpy())
    Xo = fit.demean(X[others].to_numpy()) if others else np.zeros((len(y), 0))
    if np.linalg.matrix_rank(np.column_stack([h, Xg, Xo]) * np.sqrt(fit.v)[:, None]) < 1 + Xg.shape[1] + Xo.shape[1]:
        raise EffectError("benchmark covariate is perfectly collinear with the controls")
    full = np.column_stack([h, Xg, Xo])
    coef, _ = _wls(full, y, fit.v)
    w = Xg @ coef[1 : 1 + Xg.shape[1]] if Xg.shape[1] > 1 else Xg[:, 0]
    base = np.column_stack([h, Xo])
    _, ry = _wls(base, y, fit.v)
    _, rw = _wls(base, w, fit.v)
    num = np.sum(fit.v * ry * rw) ** 2
    den = np.sum(fit.v * ry * ry) * np.sum(fit.v * rw * rw)
    rho_sq = float(num / den) if den > 0 else 0.0
    A = np.column_stack([w, Xo])
    coef_h, resid_h = _wls(A, h, fit.v)
    n_sets = fit.sets.max() + 1
    dof = len(h) - A.shape[1] - n_sets
    sigma2 = np.sum(fit.v * resid_h ** 2) / dof
    cov = sigma2 * np.linalg.inv(A.T @ (fit.v[:, None] * A))
    t_z = float(coef_h[0] / np.sqrt(cov[0, 0]))
    return rho_sq, t_z


def impute_y10(match_id, Y, H) -> pd.DataFrame:
    """Impute Y(1,0) for treated-arm students.

    H=0 students keep their observed outcome; H=1 students take the mean
    observed outcome of the H=0 members of their matched set.

    Returns:
        DataFrame indexed by student id with columns ``y10`` and
        ``source`` (observed or set-mean).
    """
    m = pd.Series(match_id)
    df = pd.DataFrame({"m": m.to_numpy(), "H": np.asarray(H).astype(int), "Y": np.asarray(Y, float)}, index=m.index)
    ctrl = df[(df.H == 0) & np.isfinite(df.Y)].groupby("m").Y.mean()
    treated_sets = df.loc[df.H == 1, "m"].unique()
    orphan = sorted(set(treated_sets) - set(ctrl.index))
    if orphan:
        raise EffectError(f"matched set {orphan[0]} has no H=0 member with an observed outcome")
    y10 = np.where(df.H == 0, df.Y, df.m.map(ctrl).to_numpy())
    source = np.where(df.H == 0, "observed", "set-mean")
    return pd.DataFrame({"y10": y10, "source": source}, index=df.index)


def indirect_effect(tot_estimate: EffectEstimate, pr_h1: float) -> EffectEstimate:
    """Average indirect effect: the TOT scaled by Pr(H=1).

    Pr(H=1) is fixed by the definition of H, so it scales the standard
    error as a constant.
    """
    if not 0 <= pr_h1 <= 1:
        raise EffectError("pr_h1 must lie in [0, 1]")
    est = pr_h1 * tot_estimate.estimate
    se = pr_h1 * tot_estimate.std_error
    return EffectEstimate("INDIRECT", est, se, (est - Z975 * se, est + Z975 * se), tot_estimate.df, n=tot_estimate.n)


def indirect_by_summation(set_effects: SetEffects, n_treatment: Optional[int] = None) -> float:
    """``(1/n_T) sum_m n_1m tau_m``, the set-level form of the indirect effect."""
    tab = set_effects.table
    n_t = len(set_effects.units) if n_treatment is None else n_treatment
    return float(np.sum(tab.n1 * tab.tau) / n_t)


def _inv_sqrt_psd(M, tol=1e-10):
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    keep = vals > tol
    return (vecs[:, keep] / np.sqrt(vals[keep])) @ vecs[:, keep].T


def cr2_vcov(X, e, clusters, contrast):
    """CR2 variance of ``contrast @ beta`` with Bell-McCaffrey df.

    Args:
        X: n x p design (OLS).
        e: OLS residuals.
        clusters: cluster labels.
        contrast: length-p vector.

    Returns:
        (variance, satterthwaite_df).
    """
    X = np.asarray(X, float)
    e = np.asarray(e, float)
    codes, _ = pd.factorize(np.asarray(clusters))
    B = np.linalg.inv(X.T @ X)
    Bc = B @ np.asarray(contrast, float)
    n = len(e)
    G = codes.max() + 1
    U = np.zeros((n, G))
    var = 0.0
    for g in range(G):
        idx = np.flatnonzero(codes == g)
        Xg = X[idx]
        Hgg = Xg @ B @ Xg.T
        A = _inv_sqrt_psd(np.eye(len(idx)) - Hgg)
        a = A @ (Xg @ Bc)
        var += float(a @ e[idx]) ** 2
        # u_g = (I - H)[:, g] a: weights on y whose square-sum gives the contribution
        col = -(X @ (B @ (Xg.T @ a)))
        col[idx] += a
        U[:, g] = col
    UU = U.T @ U
    df = np.trace(UU) ** 2 / np.sum(UU * UU)
    return var, float(df)


def direct_effect(y_tilde, Z, pair_ids, school_ids, X: Optional[pd.DataFrame] = None) -> EffectEstimate:
    """Effect of assignment on Y-tilde with pair fixed intercepts.

    Standard errors are school-clustered CR2 with Satterthwaite degrees of
    freedom; the interval uses the t quantile.

    Args:
        y_tilde: Z * Yhat(1,0) + (1 - Z) * Y.
        Z: assignment (0/1).
        pair_ids: randomization pair (block) of each student's school.
        school_ids: cluster labels.
        X: optional covariates for the adjusted variant.

    Returns:
        EffectEstimate with scheme DIRECT or DIRECT_ADJ.
    """
    y = np.asarray(y_tilde, float)
    z = np.asarray(Z).astype(float)
    pairs = np.asarray(pair_ids)
    schools = np.asarray(school_ids)
    frame = pd.DataFrame({"p": pairs, "z": z})
    arms = frame.groupby("p").z.agg(["min", "max"])
    bad = arms.index[(arms["min"] == arms["max"])]
    if len(bad):
        raise EffectError(f"pair {bad[0]} lacks one arm; its schools cannot identify the effect")
    if pd.Series(schools).groupby(z).nunique().min() < 1:
        raise EffectError("each arm needs at least one school")
    codes, uniq = pd.factorize(pairs)
    D = np.zeros((len(y), len(uniq)))
    D[np.arange(len(y)), codes] = 1.0
    cols = [z[:, None], D]
    if X is not None:
        Xa = np.asarray(X, float)
        cols.append(Xa - Xa.mean(axis=0))
    A = np.column_stack(cols)
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    e = y - A @ beta
    c = np.zeros(A.shape[1])
    c[0] = 1.0
    var, df = cr2_vcov(A, e, schools, c)
    se = math.sqrt(var)
    q = stats.t.ppf(0.975, df)
    est = float(beta[0])
    scheme = "DIRECT" if X is None else "DIRECT_ADJ"
    return EffectEstimate(scheme, est, se, (est - q * se, est + q * se), df, n=len(y))


# ---------------------------------------------------------------------------
# output


TABLE3_COLUMNS = ["Weights", "Estimate", "Std. Error", "CI_lo", "CI_hi"]


def table3_frame(estimates: Sequence[EffectEstimate], benchmarks: Sequence[str] = ()) -> pd.DataFrame:
    rows = []
    for e in estimates:
        row = {"Weights": e.scheme, "Estimate": e.estimate, "Std. Error": e.std_error,
               "CI_lo": e.ci_95[0], "CI_hi": e.ci_95[1]}
        for b in benchmarks:
            lo, hi = e.sensitivity.get(b, (math.nan, math.nan))
            row[f"SI[{b}]_lo"] = lo
            row[f"SI[{b}]_hi"] = hi
        rows.append(row)
    return pd.DataFrame(rows)


def write_table3(path, estimates, benchmarks=()):
    table3_frame(estimates, benchmarks).to_csv(path, index=False, float_format="%.17g")


def read_table3(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_results_json(path, estimates: Sequence[EffectEstimate], extra: Optional[dict] = None):
    data = {"estimates": [e.to_dict() for e in estimates]}
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=True)
