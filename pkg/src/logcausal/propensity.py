"""Multilevel logistic propensity model for high hint use."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, optimize, sparse
from scipy.special import expit, log_expit

log = logging.getLogger(__name__)


class SeparationWarning(UserWarning):
    pass


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# natural cubic splines


@dataclass(frozen=True)
class NaturalSpline:
    """Natural cubic spline basis with fixed knots (no intercept column).

    Uses the truncated-power form: ``x`` plus ``d_k - d_{K-1}`` for the
    first ``K - 2`` knots, where ``d_k = ((x - k_k)^3_+ - (x - k_K)^3_+) /
    (k_K - k_k)``.  Beyond the boundary knots every column is linear.
    """

    knots: tuple

    @property
    def df(self) -> int:
        return len(self.knots) - 1

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = np.asarray(self.knots)
        K = len(k)

        def d(j):
            return (np.maximum(x - k[j], 0) ** 3 - np.maximum(x - k[-1], 0) ** 3) / (k[-1] - k[j])

        cols = [x]
        if K > 2:
            last = d(K - 2)
            cols += [d(j) - last for j in range(K - 2)]
        return np.column_stack(cols)

    def names(self, prefix: str = "ns") -> list[str]:
        return [f"{prefix}{j + 1}" for j in range(self.df)]


def natural_spline_basis(x, df: int = 5, return_spline: bool = False):
    """Natural cubic spline basis with ``df`` columns.

    Boundary knots sit at ``min(x)`` and ``max(x)``; the ``df - 1``
    interior knots sit at equally spaced quantiles of ``x``.

    Raises:
        ValueError: if ``x`` has fewer than ``df + 1`` distinct values or
            the quantile knots coincide.
    """
    x = np.asarray(x, dtype=float)
    if df < 1:
        raise ValueError("df must be >= 1")
    if np.unique(x).size < df + 1:
        raise ValueError(f"need at least {df + 1} distinct values for df={df}")
    knots = np.quantile(x, np.linspace(0, 1, df + 1))
    if np.any(np.diff(knots) <= 0):
        raise ValueError("quantile knots are not distinct; reduce df")
    spline = NaturalSpline(tuple(float(v) for v in knots))
    basis = spline(x)
    return (basis, spline) if return_spline else basis


# ---------------------------------------------------------------------------
# GLMM


@dataclass
class PropensityFit:
    """Laplace fit of ``logit P(H=1) = a + X b + e_state + e_school + e_class``."""

    coef: pd.Series  # intercept first, on the original covariate scale
    random_effects: dict  # group name -> Series of predicted intercepts
    sd: dict  # group name -> random-intercept SD
    logit: pd.Series  # fitted linear predictor per student
    deviance: float
    deviance_trace: list = field(default_factory=list)
    converged: bool = True
    ridge: float = 0.0
    spline: Optional[NaturalSpline] = None
    group_names: tuple = ()
    flags: list = field(default_factory=list)

    @property
    def variances(self) -> dict:
        return {k: v ** 2 for k, v in self.sd.items()}

    def to_csv(self, path) -> None:
        self.logit.rename("logit_pi").rename_axis("student_id").reset_index().to_csv(
            path, index=False, float_format="%.17g")


class _Design:
    """Standardised fixed-effect design with random-effect incidence."""

    def __init__(self, X, groups):
        X = np.asarray(X, dtype=float)
        self.n = X.shape[0]
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.keep = sd > 1e-12 * np.maximum(1.0, np.abs(self.mean))
        self.sd = np.where(self.keep, sd, 1.0)
        Xs = (X[:, self.keep] - self.mean[self.keep]) / self.sd[self.keep]
        self.X = np.column_stack([np.ones(self.n), Xs])
        self.levels = []
        blocks = []
        for g in groups:
            codes, lev = pd.factorize(np.asarray(g), sort=True)
            self.levels.append(lev)
            blocks.append(sparse.csr_matrix((np.ones(self.n), (np.arange(self.n), codes)), shape=(self.n, len(lev))))
        self.Z = sparse.hstack(blocks, format="csr") if blocks else sparse.csr_matrix((self.n, 0))
        self.sizes = [len(lev) for lev in self.levels]
        self.q = int(sum(self.sizes))
        self.p = self.X.shape[1]

    def lam(self, sigma):
        return np.repeat(np.asarray(sigma, dtype=float), self.sizes)

    def to_original(self, b):
        """Map standardised coefficients back to the caller's scale."""
        full = np.zeros(self.keep.size)
        full[self.keep] = b[1:] / self.sd[self.keep]
        a = b[0] - np.sum(full * self.mean)
        return a, full


def _pirls(des: _Design, y, sigma, start, ridge=0.0, tol=1e-12, max_iter=100):
    """Joint mode of (beta, v) for the penalised Bernoulli log likelihood.

    ``u = Lambda v`` with ``v ~ N(0, I)``.  Returns the mode, the log
    likelihood at it, ``|v|^2`` and ``log det(Lambda Z'WZ Lambda + I)``.
    """
    lam = des.lam(sigma)
    ZL = des.Z @ sparse.diags(lam) if des.q else des.Z
    A = sparse.hstack([sparse.csr_matrix(des.X), ZL], format="csr")
    p, q = des.p, des.q
    pen = np.r_[0.0, np.full(p - 1, ridge), np.ones(q)]
    theta = start.copy()

    def objective(th):
        eta = A @ th
        return np.sum(y * eta + log_expit(-eta)) - 0.5 * np.sum(pen * th ** 2)

    f = objective(theta)
    for it in range(max_iter):
        eta = A @ theta
        mu = expit(eta)
        w = mu * (1 - mu)
        grad = A.T @ (y - mu) - pen * theta
        H = (A.T @ sparse.diags(w) @ A).toarray() + np.diag(pen)
        try:
            c = linalg.cho_factor(H)
            step = linalg.cho_solve(c, grad)
        except linalg.LinAlgError:
            step = linalg.lstsq(H, grad)[0]
        # step halving keeps the penalised likelihood nondecreasing
        t = 1.0
        for _ in range(30):
            cand = theta + t * step
            fc = objective(cand)
            if fc >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        theta, f = cand, fc
        if np.max(np.abs(t * step)) < tol or np.max(np.abs(grad)) < 1e-10:
            break
    else:
        raise ConvergenceError("PIRLS did not converge")
    eta = A @ theta
    mu = expit(eta)
    w = mu * (1 - mu)
    v = theta[p:]
    if q:
        Hv = (ZL.T @ sparse.diags(w) @ ZL).toarray() + np.eye(q)
        logdet = 2 * np.sum(np.log(np.diag(linalg.cholesky(Hv, lower=True))))
    else:
        logdet = 0.0
    ll = float(np.sum(y * eta + log_expit(-eta)))
    return theta, ll, float(v @ v), float(logdet)


_FD_STEP = 1e-5


def _polish(f, x, trace, h=1e-4, gtol=1e-7, max_iter=20):
    """Newton refinement of the interior SDs after the quasi-Newton run."""
    x = x.copy()
    fx = f(x)
    for _ in range(max_iter):
        free = np.flatnonzero(x > 10 * h)
        if free.size == 0:
            break
        E = np.eye(x.size)[free] * h
        fp = np.array([f(x + e) for e in E])
        fm = np.array([f(x - e) for e in E])
        g = (fp - fm) / (2 * h)
        if np.max(np.abs(g)) < gtol:
            break
        Hm = np.empty((free.size, free.size))
        for a in range(free.size):
            Hm[a, a] = (fp[a] - 2 * fx + fm[a]) / h ** 2
            for b in range(a):
                Hm[a, b] = Hm[b, a] = (f(x + E[a] + E[b]) - fp[a] - fp[b] + fx) / h ** 2
        try:
            step = -np.linalg.solve(Hm, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.linalg.eigvalsh(Hm) > 0):
            break
        t = 1.0
        cand = x.copy()
        for _ in range(20):
            cand[free] = np.maximum(x[free] + t * step, 0.0)
            fc = f(cand)
            if fc <= fx:
                break
            t *= 0.5
        else:
            break
        x, fx = cand.copy(), fc
        trace.append(fx)
    return x, trace


def _laplace_deviance(des, y, sigma, start, ridge):
    theta, ll, vv, logdet = _pirls(des, y, sigma, start, ridge)
    b = theta[1:des.p]
    return -2 * ll + vv + logdet + ridge * float(b @ b), theta


def fit_mlogit(X, H, groups: Mapping[str, Sequence], names: Optional[Sequence[str]] = None,
               index=None, max_iter: int = 200, rel_tol: float = 1e-8, ridge: float = 1.0,
               spline: Optional[NaturalSpline] = None) -> PropensityFit:
    """Fit the random-intercept logistic model by Laplace approximation.

    For fixed random-intercept SDs the fixed effects and spherical random
    effects are found jointly by penalised IRLS; the SDs then minimise the
    Laplace deviance ``-2 loglik + |v|^2 + log det(L Z'WZ L + I)`` under
    L-BFGS-B with lower bounds 0.

    Args:
        X: Covariates without an intercept column, shape ``(n, p)``.
        H: Binary outcome.
        groups: Ordered name -> labels mapping, e.g. state, school, class.
        names: Column names of ``X``.
        index: Student ids for the fitted logits.
        ridge: Penalty used when the unpenalised fit separates.
        spline: Spline definition to carry along for prediction.

    Raises:
        ValueError: if ``H`` takes a single value.
        ConvergenceError: if the outer optimisation fails to converge.
    """
    Xa = np.asarray(X, dtype=float)
    if Xa.ndim == 1:
        Xa = Xa[:, None]
    y = np.asarray(H, dtype=float)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("H must be binary")
    if y.min() == y.max():
        raise ValueError("H is constant: outcome completely separated")
    names = list(names) if names is not None else [f"x{j}" for j in range(Xa.shape[1])]
    gnames = list(groups)
    des = _Design(Xa, [groups[g] for g in gnames])
    flags = []
    if not des.keep.all():
        flags.append("dropped constant columns: " + ", ".join(np.asarray(names)[~des.keep]))

    def run(pen):
        start = np.zeros(des.p + des.q)
        start[0] = np.log(y.mean() / (1 - y.mean()))
        state = {"theta": start}
        trace = []

        def f(s):
            dev, th = _laplace_deviance(des, y, s, state["theta"], pen)
            state["theta"] = th
            return dev

        def f_and_grad(s):
            # central differences; the deviance is even in each SD, so this
            # is also valid on the boundary s = 0
            dev = f(s)
            theta_at = state["theta"]
            g = np.empty_like(s)
            for j in range(s.size):
                e = np.zeros_like(s)
                e[j] = _FD_STEP
                g[j] = (_laplace_deviance(des, y, s + e, theta_at, pen)[0]
                        - _laplace_deviance(des, y, s - e, theta_at, pen)[0]) / (2 * _FD_STEP)
            state["theta"] = theta_at
            return dev, g

        def record(intermediate_result):
            trace.append(float(intermediate_result.fun))

        if des.q == 0 or not gnames:
            dev = f(np.zeros(0))
            return dev, np.zeros(0), state["theta"], [dev], True
        s0 = np.full(len(gnames), 0.5)
        f0 = f(s0)
        res = optimize.minimize(f_and_grad, s0, jac=True, method="L-BFGS-B", bounds=[(0, None)] * len(gnames),
                                callback=record, options={"maxiter": max_iter, "ftol": rel_tol, "gtol": 1e-6})
        sig, trace = _polish(lambda z: f(np.abs(z)), res.x, [f0] + trace)
        dev = f(sig)
        return dev, sig, state["theta"], trace, bool(res.success)

    used_ridge = 0.0
    try:
        dev, sig, theta, trace, ok = run(0.0)
        separated = np.max(np.abs(theta[1:des.p])) > 15 if des.p > 1 else False
    except ConvergenceError:
        separated = True
    if separated:
        warnings.warn(f"quasi-complete separation; refitting with ridge penalty {ridge}", SeparationWarning)
        flags.append(f"separation: ridge {ridge}")
        used_ridge = ridge
        dev, sig, theta, trace, ok = run(ridge)
    if not ok:
        raise ConvergenceError("Laplace deviance optimisation did not converge")

    b = theta[:des.p]
    a, full = des.to_original(b)
    coef = pd.Series(np.r_[a, full], index=["(Intercept)"] + names)
    lam = des.lam(sig)
    u = lam * theta[des.p:]
    re, off = {}, 0
    for g, lev, size in zip(gnames, des.levels, des.sizes):
        re[g] = pd.Series(u[off:off + size], index=pd.Index(lev, name=g))
        off += size
    eta = des.X @ b + (des.Z @ u if des.q else 0.0)
    idx = pd.Index(index if index is not None else np.arange(des.n), name="student_id")
    return PropensityFit(
        coef=coef, random_effects=re, sd=dict(zip(gnames, map(float, sig))),
        logit=pd.Series(eta, index=idx, name="logit_pi"), deviance=float(dev), deviance_trace=trace,
        converged=ok, ridge=used_ridge, spline=spline, group_names=tuple(gnames), flags=flags,
    )


def laplace_objective(fit_inputs, sigma, ridge: float = 0.0):
    """Laplace deviance at ``sigma`` for ``(X, H, groups)``."""
    X, H, groups = fit_inputs
    des = _Design(np.asarray(X, dtype=float).reshape(len(H), -1), [groups[g] for g in groups])
    y = np.asarray(H, dtype=float)
    start = np.zeros(des.p + des.q)
    return _laplace_deviance(des, y, np.asarray(sigma, dtype=float), start, ridge)[0]


def predict_logit(fit: PropensityFit, X, groups: Optional[Mapping[str, Sequence]] = None):
    """Linear predictor for new students.

    Random intercepts of levels not seen in the fit are set to zero and
    flagged.  Returns ``(logit, unseen)`` where ``unseen`` is a boolean
    array marking students with at least one such level.
    """
    Xa = np.atleast_2d(np.asarray(X, dtype=float))
    if Xa.shape[1] != len(fit.coef) - 1 and Xa.shape[0] == len(fit.coef) - 1:
        Xa = Xa.T
    eta = fit.coef.iloc[0] + Xa @ fit.coef.iloc[1:].to_numpy()
    unseen = np.zeros(len(eta), dtype=bool)
    for g in fit.group_names:
        if groups is None or g not in groups:
            unseen[:] = True
            continue
        labels = pd.Series(np.asarray(groups[g]))
        vals = labels.map(fit.random_effects[g])
        unseen |= vals.isna().to_numpy()
        eta = eta + vals.fillna(0.0).to_numpy()
    return eta, unseen


# ---------------------------------------------------------------------------
# design for the hint-use model

MISSING_INDICATORS = ["miss_grade", "miss_race", "miss_sex"]


def propensity_design(imputed: pd.DataFrame, categorical: Sequence[str], pretest: str = "pretest",
                      indicators: Sequence[str] = MISSING_INDICATORS, df: int = 5):
    """Dummies, missingness indicators and a natural spline in pretest.

    Returns ``(X, names, spline)``.
    """
    from .core_data import design_matrix

    cats = design_matrix(imputed[list(categorical)], drop_first=True)
    ind = imputed[[c for c in indicators if c in imputed.columns]].astype(float)
    basis, spline = natural_spline_basis(imputed[pretest].to_numpy(float), df=df, return_spline=True)
    spl = pd.DataFrame(basis, columns=spline.names(f"ns({pretest})"), index=imputed.index)
    X = pd.concat([cats, ind, spl], axis=1)
    return X, list(X.columns), spline
