"""Bayesian principal stratification on latent hint proclivity.

The model has three parts sharing the latent ``eta`` (proclivity under
treatment, defined for every student):

* hints: ``hint ~ bernoulli_logit(delta[section] + eta[student])`` for
  treatment-arm challenge records;
* proclivity: ``eta ~ normal(tchU + sclU + X betaU, sigU)``;
* outcome: ``Y ~ normal(pair + tchY + sclY + a1 eta + Z (b0 + b1 eta) + X betaY, sigY[Z])``.

Random intercepts and control-arm ``eta`` are sampled non-centred;
treatment-arm ``eta`` (informed by hint data) is centred.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse, stats
from scipy.special import expit

from ._kernels import logit_cells, ps_density
from .sampler import PosteriorDraws, SamplerConfig, TargetDensity, diagnostics_ok, hdi, hmc_sample

log = logging.getLogger(__name__)

SCALES = ["sigTchU", "sigSclU", "sigU", "sigTchY", "sigSclY", "sigY0", "sigY1"]
STRUCTURAL = ["a1", "b0", "b1", "sigTchU", "sigSclU", "sigU", "sigTchY", "sigSclY", "sigY"]
PRIOR_SD_COEF = 2.0  # betaU, betaY, pairEffect
PRIOR_SD_EFFECT = 1.0  # a1, b0, b1
PRIOR_SD_SCALE = 5.0  # half-normal on every scale
PRIOR_SD_DELTA = 5.0
MAX_DIVERGENCE_RATE = 0.05
# longer trajectories mix the scale parameters better per gradient; warmup
# trajectories are capped because the initial unit metric forces tiny steps
PS_SAMPLER = SamplerConfig(chains=4, warmup=1000, iters=2000, integration_time=2 * math.pi, warmup_max_treedepth=6)


class PSDataError(ValueError):
    pass


@dataclass
class PSData:
    """Arrays for the PS model.

    Attributes:
        student_ids: one id per row of ``X``.
        Z: assignment (0/1).
        Y: outcome.
        X: standardized covariates (includes the pretest square).
        x_names: column names of ``X``.
        teacher, school, pair: integer codes per student.
        h_student, h_section, hint: one entry per challenge record;
            ``h_student`` indexes rows of ``X`` and must be treatment arm.
        section_ids, teacher_ids, school_ids, pair_ids: labels of the codes.
    """

    student_ids: list
    Z: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    x_names: list
    teacher: np.ndarray
    school: np.ndarray
    pair: np.ndarray
    h_student: np.ndarray
    h_section: np.ndarray
    hint: np.ndarray
    section_ids: list
    teacher_ids: list
    school_ids: list
    pair_ids: list

    def __post_init__(self):
        n = len(self.student_ids)
        for name in ("Z", "Y", "teacher", "school", "pair"):
            if len(getattr(self, name)) != n:
                raise PSDataError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if self.X.shape[0] != n:
            raise PSDataError("X rows do not match students")
        if len(self.h_student) and (self.h_student.min() < 0 or self.h_student.max() >= n):
            raise IndexError("hint record student index out of range")
        if len(self.h_section) and (self.h_section.min() < 0 or self.h_section.max() >= len(self.section_ids)):
            raise IndexError("hint record section index out of range")
        for codes, labels in ((self.teacher, self.teacher_ids), (self.school, self.school_ids),
                              (self.pair, self.pair_ids)):
            if len(codes) and (codes.min() < 0 or codes.max() >= len(labels)):
                raise IndexError("group index out of range")
        if len(self.h_student) and np.any(self.Z[self.h_student] != 1):
            raise PSDataError("hint records must belong to treatment-arm students")
        if not np.all(np.isfinite(self.Y)):
            raise PSDataError("outcomes must be finite")

    @property
    def n(self) -> int:
        return len(self.student_ids)

    @classmethod
    def build(cls, students: pd.DataFrame, covariates: pd.DataFrame, hints: pd.DataFrame,
              pretest: Optional[str] = "pretest", standardize: bool = True) -> "PSData":
        """Assemble model arrays from frames.

        Args:
            students: columns ``student_id, z, y, teacher_id, school_id,
                block_id``; rows with missing ``y`` are dropped.
            covariates: numeric design aligned row-wise with ``students``.
            hints: challenge records ``student_id, section_id,
                hint_requested``.
            pretest: column receiving an added square term (None to skip).
            standardize: center and scale every covariate column.

        Returns:
            PSData.
        """
        s = students.reset_index(drop=True)
        X = covariates.reset_index(drop=True).astype(float).copy()
        keep = s["y"].notna().to_numpy()
        s, X = s[keep].reset_index(drop=True), X[keep].reset_index(drop=True)
        if pretest is not None and pretest in X.columns:
            X[f"{pretest}^2"] = X[pretest] ** 2
        if standardize:
            sd = X.std(ddof=0)
            X = X.loc[:, sd > 0]
            X = (X - X.mean()) / X.std(ddof=0)
        ids = s["student_id"].astype(str).tolist()
        pos = pd.Series(np.arange(len(ids)), index=ids)
        h = hints[hints["student_id"].astype(str).isin(pos.index)]
        unknown = set(hints["student_id"].astype(str)) - set(pos.index)
        if unknown:
            log.info("dropping hint records of %d students without outcomes", len(unknown))
        sec_codes, sec_ids = pd.factorize(h["section_id"].astype(str), sort=True)
        t_codes, t_ids = pd.factorize(s["teacher_id"].astype(str), sort=True)
        sc_codes, sc_ids = pd.factorize(s["school_id"].astype(str), sort=True)
        p_codes, p_ids = pd.factorize(s["block_id"].astype(str), sort=True)
        return cls(ids, s["z"].to_numpy(int), s["y"].to_numpy(float), X.to_numpy(), list(X.columns),
                   t_codes, sc_codes, p_codes, pos.loc[h["student_id"].astype(str)].to_numpy(),
                   sec_codes, h["hint_requested"].to_numpy(float), list(sec_ids), list(t_ids),
                   list(sc_ids), list(p_ids))


def _indicator(codes, size):
    n = len(codes)
    return sparse.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, size))


class PSTarget:
    """Unnormalised log posterior of the PS model on an unconstrained space.

    Layout: treatment-arm ``eta``, raw control-arm ``eta``, ``delta``,
    ``betaU``, ``betaY``, ``a1, b0, b1``, raw random intercepts
    (teacher U, school U, teacher Y, school Y), ``pairEffect`` and the
    log scales in the order of ``SCALES``.
    """

    def __init__(self, data: PSData):
        self.data = d = data
        self.iT = np.flatnonzero(d.Z == 1)
        self.iC = np.flatnonzero(d.Z == 0)
        self.p = d.X.shape[1]
        self.nT, self.nC = len(self.iT), len(self.iC)
        self.nt, self.ns, self.npair = len(d.teacher_ids), len(d.school_ids), len(d.pair_ids)
        self.S = len(d.section_ids)
        sizes = [("etaT", self.nT), ("etaC_raw", self.nC), ("delta", self.S), ("betaU", self.p),
                 ("betaY", self.p), ("a1", 1), ("b0", 1), ("b1", 1), ("tchU_raw", self.nt),
                 ("sclU_raw", self.ns), ("tchY_raw", self.nt), ("sclY_raw", self.ns),
                 ("pair", self.npair), ("log_scales", len(SCALES))]
        self.slices, at = {}, 0
        for name, k in sizes:
            self.slices[name] = slice(at, at + k)
            at += k
        self.dim = at
        cell = d.h_student.astype(np.int64) * max(self.S, 1) + d.h_section.astype(np.int64)
        cells, inv = np.unique(cell, return_inverse=True)
        self.c_stu = (cells // max(self.S, 1)).astype(np.int64)
        self.c_sec = (cells % max(self.S, 1)).astype(np.int64)
        self.c_trials = np.bincount(inv, minlength=cells.size).astype(float)
        self.c_hits = np.bincount(inv, weights=d.hint, minlength=cells.size)
        self.Mt = _indicator(d.teacher, self.nt).T.tocsr()
        self.Ms = _indicator(d.school, self.ns).T.tocsr()
        self.Mp = _indicator(d.pair, self.npair).T.tocsr()
        self.Zf = d.Z.astype(float)
        order = [self.slices[n].start for n in self.slices] + [self.dim]
        self._off = np.asarray(order, dtype=np.int64)
        pos = np.empty(d.n, dtype=np.int64)
        pos[self.iT] = np.arange(self.nT)
        pos[self.iC] = np.arange(self.nC)
        self._args = (self._off, np.ascontiguousarray(d.X, dtype=float), np.ascontiguousarray(d.Y, dtype=float),
                      d.Z.astype(np.int64), pos, d.teacher.astype(np.int64), d.school.astype(np.int64),
                      d.pair.astype(np.int64), self.c_stu, self.c_sec, self.c_hits, self.c_trials,
                      PRIOR_SD_COEF, PRIOR_SD_EFFECT, PRIOR_SD_DELTA, PRIOR_SD_SCALE)

    def part(self, theta, name):
        return theta[:, self.slices[name]]

    def unpack(self, theta):
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        d = self.data
        ls = self.part(th, "log_scales")
        sc = np.exp(ls)
        out = {n: sc[:, j] for j, n in enumerate(SCALES)}
        out["log_scales"] = ls
        out["delta"] = self.part(th, "delta")
        out["betaU"] = self.part(th, "betaU")
        out["betaY"] = self.part(th, "betaY")
        for nm in ("a1", "b0", "b1"):
            out[nm] = self.part(th, nm)[:, 0]
        for raw, eff, s in (("tchU_raw", "teacherEffU", "sigTchU"), ("sclU_raw", "schoolEffU", "sigSclU"),
                            ("tchY_raw", "teacherEffY", "sigTchY"), ("sclY_raw", "schoolEffY", "sigSclY")):
            out[raw] = self.part(th, raw)
            out[eff] = out[s][:, None] * out[raw]
        out["pairEffect"] = self.part(th, "pair")
        muU = out["teacherEffU"][:, d.teacher] + out["schoolEffU"][:, d.school] + out["betaU"] @ d.X.T
        eta = np.empty((th.shape[0], d.n))
        eta[:, self.iT] = self.part(th, "etaT")
        out["etaC_raw"] = self.part(th, "etaC_raw")
        eta[:, self.iC] = muU[:, self.iC] + out["sigU"][:, None] * out["etaC_raw"]
        out["eta"] = eta
        out["muU"] = muU
        out["muY"] = (out["pairEffect"][:, d.pair] + out["teacherEffY"][:, d.teacher]
                      + out["schoolEffY"][:, d.school] + out["a1"][:, None] * eta
                      + self.Zf * (out["b0"][:, None] + out["b1"][:, None] * eta) + out["betaY"] @ d.X.T)
        return out

    def transform(self, theta) -> dict:
        u = self.unpack(theta)
        keep = ["eta", "delta", "betaU", "betaY", "a1", "b0", "b1", "teacherEffU", "schoolEffU",
                "teacherEffY", "schoolEffY", "pairEffect", "sigTchU", "sigSclU", "sigU", "sigTchY", "sigSclY"]
        out = {k: u[k] for k in keep}
        out["sigY"] = np.stack([u["sigY0"], u["sigY1"]], axis=1)
        return out

    def pack(self, **values) -> np.ndarray:
        """Unconstrained point from constrained values; omitted blocks are 0
        (scales 1)."""
        th = np.zeros(self.dim)
        d = self.data
        sc = {n: values.get(n, 1.0) for n in SCALES}
        if "sigY" in values:
            sc["sigY0"], sc["sigY1"] = values["sigY"]
        th[self.slices["log_scales"]] = np.log([sc[n] for n in SCALES])
        for nm in ("delta", "betaU", "betaY", "a1", "b0", "b1"):
            if nm in values:
                th[self.slices[nm]] = values[nm]
        for raw, eff, s in (("tchU_raw", "teacherEffU", "sigTchU"), ("sclU_raw", "schoolEffU", "sigSclU"),
                            ("tchY_raw", "teacherEffY", "sigTchY"), ("sclY_raw", "schoolEffY", "sigSclY")):
            if eff in values:
                th[self.slices[raw]] = np.asarray(values[eff]) / sc[s]
        if "pairEffect" in values:
            th[self.slices["pair"]] = values["pairEffect"]
        if "eta" in values:
            eta = np.asarray(values["eta"], dtype=float)
            th[self.slices["etaT"]] = eta[self.iT]
            u = self.unpack(th[None])
            th[self.slices["etaC_raw"]] = (eta[self.iC] - u["muU"][0, self.iC]) / sc["sigU"]
        return th

    def components(self, theta) -> dict:
        """Log density pieces (hint, eta, outcome, prior) per batch row."""
        return self._evaluate(theta, want_grad=False)

    def __call__(self, theta):
        th = np.ascontiguousarray(np.atleast_2d(np.asarray(theta, dtype=float)))
        return ps_density(th, *self._args)

    def reference(self, theta):
        """Vectorised numpy evaluation of ``__call__`` (slower; for checks)."""
        return self._evaluate(theta, want_grad=True)

    def _evaluate(self, theta, want_grad):
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        d = self.data
        k = th.shape[0]
        u = self.unpack(th)
        eta, muU = u["eta"], u["muU"]
        sU = u["sigU"]

        # hints
        if len(self.c_stu):
            ll_h, g_eta, g_delta = logit_cells(np.ascontiguousarray(eta), np.ascontiguousarray(u["delta"]),
                                               self.c_stu, self.c_sec, self.c_hits, self.c_trials, 1.0)
        else:
            ll_h, g_eta, g_delta = np.zeros(k), np.zeros_like(eta), np.zeros_like(u["delta"])

        # proclivity: centred for treatment arm, standard normal raw for control
        rU = (eta[:, self.iT] - muU[:, self.iT]) / sU[:, None]
        ll_eta = -self.nT * np.log(sU) - 0.5 * np.sum(rU ** 2, axis=1) - 0.5 * np.sum(u["etaC_raw"] ** 2, axis=1)

        # outcome
        om = np.where(d.Z[None, :] == 1, u["sigY1"][:, None], u["sigY0"][:, None])
        e = (d.Y[None, :] - u["muY"]) / om
        ll_y = -np.sum(np.log(om), axis=1) - 0.5 * np.sum(e ** 2, axis=1)

        # priors (normal up to constants) and log-scale Jacobians
        coef = np.concatenate([u["betaU"], u["betaY"], u["pairEffect"]], axis=1)
        eff = np.stack([u["a1"], u["b0"], u["b1"]], axis=1)
        raws = np.concatenate([u["tchU_raw"], u["sclU_raw"], u["tchY_raw"], u["sclY_raw"]], axis=1)
        scales = np.exp(u["log_scales"])
        prior = (-0.5 * np.sum((coef / PRIOR_SD_COEF) ** 2, axis=1)
                 - 0.5 * np.sum((eff / PRIOR_SD_EFFECT) ** 2, axis=1)
                 - 0.5 * np.sum(raws ** 2, axis=1)
                 - 0.5 * np.sum((u["delta"] / PRIOR_SD_DELTA) ** 2, axis=1)
                 - 0.5 * np.sum((scales / PRIOR_SD_SCALE) ** 2, axis=1) + np.sum(u["log_scales"], axis=1))
        if not want_grad:
            return {"hint": ll_h, "eta": ll_eta, "outcome": ll_y, "prior": prior}
        lp = ll_h + ll_eta + ll_y + prior
        if not np.all(np.isfinite(lp)):
            bad = ~np.isfinite(lp)
            lp = np.where(bad, -np.inf, lp)

        grad = np.zeros_like(th)
        q = e / om  # d ll_y / d muY
        g_eta = g_eta + q * (u["a1"][:, None] + u["b1"][:, None] * self.Zf)
        g_eta[:, self.iT] -= rU / sU[:, None]
        g_muU = np.zeros_like(eta)
        g_muU[:, self.iT] = rU / sU[:, None]
        g_logsU = np.sum(rU ** 2, axis=1) - self.nT
        # control eta = muU + sigU * raw
        gC = g_eta[:, self.iC]
        g_muU[:, self.iC] += gC
        g_logsU += np.sum(gC * u["etaC_raw"], axis=1) * sU
        grad[:, self.slices["etaT"]] = g_eta[:, self.iT]
        grad[:, self.slices["etaC_raw"]] = gC * sU[:, None] - u["etaC_raw"]
        grad[:, self.slices["delta"]] = g_delta - u["delta"] / PRIOR_SD_DELTA ** 2

        grad[:, self.slices["betaU"]] = g_muU @ d.X - u["betaU"] / PRIOR_SD_COEF ** 2
        grad[:, self.slices["betaY"]] = q @ d.X - u["betaY"] / PRIOR_SD_COEF ** 2
        grad[:, self.slices["a1"]] = (np.sum(q * eta, axis=1) - u["a1"] / PRIOR_SD_EFFECT ** 2)[:, None]
        grad[:, self.slices["b0"]] = (q @ self.Zf - u["b0"] / PRIOR_SD_EFFECT ** 2)[:, None]
        grad[:, self.slices["b1"]] = (np.sum(q * eta * self.Zf, axis=1) - u["b1"] / PRIOR_SD_EFFECT ** 2)[:, None]
        grad[:, self.slices["pair"]] = (self.Mp @ q.T).T - u["pairEffect"] / PRIOR_SD_COEF ** 2

        g_scale = np.zeros((k, len(SCALES)))
        g_scale[:, SCALES.index("sigU")] = g_logsU
        for raw, s, M, src in (("tchU_raw", "sigTchU", self.Mt, g_muU), ("sclU_raw", "sigSclU", self.Ms, g_muU),
                               ("tchY_raw", "sigTchY", self.Mt, q), ("sclY_raw", "sigSclY", self.Ms, q)):
            g_eff = (M @ src.T).T
            grad[:, self.slices[raw]] = g_eff * u[s][:, None] - u[raw]
            g_scale[:, SCALES.index(s)] = np.sum(g_eff * u[raw], axis=1) * u[s]
        e2 = e ** 2 - 1
        g_scale[:, SCALES.index("sigY0")] = e2[:, d.Z == 0].sum(axis=1)
        g_scale[:, SCALES.index("sigY1")] = e2[:, d.Z == 1].sum(axis=1)
        g_scale += -(scales / PRIOR_SD_SCALE) ** 2 + 1.0
        grad[:, self.slices["log_scales"]] = g_scale
        return lp, grad

    def target(self) -> TargetDensity:
        return TargetDensity(dim=self.dim, logp_grad=self, constrain=self.transform)


def ps_log_density(theta, data: PSData):
    """Log posterior and gradient at one unconstrained point.

    Raises:
        FloatingPointError: when the log density is not finite.
    """
    tgt = data if isinstance(data, PSTarget) else PSTarget(data)
    lp, g = tgt(np.atleast_2d(theta))
    if not np.isfinite(lp[0]):
        raise FloatingPointError("non-finite log density")
    return float(lp[0]), g[0]


# ---------------------------------------------------------------------------
# fitting


@dataclass
class PSFit:
    draws: PosteriorDraws
    data: PSData
    valid: bool
    flags: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def flat(self, name) -> np.ndarray:
        x = self.draws[name]
        return x.reshape(self.draws.n_chains * self.draws.n_iters, *x.shape[2:])

    def summary(self) -> dict:
        out = {"valid": self.valid, "flags": list(self.flags), "diagnostics": self.diagnostics}
        if self.valid:
            tab = self.draws.summary(STRUCTURAL).set_index("parameter")
            out["parameters"] = {i: {c: None if pd.isna(v) else float(v) for c, v in r.items()}
                                 for i, r in tab.iterrows()}
        return out


def _initial_point(tgt: PSTarget) -> np.ndarray:
    d = tgt.data
    n_obs = np.bincount(tgt.c_stu, weights=tgt.c_trials, minlength=d.n)
    n_hit = np.bincount(tgt.c_stu, weights=tgt.c_hits, minlength=d.n)
    eta = np.log((n_hit + 0.5) / (n_obs - n_hit + 0.5))
    centre = eta[tgt.iT].mean() if tgt.nT else 0.0
    eta = np.where(d.Z == 1, eta - centre, 0.0)
    sd = float(np.std(eta[tgt.iT])) if tgt.nT > 1 else 1.0
    delta = np.zeros(tgt.S)
    if tgt.S:
        s_obs = np.bincount(tgt.c_sec, weights=tgt.c_trials, minlength=tgt.S)
        s_hit = np.bincount(tgt.c_sec, weights=tgt.c_hits, minlength=tgt.S)
        delta = np.log((s_hit + 0.5) / (s_obs - s_hit + 0.5))
    ysd = float(np.std(d.Y)) or 1.0
    return tgt.pack(eta=eta, delta=delta, sigU=max(sd, 0.1), sigY=(ysd, ysd), sigTchU=0.3, sigSclU=0.3,
                    sigTchY=0.3, sigSclY=0.3)


def fit_ps(data: PSData, sampler_config: Optional[SamplerConfig] = None) -> PSFit:
    """Sample the PS posterior.

    The fit is valid when R-hat < 1.01 for ``a1, b0, b1`` and every scale
    and the divergence rate is at most 5%; otherwise summaries are
    suppressed.

    Args:
        data: PSData with both arms and treatment-arm hint records.
        sampler_config: HMC settings (default ``PS_SAMPLER``: 4 chains of
            1000 warmup + 2000 draws).

    Returns:
        PSFit.
    """
    if not (np.any(data.Z == 1) and np.any(data.Z == 0)):
        raise PSDataError("both arms must be present")
    if len(data.hint) == 0:
        raise PSDataError("the treatment arm has no hint records")
    cfg = sampler_config or PS_SAMPLER
    tgt = PSTarget(data)
    cfg = replace(cfg, init_radius=min(cfg.init_radius, 0.5))
    draws = hmc_sample(tgt.target(), cfg, init=_initial_point(tgt))
    ok, worst = diagnostics_ok(draws, STRUCTURAL)
    flags = []
    if not ok:
        bad = sorted(k for k, v in worst.items() if v is not None and v >= 1.01)
        flags.append("R-hat above 1.01 for " + ", ".join(bad))
    if draws.divergence_rate > MAX_DIVERGENCE_RATE:
        flags.append(f"divergence rate {draws.divergence_rate:.3f} exceeds {MAX_DIVERGENCE_RATE}")
    diag = {"rhat_max": worst, "divergence_rate": draws.divergence_rate,
            "step_size": draws.step_size.tolist()}
    if flags:
        log.warning("PS fit flagged: %s", "; ".join(flags))
    return PSFit(draws, data, not flags, flags, diag)


def _require_valid(fit):
    if isinstance(fit, PSFit) and not fit.valid:
        raise ValueError("PS fit failed its diagnostics: " + "; ".join(fit.flags))


# ---------------------------------------------------------------------------
# principal effects


@dataclass
class PrincipalEffectCurve:
    grid: np.ndarray
    draws: np.ndarray  # (n_draws, len(grid))
    mean: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    p_b1_positive: float
    b1_hdi: tuple

    def to_frame(self) -> pd.DataFrame:
        q = np.quantile(self.draws, [0.025, 0.975], axis=0)
        return pd.DataFrame({"r": self.grid, "tau_mean": self.mean, "tau_q025": q[0], "tau_q975": q[1]})

    def to_json(self, path) -> None:
        data = {"grid": self.grid.tolist(), "mean": self.mean.tolist(), "p_b1_positive": self.p_b1_positive,
                "b1_hdi": list(self.b1_hdi), "b1_mean": float(self.b1.mean()), "b0_mean": float(self.b0.mean())}
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2)


def default_grid(fit: PSFit, n: int = 41) -> np.ndarray:
    eta_mean = fit.flat("eta").mean(axis=0)
    lo, hi = np.quantile(eta_mean, [0.025, 0.975])
    return np.linspace(lo, hi, n)


def principal_effect_curve(fit, r_grid=None) -> PrincipalEffectCurve:
    """Draw-wise ``tau(r) = b0 + b1 r`` with slope summaries.

    Args:
        fit: a valid PSFit (or any object with ``flat("b0")`` and
            ``flat("b1")`` when ``r_grid`` is given).
        r_grid: evaluation points; default is 41 points over the central
            95% of posterior-mean eta.

    Returns:
        PrincipalEffectCurve.
    """
    _require_valid(fit)
    grid = default_grid(fit) if r_grid is None else np.asarray(r_grid, dtype=float)
    b0 = np.asarray(fit.flat("b0"), dtype=float).ravel()
    b1 = np.asarray(fit.flat("b1"), dtype=float).ravel()
    curves = b0[:, None] + b1[:, None] * grid[None, :]
    return PrincipalEffectCurve(grid, curves, curves.mean(axis=0), b0, b1, float(np.mean(b1 > 0)),
                                hdi(b1, 0.95))


# ---------------------------------------------------------------------------
# diagnostics


def _group_mask(data: PSData, group: str) -> np.ndarray:
    if group == "pooled":
        return np.ones(data.n, dtype=bool)
    if group == "treatment":
        return data.Z == 1
    if group == "control":
        return data.Z == 0
    raise ValueError(f"group must be pooled, treatment or control, got {group!r}")


def kde_bandwidth(y) -> float:
    """Silverman's rule of thumb."""
    y = np.asarray(y, dtype=float)
    iqr = np.subtract(*np.quantile(y, [0.75, 0.25]))
    s = min(np.std(y, ddof=1), iqr / 1.349) if iqr > 0 else np.std(y, ddof=1)
    return float(0.9 * s * len(y) ** (-0.2))


def kde(y, grid, bw) -> np.ndarray:
    """Gaussian kernel density of the rows of ``y`` (m, n) on ``grid``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    out = np.empty((y.shape[0], len(grid)))
    for a in range(0, y.shape[0], 64):
        blk = y[a:a + 64]
        z = (grid[None, None, :] - blk[:, :, None]) / bw
        out[a:a + 64] = np.exp(-0.5 * z * z).sum(axis=1) / (blk.shape[1] * bw * math.sqrt(2 * math.pi))
    return out


@dataclass
class PPCDensity:
    group: str
    grid: np.ndarray
    observed: np.ndarray
    replicates: np.ndarray  # (n_rep, len(grid))
    bandwidth: float

    @property
    def envelope(self):
        return self.replicates.min(axis=0), self.replicates.max(axis=0)

    def coverage(self) -> float:
        lo, hi = self.envelope
        return float(np.mean((self.observed >= lo) & (self.observed <= hi)))

    def to_frame(self) -> pd.DataFrame:
        lo, hi = self.envelope
        return pd.DataFrame({"y": self.grid, "observed": self.observed, "rep_min": lo, "rep_max": hi,
                             "rep_mean": self.replicates.mean(axis=0)})


def _pick_draws(fit: PSFit, m: int, seed: int) -> np.ndarray:
    total = fit.draws.n_chains * fit.draws.n_iters
    rng = np.random.default_rng(seed)
    return rng.choice(total, size=m, replace=m > total)


def _mean_component(fit: PSFit, rows) -> np.ndarray:
    """muY per selected draw (m, n) from the stored constrained draws."""
    d = fit.data
    f = {k: fit.flat(k)[rows] for k in ("eta", "a1", "b0", "b1", "betaY", "pairEffect", "teacherEffY",
                                         "schoolEffY")}
    return (f["pairEffect"][:, d.pair] + f["teacherEffY"][:, d.teacher] + f["schoolEffY"][:, d.school]
            + f["a1"][:, None] * f["eta"] + d.Z * (f["b0"][:, None] + f["b1"][:, None] * f["eta"])
            + f["betaY"] @ d.X.T)


def posterior_predict(fit: PSFit, n_rep: int = 1000, seed: int = 0) -> np.ndarray:
    """Replicated outcomes (n_rep, n) from the outcome model."""
    rows = _pick_draws(fit, n_rep, seed)
    mu = _mean_component(fit, rows)
    sig = fit.flat("sigY")[rows][:, fit.data.Z]
    rng = np.random.default_rng(seed + 1)
    return mu + sig * rng.standard_normal(mu.shape)


def ppc_density(fit: PSFit, group: str = "pooled", n_rep: int = 1000, seed: int = 0,
                grid: Optional[np.ndarray] = None, bandwidth: Optional[float] = None) -> PPCDensity:
    """Observed-outcome density against replicated densities.

    One bandwidth (Silverman on the pooled observed outcomes) is shared by
    every curve and group so densities of the arms mix into the pooled one.

    Args:
        fit: valid PSFit.
        group: pooled, treatment or control.
        n_rep: number of replicated data sets.
        seed: RNG seed for draw selection and simulation.
        grid: evaluation points (default: 256 over the observed range
            padded by three bandwidths).
        bandwidth: kernel SD override.

    Returns:
        PPCDensity.
    """
    _require_valid(fit)
    d = fit.data
    mask = _group_mask(d, group)
    bw = bandwidth or kde_bandwidth(d.Y)
    if grid is None:
        grid = np.linspace(d.Y.min() - 3 * bw, d.Y.max() + 3 * bw, 256)
    yrep = posterior_predict(fit, n_rep, seed)[:, mask]
    return PPCDensity(group, grid, kde(d.Y[mask], grid, bw)[0], kde(yrep, grid, bw), bw)


def residual_table(fit: PSFit, group: str = "pooled") -> pd.DataFrame:
    """Posterior-mean fitted values of the outcome mean and residuals."""
    _require_valid(fit)
    d = fit.data
    total = fit.draws.n_chains * fit.draws.n_iters
    acc = np.zeros(d.n)
    for a in range(0, total, 500):
        acc += _mean_component(fit, np.arange(a, min(a + 500, total))).sum(axis=0)
    fitted = acc / total
    mask = _group_mask(d, group)
    return pd.DataFrame({"student_id": np.asarray(d.student_ids)[mask], "Z": d.Z[mask], "fitted": fitted[mask],
                         "residual": d.Y[mask] - fitted[mask]})


def binned_residual_table(p_pred, hint, n_bins: int = 20) -> pd.DataFrame:
    """Bin records by predicted probability into equal-count bins.

    Returns:
        DataFrame with ``bin, p_mean, residual, n, se`` where residual is
        observed proportion minus mean prediction and ``se`` the binomial
        standard error of the bin mean.
    """
    p = np.asarray(p_pred, dtype=float)
    y = np.asarray(hint, dtype=float)
    if p.size == 0:
        raise ValueError("no hint records")
    order = np.argsort(p, kind="stable")
    bins = [b for b in np.array_split(order, min(n_bins, p.size)) if b.size]
    rows = []
    for j, b in enumerate(bins):
        pm = p[b].mean()
        rows.append((j, pm, y[b].mean() - pm, b.size, math.sqrt(max(pm * (1 - pm), 1e-12) / b.size)))
    return pd.DataFrame(rows, columns=["bin", "p_mean", "residual", "n", "se"])


def binned_residuals(fit: PSFit, n_bins: int = 20, n_draws: int = 9, seed: int = 0) -> pd.DataFrame:
    """Binned hint-model residuals for ``n_draws`` random posterior draws."""
    _require_valid(fit)
    d = fit.data
    rows = _pick_draws(fit, n_draws, seed)
    eta = fit.flat("eta")[rows]
    delta = fit.flat("delta")[rows]
    parts = []
    for j in range(n_draws):
        p = expit(delta[j, d.h_section] + eta[j, d.h_student])
        t = binned_residual_table(p, d.hint, n_bins)
        t.insert(0, "draw", int(rows[j]))
        parts.append(t)
    return pd.concat(parts, ignore_index=True)


# ---------------------------------------------------------------------------
# fake-data harness


def parse_effect(spec) -> tuple:
    """Normalise an effect spec: ``"none"``, ``("linear", b0, b1)`` or
    strings such as ``"quadratic(0.1, 0, -0.05)"``."""
    if isinstance(spec, str):
        s = spec.strip()
        if "(" in s:
            name, args = s.split("(", 1)
            vals = [float(v) for v in args.rstrip(")").split(",") if v.strip()]
            return (name.strip(), *vals)
        return (s,)
    return tuple(spec)


def planted_effect(spec, eta, rng) -> np.ndarray:
    kind, *args = parse_effect(spec)
    eta = np.asarray(eta, dtype=float)
    if kind == "none":
        return np.zeros_like(eta)
    if kind == "random":
        mu, sd = (list(args) + [0.0, 0.2][len(args):])[:2]
        return mu + sd * rng.standard_normal(eta.shape)
    if kind == "linear":
        b0, b1 = args
        return b0 + b1 * eta
    if kind == "quadratic":
        c0, c1, c2 = args
        return c0 + c1 * eta + c2 * eta ** 2
    raise ValueError(f"unknown effect spec {spec!r}")


def fake_data_duplicate(treatment_arm: PSData, effect_spec="none", seed: int = 0, eta=None):
    """Duplicate the treatment arm as its own control group.

    Every treatment-arm student appears twice: once as treatment (keeping
    the hint records, with the planted effect added to Y) and once as
    control (no hint records; teachers and schools relabelled to fresh
    ids).  Both copies keep their randomization pair.

    Args:
        treatment_arm: PSData; only its treatment-arm rows are used.
        effect_spec: none, random(mu, sd), linear(b0, b1) or
            quadratic(c0, c1, c2) in terms of eta.
        seed: RNG seed for the random effect spec.
        eta: per-student eta used for the planted effect (aligned with
            the treatment rows). Defaults to centred empirical logits of
            the hint rates.

    Returns:
        (PSData, truth) where truth holds the spec and per-student tau.
    """
    d = treatment_arm
    iT = np.flatnonzero(d.Z == 1)
    if len(iT) == 0:
        raise PSDataError("treatment arm is empty")
    n = len(iT)
    remap = -np.ones(d.n, dtype=int)
    remap[iT] = np.arange(n)
    keep_h = remap[d.h_student] >= 0
    h_stu = remap[d.h_student[keep_h]]
    if eta is None:
        trials = np.bincount(h_stu, minlength=n).astype(float)
        hits = np.bincount(h_stu, weights=d.hint[keep_h], minlength=n)
        eta = np.log((hits + 0.5) / (trials - hits + 0.5))
        eta = eta - eta.mean()
    eta = np.asarray(eta, dtype=float)
    tau = planted_effect(effect_spec, eta, np.random.default_rng(seed))
    t_codes, t_lab = pd.factorize(np.asarray(d.teacher_ids, dtype=object)[d.teacher[iT]], sort=True)
    s_codes, s_lab = pd.factorize(np.asarray(d.school_ids, dtype=object)[d.school[iT]], sort=True)
    p_codes, p_lab = pd.factorize(np.asarray(d.pair_ids, dtype=object)[d.pair[iT]], sort=True)
    ids = [str(d.student_ids[i]) for i in iT]
    new = PSData(
        student_ids=[f"{i}:T" for i in ids] + [f"{i}:C" for i in ids],
        Z=np.r_[np.ones(n, int), np.zeros(n, int)],
        Y=np.r_[d.Y[iT] + tau, d.Y[iT]],
        X=np.vstack([d.X[iT], d.X[iT]]),
        x_names=list(d.x_names),
        teacher=np.r_[t_codes, t_codes + len(t_lab)],
        school=np.r_[s_codes, s_codes + len(s_lab)],
        pair=np.r_[p_codes, p_codes],
        h_student=h_stu,
        h_section=d.h_section[keep_h],
        hint=d.hint[keep_h],
        section_ids=list(d.section_ids),
        teacher_ids=[str(t) for t in t_lab] + [f"{t}:C" for t in t_lab],
        school_ids=[str(s) for s in s_lab] + [f"{s}:C" for s in s_lab],
        pair_ids=[str(p) for p in p_lab],
    )
    truth = {"effect": parse_effect(effect_spec), "tau": tau, "eta": eta}
    kind = truth["effect"][0]
    if kind == "linear":
        truth["b0"], truth["b1"] = truth["effect"][1:]
    elif kind == "none":
        truth["b0"], truth["b1"] = 0.0, 0.0
    return new, truth


# ---------------------------------------------------------------------------
# simulation from the model


@dataclass
class PSTruth:
    b0: float = 0.2
    b1: float = 0.1
    a1: float = -0.3
    sigU: float = 0.8
    sigTchU: float = 0.2
    sigSclU: float = 0.3
    sigTchY: float = 0.15
    sigSclY: float = 0.25
    sigY: tuple = (0.6, 0.7)
    betaU: tuple = (-0.8, 0.3, -0.2, 0.1)
    betaY: tuple = (0.5, 0.1, 0.1, -0.05)
    pair_sd: float = 0.3
    delta_mean: float = -0.5
    delta_sd: float = 1.0


def simulate_ps_data(n_schools: int = 40, students_per_school: int = 30, teachers_per_school: int = 2,
                     n_sections: int = 20, sections_per_student: int = 10, problems_per_section: float = 3.0,
                     truth: Optional[PSTruth] = None, seed: int = 0, outcome_floor: Optional[float] = None):
    """Generate PSData from the model itself.

    Schools come in pairs with one school per arm.  Covariates are a
    standard normal pretest and two binary indicators; the design adds the
    pretest square and standardizes.  ``outcome_floor`` drops outcomes
    below the floor (left truncation) to plant a known misfit.

    Returns:
        (PSData, dict of true parameter values including eta).
    """
    if n_schools < 2:
        raise ValueError("need at least 2 schools")
    t = truth or PSTruth()
    rng = np.random.default_rng(seed)
    n = n_schools * students_per_school
    school = np.repeat(np.arange(n_schools), students_per_school)
    teacher = school * teachers_per_school + rng.integers(0, teachers_per_school, n)
    pair = school // 2
    z_school = np.zeros(n_schools, dtype=int)
    for p in range(int(math.ceil(n_schools / 2))):
        members = np.arange(2 * p, min(2 * p + 2, n_schools))
        z_school[members] = rng.permutation(np.arange(len(members)) % 2)
    Z = z_school[school]
    pre = rng.standard_normal(n)
    raw = np.column_stack([pre, rng.uniform(size=n) < 0.4, rng.uniform(size=n) < 0.2, pre ** 2]).astype(float)
    X = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    n_t = teachers_per_school * n_schools
    tchU = rng.normal(0, t.sigTchU, n_t)
    sclU = rng.normal(0, t.sigSclU, n_schools)
    eta = tchU[teacher] + sclU[school] + X @ np.asarray(t.betaU) + rng.normal(0, t.sigU, n)
    delta = rng.normal(t.delta_mean, t.delta_sd, n_sections)
    tchY = rng.normal(0, t.sigTchY, n_t)
    sclY = rng.normal(0, t.sigSclY, n_schools)
    n_pair = pair.max() + 1
    pairEff = rng.normal(0, t.pair_sd, n_pair)
    mu = pairEff[pair] + tchY[teacher] + sclY[school] + t.a1 * eta + Z * (t.b0 + t.b1 * eta) + X @ np.asarray(t.betaY)
    sig = np.asarray(t.sigY)[Z]
    Y = mu + sig * rng.standard_normal(n)
    keep = np.ones(n, dtype=bool) if outcome_floor is None else Y >= outcome_floor
    h_stu, h_sec = [], []
    for i in np.flatnonzero((Z == 1) & keep):
        secs = rng.choice(n_sections, size=min(sections_per_student, n_sections), replace=False)
        for s in secs:
            k = 1 + rng.poisson(problems_per_section - 1) if problems_per_section > 1 else 1
            h_stu.extend([i] * k)
            h_sec.extend([s] * k)
    h_stu, h_sec = np.asarray(h_stu, dtype=int), np.asarray(h_sec, dtype=int)
    hint = (rng.uniform(size=h_stu.size) < expit(delta[h_sec] + eta[h_stu])).astype(float)
    # reindex to the kept students
    new_idx = -np.ones(n, dtype=int)
    new_idx[keep] = np.arange(keep.sum())
    data = PSData(
        student_ids=[f"st{i:05d}" for i in np.flatnonzero(keep)], Z=Z[keep], Y=Y[keep], X=X[keep],
        x_names=["pretest", "x2", "x3", "pretest^2"], teacher=teacher[keep], school=school[keep], pair=pair[keep],
        h_student=new_idx[h_stu], h_section=h_sec, hint=hint, section_ids=[f"sec{j:03d}" for j in range(n_sections)],
        teacher_ids=[f"t{j:04d}" for j in range(n_t)], school_ids=[f"sc{j:03d}" for j in range(n_schools)],
        pair_ids=[f"p{j:03d}" for j in range(n_pair)])
    true = {"b0": t.b0, "b1": t.b1, "a1": t.a1, "eta": eta[keep], "delta": delta, "sigU": t.sigU,
            "sigY": t.sigY, "betaU": np.asarray(t.betaU), "betaY": np.asarray(t.betaY),
            "teacherEffU": tchU, "schoolEffU": sclU, "teacherEffY": tchY, "schoolEffY": sclY, "pairEffect": pairEff,
            "sigTchU": t.sigTchU, "sigSclU": t.sigSclU, "sigTchY": t.sigTchY, "sigSclY": t.sigSclY}
    return data, true
