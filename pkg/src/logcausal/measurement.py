"""Hint-rate statistic, Rasch mixture model and the high/low hint split."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from ._kernels import logit_cells
from .sampler import PosteriorDraws, SamplerConfig, TargetDensity, diagnostics_ok, hmc_sample

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2 * np.pi)
MAX_DIVERGENCE_RATE = 0.05
RASCH_SAMPLER = SamplerConfig(chains=4, warmup=1000, iters=2000, warmup_max_treedepth=6)


@dataclass(frozen=True)
class ChallengeRecord:
    student_id: str
    problem_id: str
    section_id: str
    hint_requested: int


def challenge_filter(problems: pd.DataFrame) -> pd.DataFrame:
    """Keep problems on which the student asked for a hint or erred.

    Returns a frame with columns ``student_id, problem_id, section_id,
    hint_requested``.
    """
    keep = (problems["n_hints"] > 0) | (problems["n_errors"] > 0)
    out = problems.loc[keep, ["student_id", "problem_id", "section_id"]].copy()
    out["hint_requested"] = (problems.loc[keep, "n_hints"] > 0).astype(int).to_numpy()
    return out.reset_index(drop=True)


def hint_rate(records) -> float:
    """Share of one student's challenge problems on which a hint was requested.

    Args:
        records: ``hint_requested`` flags, or a frame/iterable of
            :class:`ChallengeRecord` for a single student.

    Raises:
        ValueError: when there are no challenge problems.
    """
    if isinstance(records, pd.DataFrame):
        h = records["hint_requested"].to_numpy()
    else:
        h = np.array([r.hint_requested if isinstance(r, ChallengeRecord) else r for r in records])
    if h.size == 0:
        raise ValueError("hint rate is undefined without challenge problems")
    n_hint = int(np.sum(h == 1))
    n_error_only = int(h.size - n_hint)
    if n_hint == 0:
        return 0.0
    return 1.0 / (1.0 + n_error_only / n_hint)


def hint_rates(challenges: pd.DataFrame) -> pd.Series:
    """``hbar`` per student, indexed by ``student_id``."""
    return challenges.groupby("student_id")["hint_requested"].mean().rename("hbar")


# ---------------------------------------------------------------------------
# Rasch mixture target


class _Householder:
    """Reflection sending ``e_1`` to the normalised ones vector.

    Applied to ``(eta, delta)`` it turns the common shift, which the
    Rasch likelihood cannot see, into the single first coordinate so a
    diagonal metric can scale it.
    """

    def __init__(self, size):
        u = np.full(size, 1 / np.sqrt(size))
        self.v = -u
        self.v[0] += 1.0
        vv = self.v @ self.v
        self.scale = 2.0 / vv if vv > 0 else 0.0

    def __call__(self, x):
        return x - self.scale * (x @ self.v)[:, None] * self.v


class RaschMixtureTarget:
    """Unnormalised log posterior of the two-component Rasch mixture.

    The logit of a hint request is ``eta - delta`` and
    ``mu1 = -(1 - p1) / p1 * mu0`` pins the mixture mean at zero.
    Unconstrained layout: ``w[n + S], logit(p1), log(-mu0), log(sigma0),
    log(sigma1)`` with ``(eta, delta) = R w`` for an orthogonal reflection
    ``R``.  Records sharing a (student, section) cell are pooled into
    binomial counts, which leaves the likelihood unchanged.
    """

    def __init__(self, student_idx, section_idx, hint, n_students, n_sections):
        stu = np.asarray(student_idx, dtype=np.int64)
        sec = np.asarray(section_idx, dtype=np.int64)
        y = np.asarray(hint, dtype=float)
        self.n, self.S = int(n_students), int(n_sections)
        if stu.size and (stu.max() >= self.n or sec.max() >= self.S or min(stu.min(), sec.min()) < 0):
            raise IndexError("student or section index out of range")
        cell = stu * self.S + sec
        cells, inv = np.unique(cell, return_inverse=True)
        self.stu, self.sec = cells // self.S, cells % self.S
        self.trials = np.bincount(inv, minlength=cells.size).astype(float)
        self.hits = np.bincount(inv, weights=y, minlength=cells.size)
        self.R = _Householder(self.n + self.S)
        self.dim = self.n + self.S + 4

    def unpack(self, theta):
        n, S = self.n, self.S
        ed = self.R(theta[:, :n + S])
        v, u, s0, s1 = (theta[:, n + S + j] for j in range(4))
        return ed[:, :n], ed[:, n:], v, u, s0, s1

    def pack(self, eta, delta, p1=0.5, mu0=-1.0, sigma=(1.0, 1.0)):
        """Unconstrained point for the given constrained values."""
        w = self.R(np.concatenate([eta, delta])[None])[0]
        return np.concatenate([w, [np.log(p1 / (1 - p1)), np.log(-mu0), np.log(sigma[0]), np.log(sigma[1])]])

    def transform(self, theta):
        eta, delta, v, u, s0, s1 = self.unpack(np.atleast_2d(theta))
        p1 = expit(v)
        mu0 = -np.exp(u)
        mu1 = -(1 - p1) / p1 * mu0
        return {"eta": eta, "delta": delta, "p1": p1, "p0": 1 - p1, "mu0": mu0, "mu1": mu1,
                "sigma": np.stack([np.exp(s0), np.exp(s1)], axis=1)}

    def responsibilities(self, eta, p1, mu0, mu1, sigma):
        """Per-draw posterior probability of the high component, ``(k, n)``."""
        a0 = np.log1p(-p1)[:, None] - 0.5 * ((eta - mu0[:, None]) / sigma[:, :1]) ** 2 - np.log(sigma[:, :1])
        a1 = np.log(p1)[:, None] - 0.5 * ((eta - mu1[:, None]) / sigma[:, 1:]) ** 2 - np.log(sigma[:, 1:])
        return np.exp(a1 - np.logaddexp(a0, a1))

    def __call__(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        eta, delta, v, u, s0, s1 = self.unpack(theta)
        p1 = expit(v)
        mu0 = -np.exp(u)
        r = (1 - p1) / p1
        mu1 = -r * mu0
        sig0, sig1 = np.exp(s0), np.exp(s1)

        # Rasch likelihood on binomial cell counts
        ll, g_eta, g_delta = logit_cells(np.ascontiguousarray(eta), np.ascontiguousarray(delta),
                                         self.stu, self.sec, self.hits, self.trials, -1.0)

        # mixture on eta
        z0 = (eta - mu0[:, None]) / sig0[:, None]
        z1 = (eta - mu1[:, None]) / sig1[:, None]
        a0 = np.log1p(-p1)[:, None] - 0.5 * z0 ** 2 - s0[:, None] - 0.5 * _LOG_2PI
        a1 = np.log(p1)[:, None] - 0.5 * z1 ** 2 - s1[:, None] - 0.5 * _LOG_2PI
        lse = np.logaddexp(a0, a1)
        w1 = np.exp(a1 - lse)
        w0 = 1 - w1
        lp = ll + lse.sum(axis=1)
        g_eta += -w0 * z0 / sig0[:, None] - w1 * z1 / sig1[:, None]
        d_mu0 = np.sum(w0 * z0, axis=1) / sig0
        d_mu1 = np.sum(w1 * z1, axis=1) / sig1
        d_sig0 = np.sum(w0 * (z0 ** 2 - 1), axis=1) / sig0
        d_sig1 = np.sum(w1 * (z1 ** 2 - 1), axis=1) / sig1
        d_p1 = np.sum(w1 / p1[:, None] - w0 / (1 - p1)[:, None], axis=1)
        # mu1 depends on both mu0 and p1
        d_mu0 = d_mu0 + d_mu1 * (-r)
        d_p1 = d_p1 + d_mu1 * mu0 / p1 ** 2

        # priors and Jacobians
        lp += -0.5 * np.sum((delta / 3.0) ** 2, axis=1)
        g_delta += -delta / 9.0
        lp += -0.5 * (mu0 / 2.0) ** 2 + u
        g_u = d_mu0 * mu0 - mu0 ** 2 / 4.0 + 1.0
        lp += 2 * np.log(p1) + 2 * np.log1p(-p1)
        g_v = d_p1 * p1 * (1 - p1) + 2 - 4 * p1
        lp += -s0 ** 2 / 8.0 - s1 ** 2 / 8.0
        g_s0 = d_sig0 * sig0 - s0 / 4.0
        g_s1 = d_sig1 * sig1 - s1 / 4.0

        g_w = self.R(np.concatenate([g_eta, g_delta], axis=1))  # R is symmetric
        grad = np.concatenate([g_w, np.stack([g_v, g_u, g_s0, g_s1], axis=1)], axis=1)
        return lp, grad

    def target(self) -> TargetDensity:
        return TargetDensity(dim=self.dim, logp_grad=self, constrain=self.transform)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class MixtureFit:
    draws: PosteriorDraws
    student_ids: list
    section_ids: list
    pr_high: pd.Series
    valid: bool
    flags: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def p0_mean(self) -> float:
        return float(self.draws.flat("p0").mean())

    def summary(self) -> dict:
        out = {"valid": self.valid, "flags": list(self.flags), "n_students": len(self.student_ids),
               "n_sections": len(self.section_ids), "diagnostics": self.diagnostics}
        tab = self.draws.summary(["p0", "p1", "mu0", "mu1", "sigma"]).set_index("parameter")
        out["parameters"] = {idx: {k: None if pd.isna(v) else float(v) for k, v in row.items()}
                             for idx, row in tab.iterrows()}
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ma.core.MaskedConstant):
        return None
    raise TypeError(type(o))


def _initial_point(target: RaschMixtureTarget):
    # empirical logits of the students' hint rates
    n_obs = np.bincount(target.stu, weights=target.trials, minlength=target.n)
    n_hint = np.bincount(target.stu, weights=target.hits, minlength=target.n)
    eta = np.log((n_hint + 0.5) / (n_obs - n_hint + 0.5))
    eta -= eta.mean()
    return target.pack(eta, np.zeros(target.S))


def fit_rasch_mixture(challenges: pd.DataFrame, sampler_config: Optional[SamplerConfig] = None) -> MixtureFit:
    """Sample the Rasch mixture posterior for the challenge records.

    The fit is flagged invalid when the divergence rate exceeds 5%, when a
    structural parameter fails the R-hat check, or when some section has
    no variation in its responses (its ``delta`` is then identified by the
    prior alone).

    Args:
        challenges: Output of :func:`challenge_filter`.
        sampler_config: HMC settings; defaults to ``RASCH_SAMPLER`` (4 chains
            of 1000 warmup + 2000 draws).

    Returns:
        MixtureFit with per-student ``pr_high`` (posterior mean mixture
        responsibility of the high component).
    """
    cfg = sampler_config or RASCH_SAMPLER
    stu_codes, stu_ids = pd.factorize(challenges["student_id"], sort=True)
    sec_codes, sec_ids = pd.factorize(challenges["section_id"], sort=True)
    if len(stu_ids) < 2 or len(sec_ids) < 2:
        raise ValueError("need at least 2 students and 2 sections")
    y = challenges["hint_requested"].to_numpy(float)
    flags = []
    per_section = pd.Series(y).groupby(sec_codes).agg(["min", "max"])
    flat = per_section.index[per_section["min"] == per_section["max"]]
    if len(flat):
        flags.append(f"non-identified: {len(flat)} section(s) with identical responses for all students")

    tgt = RaschMixtureTarget(stu_codes, sec_codes, y, len(stu_ids), len(sec_ids))
    draws = hmc_sample(tgt.target(), cfg, init=_initial_point(tgt))

    k, m = draws.n_chains, draws.n_iters
    eta = draws["eta"].reshape(k * m, -1)
    resp = tgt.responsibilities(eta, draws.flat("p1"), draws.flat("mu0"), draws.flat("mu1"),
                                draws["sigma"].reshape(k * m, 2))
    pr_high = pd.Series(resp.mean(axis=0), index=pd.Index(stu_ids, name="student_id"), name="pr_high")

    ok, worst = diagnostics_ok(draws, ["p1", "mu0", "sigma"])
    failing = sorted(k for k, v in worst.items() if v is not None and v >= 1.01)
    if draws.divergence_rate > MAX_DIVERGENCE_RATE:
        flags.append(f"divergence rate {draws.divergence_rate:.3f} exceeds {MAX_DIVERGENCE_RATE}")
    if not ok:
        flags.append("R-hat above 1.01 for " + ", ".join(failing))
    diag = {"divergence_rate": draws.divergence_rate, "rhat_max": worst,
            "step_size": draws.step_size.tolist()}
    valid = not flags
    if not valid:
        log.warning("Rasch mixture fit flagged: %s", "; ".join(flags))
    return MixtureFit(draws, list(stu_ids), list(sec_ids), pr_high, valid, flags, diag)


# ---------------------------------------------------------------------------
# dichotomization


@dataclass
class Dichotomization:
    cutoff: float
    table: pd.DataFrame  # student_id, hbar, H, pr_high
    agreement: float
    p0: float

    @property
    def H(self) -> pd.Series:
        return self.table.set_index("student_id")["H"]

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, p0: float = np.nan, cutoff: float = np.nan) -> "Dichotomization":
        tab = pd.read_csv(path, dtype={"student_id": str})
        agree = float(np.mean(tab["H"] == (tab["pr_high"] > 0.5)))
        return cls(cutoff, tab, agree, p0)


def choose_cutoff(fit, hbar_values: pd.Series, p0: Optional[float] = None) -> Dichotomization:
    """Dichotomize ``hbar`` at its empirical ``p0`` quantile.

    ``p0`` defaults to the posterior mean from ``fit``.  The quantile is
    the linearly interpolated (type 7) one, and ``H = hbar > c`` so ties at
    the cutoff count as low users.  ``agreement`` is the share of students
    whose ``H`` matches the mixture's modal class (``pr_high > 0.5``).
    When ``fit`` is None only ``p0`` is used and agreement is NaN.
    """
    if p0 is None:
        p0 = fit.p0_mean
    hb = hbar_values.astype(float)
    c = float(np.quantile(hb.to_numpy(), p0))
    H = (hb > c).astype(int)
    pr = fit.pr_high.reindex(hb.index) if fit is not None else pd.Series(np.nan, index=hb.index)
    table = pd.DataFrame({"student_id": hb.index.astype(str), "hbar": hb.to_numpy(), "H": H.to_numpy(),
                          "pr_high": pr.to_numpy()})
    agree = float(np.mean(table["H"].to_numpy() == (table["pr_high"].to_numpy() > 0.5))) if fit is not None else np.nan
    return Dichotomization(c, table, agree, float(p0))


# ---------------------------------------------------------------------------
# simulation


def simulate_rasch_mixture(n_students=500, n_sections=30, problems_per_section=3, p1=0.3, mu0=-1.5,
                           sigma=(0.6, 0.6), delta_sd=1.0, seed=0):
    """Challenge records drawn from the mixture model with known truth.

    Returns ``(challenges, truth)``; ``truth`` has ``eta``, ``delta``,
    ``high`` and the scalar parameters.
    """
    rng = np.random.default_rng(seed)
    mu1 = -(1 - p1) / p1 * mu0
    high = rng.uniform(size=n_students) < p1
    eta = np.where(high, rng.normal(mu1, sigma[1], n_students), rng.normal(mu0, sigma[0], n_students))
    delta = rng.normal(0, delta_sd, n_sections)
    stu = np.repeat(np.arange(n_students), n_sections * problems_per_section)
    sec = np.tile(np.repeat(np.arange(n_sections), problems_per_section), n_students)
    y = rng.uniform(size=stu.size) < expit(eta[stu] - delta[sec])
    width = len(str(max(n_students, n_sections)))
    frame = pd.DataFrame({
        "student_id": [f"s{i:0{width}d}" for i in stu],
        "problem_id": [f"p{s:0{width}d}_{j}" for s, j in zip(sec, np.tile(np.arange(problems_per_section), stu.size // problems_per_section))],
        "section_id": [f"sec{s:0{width}d}" for s in sec],
        "hint_requested": y.astype(int),
    })
    truth = {"p1": p1, "p0": 1 - p1, "mu0": mu0, "mu1": mu1, "sigma": tuple(sigma),
             "eta": eta, "delta": delta, "high": high}
    return frame, truth
