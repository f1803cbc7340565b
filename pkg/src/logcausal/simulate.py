"""Synthetic trial data with known truth, written in the ingest file formats."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from .core_data import LOG_COLUMNS, STUDENT_COLUMNS


@dataclass
class TruthConfig:
    """Generating values.

    Hint proclivity is a two-class mixture: the class is drawn with a
    logistic dependence on the pretest (so it is predictable from
    covariates), and within class ``eta = mu_c + school + teacher + sigma
    * e``.  The class means satisfy ``p0 mu0 + p1 mu1 = 0``.  Outcomes
    follow ``pair + school + teacher + beta_y pretest + a1 eta + Z (b0 +
    b1 eta + h_effect * high) + omega_Z e``.
    """

    n_schools: int = 10
    students_per_school: int = 20
    teachers_per_school: int = 2
    n_states: int = 2
    n_sections: int = 12
    problems_per_section: int = 4
    challenge_rate: float = 0.6
    p0: float = 0.7
    mu0: float = -1.0
    sigma_eta: float = 0.6
    pretest_class_slope: float = 0.8
    sd_school_eta: float = 0.2
    sd_teacher_eta: float = 0.1
    delta_sd: float = 0.8
    b0: float = 0.2
    b1: float = 0.1
    a1: float = -0.2
    h_effect: float = 0.0
    beta_pretest: float = 0.6
    sd_pair: float = 0.3
    sd_school_y: float = 0.2
    sd_teacher_y: float = 0.1
    sigma_y: tuple = (0.6, 0.7)
    missing_rate: float = 0.05
    missing_y_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_schools < 2:
            raise ValueError("need at least 2 schools")
        if self.students_per_school < 2 or self.teachers_per_school < 1:
            raise ValueError("need at least 2 students and 1 teacher per school")
        if not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        if self.mu0 >= 0:
            raise ValueError("mu0 must be negative")
        bad = [k for k in ("sigma_eta", "delta_sd") if not getattr(self, k) > 0]
        if bad:
            raise ValueError(f"scales must be positive: {bad}")
        if len(self.sigma_y) != 2:
            raise ValueError("sigma_y needs one scale per arm")
        # outcome noise may be switched off entirely
        nonneg = {k: getattr(self, k) for k in ("sd_school_eta", "sd_teacher_eta", "sd_pair", "sd_school_y",
                                                 "sd_teacher_y")}
        nonneg.update({"sigma_y[0]": self.sigma_y[0], "sigma_y[1]": self.sigma_y[1]})
        bad = [k for k, v in nonneg.items() if not v >= 0]
        if bad:
            raise ValueError(f"scales must be non-negative: {bad}")

    @property
    def mu1(self) -> float:
        return -self.p0 / (1 - self.p0) * self.mu0


@dataclass
class SimulatedDataset:
    students: pd.DataFrame
    log: pd.DataFrame
    truth: pd.DataFrame  # per student: eta, high, tau
    config: TruthConfig
    paths: dict = field(default_factory=dict)


def _blocks(n_schools, rng):
    # pairs of schools; an odd count leaves one block of three
    n_blocks = n_schools // 2
    block = np.repeat(np.arange(n_blocks), 2)
    if n_schools % 2:
        block = np.r_[block, n_blocks - 1]
    z = np.zeros(n_schools, dtype=int)
    for b in range(n_blocks):
        members = np.flatnonzero(block == b)
        arms = np.r_[1, 0, rng.integers(0, 2, len(members) - 2)]
        z[members] = rng.permutation(arms)
    return block, z


def _class_intercept(p1, slope, rng, n=200_000):
    # intercept giving marginal P(high) = p1 for a standard normal pretest
    x = rng.standard_normal(n)
    lo, hi = -10.0, 10.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expit(mid + slope * x).mean() < p1:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def simulate_dataset(cfg: Optional[TruthConfig] = None, out_dir=None, **overrides) -> SimulatedDataset:
    """Generate students, worked-problem logs and the truth record.

    Args:
        cfg: generating values (keyword overrides are applied on top).
        out_dir: when given, ``students.csv``, ``log.csv``,
            ``truth_students.csv`` and ``truth.json`` are written there.

    Returns:
        SimulatedDataset.
    """
    cfg = cfg or TruthConfig()
    if overrides:
        cfg = TruthConfig(**{**asdict(cfg), **overrides})
    rng = np.random.default_rng(cfg.seed)
    S, m = cfg.n_schools, cfg.students_per_school
    n = S * m
    block_of_school, z_school = _blocks(S, rng)
    state_of_school = np.arange(S) % cfg.n_states
    school = np.repeat(np.arange(S), m)
    teacher = school * cfg.teachers_per_school + rng.integers(0, cfg.teachers_per_school, n)
    Z = z_school[school]

    pretest = rng.standard_normal(n)
    cov = pd.DataFrame({
        "grade": rng.choice(["6", "7", "8"], n),
        "ell": rng.choice(["0", "1"], n, p=[0.85, 0.15]),
        "frl": rng.choice(["0", "1"], n, p=[0.5, 0.5]),
        "ethnicity": rng.choice(["asian", "black", "hispanic", "white"], n, p=[0.1, 0.2, 0.3, 0.4]),
        "sex": rng.choice(["F", "M"], n),
        "sped": rng.choice(["0", "1"], n, p=[0.9, 0.1]),
    })

    alpha = _class_intercept(1 - cfg.p0, cfg.pretest_class_slope, np.random.default_rng(cfg.seed + 1))
    high = rng.uniform(size=n) < expit(alpha + cfg.pretest_class_slope * pretest)
    n_teach = S * cfg.teachers_per_school
    eta = (np.where(high, cfg.mu1, cfg.mu0) + rng.normal(0, cfg.sd_school_eta, S)[school]
           + rng.normal(0, cfg.sd_teacher_eta, n_teach)[teacher] + rng.normal(0, cfg.sigma_eta, n))

    tau = cfg.b0 + cfg.b1 * eta + cfg.h_effect * high
    n_blocks = block_of_school.max() + 1
    y = (rng.normal(0, cfg.sd_pair, n_blocks)[block_of_school[school]] + rng.normal(0, cfg.sd_school_y, S)[school]
         + rng.normal(0, cfg.sd_teacher_y, n_teach)[teacher] + cfg.beta_pretest * pretest + cfg.a1 * eta
         + Z * tau + np.asarray(cfg.sigma_y)[Z] * rng.standard_normal(n))

    ids = [f"st{i:05d}" for i in range(n)]
    students = pd.DataFrame({
        "student_id": ids, "z": Z, "y": y,
        "block_id": [f"b{b:03d}" for b in block_of_school[school]],
        "school_id": [f"sc{s:03d}" for s in school],
        "teacher_id": [f"t{t:04d}" for t in teacher],
        "class_id": [f"c{t:04d}" for t in teacher],
        "state_id": [f"state{s}" for s in state_of_school[school]],
    })
    students = pd.concat([students, cov], axis=1)
    students["pretest"] = pretest
    for c in ("grade", "ethnicity", "sex", "frl"):
        students.loc[rng.uniform(size=n) < cfg.missing_rate, c] = np.nan
    students.loc[rng.uniform(size=n) < cfg.missing_y_rate, "y"] = np.nan
    students = students[STUDENT_COLUMNS]

    delta = rng.normal(0, cfg.delta_sd, cfg.n_sections)
    rows = []
    for i in np.flatnonzero(Z == 1):
        for s in range(cfg.n_sections):
            for j in range(cfg.problems_per_section):
                n_h = n_e = 0
                if rng.uniform() < cfg.challenge_rate:
                    if rng.uniform() < expit(eta[i] - delta[s]):
                        n_h = 1 + int(rng.poisson(0.5))
                        n_e = int(rng.poisson(0.5))
                    else:
                        n_e = 1 + int(rng.poisson(0.3))
                rows.append((ids[i], f"sec{s:02d}_p{j}", f"sec{s:02d}", n_h, n_e, ""))
    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    truth = pd.DataFrame({"student_id": ids, "eta": eta, "high": high.astype(int), "tau": tau})

    out = SimulatedDataset(students, log, truth, cfg)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        paths = {k: os.path.join(out_dir, f) for k, f in
                 (("students", "students.csv"), ("log", "log.csv"), ("truth_students", "truth_students.csv"),
                  ("truth", "truth.json"))}
        students.to_csv(paths["students"], index=False, float_format="%.17g")
        log.to_csv(paths["log"], index=False)
        truth.to_csv(paths["truth_students"], index=False, float_format="%.17g")
        record = asdict(cfg)
        record.update({"mu1": cfg.mu1, "class_intercept": alpha, "delta": delta.tolist(),
                       "p_high_realized": float(high.mean())})
        with open(paths["truth"], "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
        out.paths = paths
    return out


def truth_config_from_dict(d: dict) -> TruthConfig:
    fields = TruthConfig.__dataclass_fields__
    kw = {}
    for k, v in d.items():
        if k not in fields:
            raise ValueError(f"unknown truth parameter {k!r}")
        default = fields[k].default
        if isinstance(default, tuple):
            kw[k] = tuple(float(x) for x in (v.split(",") if isinstance(v, str) else v))
        elif isinstance(default, bool):
            kw[k] = str(v).lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kw[k] = int(v)
        elif isinstance(default, float):
            kw[k] = float(v)
        else:
            kw[k] = v
    return TruthConfig(**kw)
