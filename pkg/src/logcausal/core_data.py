"""Ingestion, cleaning and covariate balance for the analysis set."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

log = logging.getLogger(__name__)

ID_COLUMNS = ["student_id", "block_id", "school_id", "teacher_id", "class_id", "state_id"]
CATEGORICAL_COVARIATES = ["grade", "ell", "frl", "ethnicity", "sex", "sped"]
CONTINUOUS_COVARIATES = ["pretest"]
COVARIATES = CATEGORICAL_COVARIATES + CONTINUOUS_COVARIATES
STUDENT_COLUMNS = ["student_id", "z", "y"] + ID_COLUMNS[1:] + COVARIATES
LOG_COLUMNS = ["student_id", "problem_id", "section_id", "n_hints", "n_errors", "timestamp"]
# covariate -> name of its missingness indicator column
INDICATED = {"grade": "miss_grade", "ethnicity": "miss_race", "sex": "miss_sex", "frl": "miss_frl"}


class IngestError(ValueError):
    """Input data violates the documented schema or design constraints."""


@dataclass(frozen=True)
class WorkedProblem:
    student_id: str
    problem_id: str
    section_id: str
    n_hints: int
    n_errors: int
    timestamp: Optional[str] = None


@dataclass(frozen=True)
class StudentRecord:
    student_id: str
    z: int
    y: Optional[float]
    block_id: str
    school_id: str
    teacher_id: str
    class_id: str
    state_id: str
    covariates: dict
    missing: dict


@dataclass(frozen=True)
class AnalysisSet:
    """Students, their worked problems and (once imputed) covariates.

    The frames are treated as read-only after construction.
    """

    students: pd.DataFrame
    problems: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=LOG_COLUMNS))
    imputed: Optional[pd.DataFrame] = None
    report: dict = field(default_factory=dict)

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def treated(self) -> pd.DataFrame:
        return self.students[self.students["z"] == 1]

    def records(self):
        for row in self.students.itertuples(index=False):
            r = row._asdict()
            cov = {c: r[c] for c in COVARIATES}
            yield StudentRecord(
                student_id=r["student_id"], z=int(r["z"]), y=None if pd.isna(r["y"]) else float(r["y"]),
                block_id=r["block_id"], school_id=r["school_id"], teacher_id=r["teacher_id"],
                class_id=r["class_id"], state_id=r["state_id"], covariates=cov,
                missing={c: bool(pd.isna(v)) for c, v in cov.items()},
            )

    def worked_problems(self):
        for r in self.problems.itertuples(index=False):
            yield WorkedProblem(r.student_id, r.problem_id, r.section_id, int(r.n_hints), int(r.n_errors),
                                None if pd.isna(r.timestamp) else str(r.timestamp))

    def with_problems(self, problems: pd.DataFrame, report: Optional[dict] = None) -> "AnalysisSet":
        rep = dict(self.report)
        rep.update(report or {})
        return AnalysisSet(self.students, problems, self.imputed, rep)

    def covariate_matrix(self, drop_first: bool = True) -> pd.DataFrame:
        """Numeric design (dummies, pretest, missingness indicators)."""
        if self.imputed is None:
            raise ValueError("covariates have not been imputed")
        return design_matrix(self.imputed, drop_first=drop_first)

    def ingest_report(self) -> dict:
        s = self.students
        rep = {
            "n_students": int(len(s)),
            "n_treated": int((s["z"] == 1).sum()),
            "n_control": int((s["z"] == 0).sum()),
            "n_problems": int(len(self.problems)),
        }
        for col, key in [("block_id", "n_blocks"), ("school_id", "n_schools"), ("teacher_id", "n_teachers"),
                         ("class_id", "n_classes"), ("state_id", "n_states")]:
            if col in s.columns:
                rep[key] = int(s[col].nunique())
        if "y" in s.columns:
            rep["n_missing_y"] = int(s["y"].isna().sum())
        return rep


def _read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])


def _check_nesting(df: pd.DataFrame, inner: str, outer: str):
    n = df.groupby(inner)[outer].nunique()
    bad = n[n > 1]
    if len(bad):
        raise IngestError(f"{inner} {bad.index[0]!r} is associated with more than one {outer}")


def _exact_float(col: pd.Series, name: str) -> pd.Series:
    # float() parses decimal strings exactly; pandas' fast parser can be off by one ulp
    out = np.empty(len(col))
    for i, v in enumerate(col.to_numpy()):
        try:
            out[i] = np.nan if v is None or (isinstance(v, float) and np.isnan(v)) else float(v)
        except ValueError:
            raise IngestError(f"row {i + 1}: {name} is not numeric: {v!r}") from None
    return pd.Series(out, index=col.index, name=name)


def ingest_students(covariate_file, outcome_file=None, design_file=None) -> AnalysisSet:
    """Read ``students.csv`` (or three files joined on ``student_id``).

    Raises :class:`IngestError` on duplicate ids, a non-binary ``z``,
    broken nesting (a school in two blocks, say) or a block with only one
    arm.
    """
    df = _read_csv(covariate_file)
    for extra in (outcome_file, design_file):
        if extra is None:
            continue
        other = _read_csv(extra)
        if other["student_id"].duplicated().any():
            dup = other.loc[other["student_id"].duplicated(), "student_id"].iloc[0]
            raise IngestError(f"duplicate student_id {dup!r} in {extra}")
        overlap = [c for c in other.columns if c in df.columns and c != "student_id"]
        df = df.drop(columns=overlap).merge(other, on="student_id", how="left", validate="one_to_one")
    missing_cols = [c for c in STUDENT_COLUMNS if c not in df.columns]
    if missing_cols:
        raise IngestError(f"missing columns: {missing_cols}")
    df = df[STUDENT_COLUMNS].copy()

    dup = df["student_id"].duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise IngestError(f"row {i + 1}: duplicate student_id {df['student_id'].iloc[i]!r}")
    bad_z = ~df["z"].isin(["0", "1"])
    if bad_z.any():
        i = int(np.flatnonzero(bad_z)[0])
        raise IngestError(f"row {i + 1}: z must be 0 or 1, got {df['z'].iloc[i]!r}")
    for c in ID_COLUMNS[1:]:
        if df[c].isna().any():
            i = int(np.flatnonzero(df[c].isna())[0])
            raise IngestError(f"row {i + 1}: missing {c}")
    df["z"] = df["z"].astype(int)
    df["y"] = _exact_float(df["y"], "y")
    df["pretest"] = _exact_float(df["pretest"], "pretest")

    _check_nesting(df, "school_id", "block_id")
    _check_nesting(df, "school_id", "state_id")
    _check_nesting(df, "teacher_id", "school_id")
    _check_nesting(df, "class_id", "teacher_id")
    arms = df.groupby("block_id")["z"].nunique()
    if (arms < 2).any():
        raise IngestError(f"block {arms[arms < 2].index[0]!r} does not contain both arms")

    aset = AnalysisSet(students=df.reset_index(drop=True))
    rep = aset.ingest_report()
    log.info("ingested %d students (%d treated)", rep["n_students"], rep["n_treated"])
    return AnalysisSet(aset.students, aset.problems, None, rep)


def ingest_log(log_file, students: AnalysisSet, min_section_students: int = 100):
    """Read ``log.csv`` and drop sections worked by too few students.

    Repeated ``(student_id, problem_id)`` rows are merged by summing their
    counts.  Returns ``(problems, report)``.
    """
    df = _read_csv(log_file) if not isinstance(log_file, pd.DataFrame) else log_file.astype({"student_id": str})
    if "timestamp" not in df.columns:
        df["timestamp"] = np.nan
    df = df[LOG_COLUMNS].copy()
    for c in ("n_hints", "n_errors"):
        df[c] = pd.to_numeric(df[c], errors="raise")
        if (df[c] < 0).any():
            i = int(np.flatnonzero(df[c] < 0)[0])
            raise IngestError(f"log row {i + 1}: negative {c}")
        if (df[c] != np.round(df[c])).any():
            raise IngestError(f"{c} must be integer counts")
        df[c] = df[c].astype(int)

    arm = students.students.set_index("student_id")["z"]
    known = df["student_id"].isin(arm.index)
    if not known.all():
        i = int(np.flatnonzero(~known)[0])
        raise IngestError(f"log row {i + 1}: unknown student {df['student_id'].iloc[i]!r}")
    ctrl = arm.loc[df["student_id"]].to_numpy() == 0
    if ctrl.any():
        i = int(np.flatnonzero(ctrl)[0])
        raise IngestError(f"log row {i + 1}: student {df['student_id'].iloc[i]!r} is in the control arm")

    n_rows = len(df)
    sec = df.groupby(["student_id", "problem_id"])["section_id"].nunique()
    if (sec > 1).any():
        raise IngestError(f"problem {sec[sec > 1].index[0][1]!r} appears in two sections")
    df = (df.groupby(["student_id", "problem_id"], as_index=False)
            .agg(section_id=("section_id", "first"), n_hints=("n_hints", "sum"),
                 n_errors=("n_errors", "sum"), timestamp=("timestamp", "min")))
    per_section = df.groupby("section_id")["student_id"].nunique()
    kept_sections = per_section.index[per_section >= min_section_students]
    out = df[df["section_id"].isin(kept_sections)]
    out = out.sort_values(["student_id", "problem_id"]).reset_index(drop=True)[LOG_COLUMNS]
    report = {
        "log_rows": int(n_rows),
        "log_pairs": int(len(df)),
        "sections_total": int(len(per_section)),
        "sections_dropped": int(len(per_section) - len(kept_sections)),
        "rows_dropped_small_sections": int(len(df) - len(out)),
        "min_section_students": int(min_section_students),
    }
    return out, report


def apply_design_drops(aset: AnalysisSet, missing_log_threshold: float = 0.9) -> AnalysisSet:
    """Drop treatment schools with too much missing log data.

    A failing school takes its whole randomization block with it so that
    every surviving block keeps both arms.  Treated students still lacking
    log data are then removed.
    """
    if not 0 < missing_log_threshold <= 1:
        raise ValueError(f"missing_log_threshold must lie in (0, 1], got {missing_log_threshold}")
    s = aset.students
    has_log = s["student_id"].isin(set(aset.problems["student_id"]))
    treated = s[s["z"] == 1].assign(missing=~has_log[s["z"] == 1])
    frac = treated.groupby("school_id")["missing"].mean()
    failing = frac.index[frac >= missing_log_threshold]
    blocks = set(s.loc[s["school_id"].isin(failing), "block_id"])
    keep = ~s["block_id"].isin(blocks) & ~((s["z"] == 1) & ~has_log)
    students = s[keep].reset_index(drop=True)
    problems = aset.problems[aset.problems["student_id"].isin(set(students["student_id"]))].reset_index(drop=True)
    rep = dict(aset.report)
    rep.update({
        "schools_dropped_missing_log": sorted(map(str, failing)),
        "blocks_dropped": sorted(map(str, blocks)),
        "students_after_block_drops": int((~s["block_id"].isin(blocks)).sum()),
        "treated_without_log_dropped": int(((s["z"] == 1) & ~has_log & ~s["block_id"].isin(blocks)).sum()),
    })
    imputed = None if aset.imputed is None else aset.imputed.loc[keep.to_numpy()].reset_index(drop=True)
    out = AnalysisSet(students, problems, imputed, rep)
    out.report.update({k: v for k, v in out.ingest_report().items()})
    return out


# ---------------------------------------------------------------------------
# imputation


def _delta(new, old, cols, categorical):
    num = [c for c in cols if c not in categorical]
    cat = [c for c in cols if c in categorical]
    dn = np.nan
    if num:
        a, b = new[num].to_numpy(float), old[num].to_numpy(float)
        denom = np.sum(a ** 2)
        dn = np.sum((a - b) ** 2) / denom if denom > 0 else 0.0
    dc = np.nan
    if cat:
        dc = float((new[cat].to_numpy() != old[cat].to_numpy()).sum())
    return dn, dc


def _forest_impute(df, categorical, seed, n_estimators, max_iter, min_rows):
    from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

    miss = df.isna()
    cols = [c for c in df.columns if miss[c].any()]
    codes = {}
    X = pd.DataFrame(index=df.index)
    for c in df.columns:
        if c in categorical:
            cat = pd.Categorical(df[c])
            codes[c] = list(cat.categories)
            X[c] = cat.codes.astype(float)
            X.loc[miss[c], c] = np.nan
        else:
            X[c] = df[c].astype(float)
    # initial fill: mean / mode
    for c in cols:
        if c in categorical:
            X.loc[miss[c], c] = X.loc[~miss[c], c].mode().iloc[0]
        else:
            X.loc[miss[c], c] = X.loc[~miss[c], c].mean()
    order = sorted(cols, key=lambda c: miss[c].sum())
    has_num = any(c not in categorical for c in cols)
    has_cat = any(c in categorical for c in cols)
    prev, prev_delta = X.copy(), (np.inf, np.inf)
    for it in range(max_iter):
        for j, c in enumerate(order):
            obs = ~miss[c]
            y_obs = X.loc[obs, c]
            if obs.sum() < min_rows or y_obs.nunique() < 2 or X.shape[1] < 2:
                continue  # keep the mean/mode fill
            feats = X.drop(columns=[c])
            rs = seed + 1000 * it + j
            if c in categorical:
                model = RandomForestClassifier(n_estimators=n_estimators, random_state=rs, n_jobs=1)
            else:
                model = RandomForestRegressor(n_estimators=n_estimators, random_state=rs, n_jobs=1)
            model.fit(feats[obs], y_obs)
            X.loc[miss[c], c] = model.predict(feats[miss[c]])
        d = _delta(X, prev, cols, categorical)
        # stop once every change measure grows; keep the previous sweep
        grew = [d[0] > prev_delta[0]] * has_num + [d[1] > prev_delta[1]] * has_cat
        if it > 0 and all(grew):
            X = prev
            break
        if all(v == 0 for v, use in zip(d, (has_num, has_cat)) if use):
            break
        prev, prev_delta = X.copy(), d
    out = df.copy()
    for c in cols:
        if c in categorical:
            vals = np.asarray(codes[c], dtype=object)[X.loc[miss[c], c].round().astype(int).to_numpy()]
            out.loc[miss[c], c] = vals
        else:
            out.loc[miss[c], c] = X.loc[miss[c], c]
    return out


def impute_missing(covariates: pd.DataFrame, seed: int = 0, categorical: Optional[Sequence[str]] = None,
                   n_estimators: int = 100, max_iter: int = 10, mask_fraction: float = 0.1,
                   min_rows: int = 10, error_report: bool = True):
    """Single imputation by iterated random forests.

    Each incomplete covariate is regressed (or classified) on all others,
    cycling until the change between sweeps stops shrinking.  Covariates
    with fewer than ``min_rows`` observed values, or a single observed
    class, fall back to the mean or mode.

    Returns ``(imputed, indicators, errors)``.  ``errors`` maps each
    covariate to its out-of-sample imputation error, estimated by masking
    ``mask_fraction`` of its observed values: the misclassification rate
    for categorical covariates, RMSE divided by the SD for continuous ones.
    """
    df = covariates.copy()
    if categorical is None:
        categorical = [c for c in df.columns if not pd.api.types.is_numeric_dtype(df[c])]
    categorical = set(categorical)
    all_missing = [c for c in df.columns if df[c].isna().all()]
    if all_missing:
        raise ValueError(f"covariate {all_missing[0]!r} is entirely missing")
    if not df.notna().all().any():
        raise ValueError("at least one fully observed covariate is required")
    indicators = pd.DataFrame(
        {name: df[c].isna().astype(int) for c, name in INDICATED.items() if c in df.columns}, index=df.index)
    if not df.isna().any().any():
        return df, indicators, {c: 0.0 for c in df.columns}

    imputed = _forest_impute(df, categorical, seed, n_estimators, max_iter, min_rows)
    errors = {}
    if error_report:
        rng = np.random.default_rng(seed)
        masked = df.copy()
        held = {}
        for c in df.columns:
            obs = np.flatnonzero(df[c].notna().to_numpy())
            k = int(round(mask_fraction * len(obs)))
            if k == 0 or len(obs) - k < 1:
                continue
            idx = rng.choice(obs, size=k, replace=False)
            held[c] = idx
            masked.iloc[idx, masked.columns.get_loc(c)] = np.nan
        if held:
            re_imp = _forest_impute(masked, categorical, seed + 7, n_estimators, max_iter, min_rows)
            for c, idx in held.items():
                truth = df[c].iloc[idx]
                guess = re_imp[c].iloc[idx]
                if c in categorical:
                    errors[c] = float(np.mean(truth.to_numpy() != guess.to_numpy()))
                else:
                    sd = df[c].std()
                    rmse = float(np.sqrt(np.mean((truth.to_numpy(float) - guess.to_numpy(float)) ** 2)))
                    errors[c] = rmse / sd if sd > 0 else 0.0
    return imputed, indicators, errors


def impute_analysis_set(aset: AnalysisSet, seed: int = 0, **kw) -> AnalysisSet:
    """Impute the covariates of ``aset`` jointly and attach the result."""
    cov = aset.students[COVARIATES]
    imputed, ind, errs = impute_missing(cov, seed=seed, categorical=CATEGORICAL_COVARIATES, **kw)
    full = pd.concat([imputed.reset_index(drop=True), ind.reset_index(drop=True)], axis=1)
    rep = dict(aset.report)
    rep["imputation_error"] = errs
    rep["percent_missing"] = {c: float(cov[c].isna().mean()) for c in COVARIATES}
    return AnalysisSet(aset.students, aset.problems, full, rep)


def design_matrix(imputed: pd.DataFrame, drop_first: bool = True) -> pd.DataFrame:
    """Dummy-code categorical covariates; keep numeric columns as is."""
    parts = []
    for c in imputed.columns:
        col = imputed[c]
        if c in CATEGORICAL_COVARIATES or not pd.api.types.is_numeric_dtype(col):
            levels = sorted(col.astype(str).unique())
            use = levels[1:] if drop_first else levels
            for lev in use:
                parts.append(pd.Series((col.astype(str) == lev).astype(float).to_numpy(), name=f"{c}{lev}", index=col.index))
        else:
            parts.append(col.astype(float).rename(c))
    return pd.concat(parts, axis=1) if parts else pd.DataFrame(index=imputed.index)


# ---------------------------------------------------------------------------
# balance


def _wmean_var(x, w):
    sw = w.sum()
    m = np.sum(w * x) / sw
    v = np.sum(w * (x - m) ** 2) / sw
    n_eff = sw ** 2 / np.sum(w ** 2)
    if n_eff > 1:
        v *= n_eff / (n_eff - 1)
    return m, v


def standardized_difference(values, group_flag, weights=None) -> float:
    """(mean in group 1 - mean in group 0) / pooled SD.

    The pooled SD is ``sqrt((s1**2 + s0**2) / 2)``.  With ``weights`` both
    the means and the variances are weighted.
    """
    x = np.asarray(values, dtype=float)
    g = np.asarray(group_flag).astype(bool)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if g.all() or (~g).all():
        raise ValueError("both groups must be nonempty")
    m1, v1 = _wmean_var(x[g], w[g])
    m0, v0 = _wmean_var(x[~g], w[~g])
    sd = np.sqrt((v1 + v0) / 2)
    if not sd > 0:
        raise ValueError("pooled standard deviation is zero")
    return float((m1 - m0) / sd)


@dataclass
class BalanceTest:
    statistic: float
    df: int
    p_value: float
    rank_deficient: bool
    adjusted_diff: np.ndarray
    z: np.ndarray


def stratified_differences(X, group_flag, strata=None):
    """Stratum-adjusted covariate differences and their permutation covariance.

    Within each stratum the sum of ``(Z - n1/n) * x`` is accumulated; its
    covariance under random permutation of labels within strata is the
    finite-population expression ``n1 n0 / (n (n - 1)) * S_xx``.  Returns
    ``(t, V, weight)`` where ``t / weight`` is the harmonic-weighted mean
    difference.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    z = np.asarray(group_flag).astype(float)
    s = np.zeros(len(z), dtype=int) if strata is None else pd.factorize(np.asarray(strata))[0]
    k = X.shape[1]
    t = np.zeros(k)
    V = np.zeros((k, k))
    wsum = 0.0
    for lab in np.unique(s):
        idx = s == lab
        n = idx.sum()
        n1 = z[idx].sum()
        n0 = n - n1
        if n1 == 0 or n0 == 0:
            raise ValueError(f"stratum {lab} lacks one of the groups")
        xs = X[idx]
        t += ((z[idx] - n1 / n)[:, None] * xs).sum(axis=0)
        xc = xs - xs.mean(axis=0)
        if n > 1:
            V += n1 * n0 / (n * (n - 1)) * (xc.T @ xc)
        wsum += n1 * n0 / n
    return t, V, wsum


def omnibus_balance_test(X, group_flag, strata=None, tol: float = 1e-10) -> BalanceTest:
    """Chi-square test that all stratum-adjusted mean differences are zero.

    The statistic is ``t' V^+ t`` with ``V`` the within-strata permutation
    covariance; a pseudo-inverse is used when ``V`` is singular and the
    reduced rank is reported as the degrees of freedom.
    """
    t, V, _ = stratified_differences(X, group_flag, strata)
    evals, evecs = np.linalg.eigh(V)
    keep = evals > tol * max(evals.max(), 1e-300)
    rank = int(keep.sum())
    if rank == 0:
        return BalanceTest(0.0, 0, 1.0, True, t, np.zeros_like(t))
    proj = evecs[:, keep].T @ t
    stat = float(np.sum(proj ** 2 / evals[keep]))
    p = float(stats.chi2.sf(stat, rank))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.diag(V) > 0, t / np.sqrt(np.diag(V)), 0.0)
    return BalanceTest(stat, rank, min(max(p, 0.0), 1.0), rank < len(t), t, z)
