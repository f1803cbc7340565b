"""Stage orchestration: ingest, measure, match, effects, mediate, ps, report."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from . import plots
from .config import DEPENDS, STAGES, ConfigError, PipelineConfig
from .core_data import (CATEGORICAL_COVARIATES, AnalysisSet, IngestError, apply_design_drops,
                        impute_analysis_set, ingest_log, ingest_students)
from .effects import (EffectError, benchmark_covariate, direct_effect, impute_y10, indirect_effect,
                      matched_set_effects, sensitivity_interval, weighted_effect, write_results_json,
                      write_table3)
from .matching import full_match, match_balance
from .measurement import challenge_filter, choose_cutoff, fit_rasch_mixture, hint_rates
from .principal_strat import (PSData, PSDataError, binned_residuals, fit_ps, ppc_density,
                              principal_effect_curve, residual_table)
from .propensity import fit_mlogit, propensity_design

log = logging.getLogger(__name__)

OK, FAILED, SKIPPED = "ok", "failed", "skipped"


class StageError(RuntimeError):
    """A stage could not run on its inputs (schema or data errors)."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageResult:
    status: str = SKIPPED
    seconds: float = 0.0
    outputs: list = field(default_factory=list)
    flags: list = field(default_factory=list)


@dataclass
class RunReport:
    """Per-stage status, timing, produced files and diagnostic flags."""

    requested: list
    stages: dict = field(default_factory=dict)
    seed: int = 0
    path: Optional[str] = None

    @property
    def ok(self) -> bool:
        return all(self.stages[s].status == OK for s in self.requested)

    @property
    def outputs(self) -> list:
        files = [p for r in self.stages.values() for p in r.outputs]
        return files + ([self.path] if self.path else [])

    def to_dict(self) -> dict:
        return {"requested": list(self.requested), "seed": self.seed, "ok": self.ok,
                "stages": {k: asdict(v) for k, v in self.stages.items()}, "outputs": self.outputs}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGES.index(stage)]).generate_state(1)[0])


def closure(stages: Iterable[str]) -> list:
    """Requested stages plus everything they depend on, in run order."""
    need = set()

    def visit(s):
        if s not in DEPENDS:
            raise ConfigError(f"unknown stage {s!r}; choose from {list(STAGES)}")
        if s in need:
            return
        need.add(s)
        for d in DEPENDS[s]:
            visit(d)

    for s in stages:
        visit(s)
    return [s for s in STAGES if s in need]


def _json(path, data) -> str:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_plain)
    return path


def _plain(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _csv(frame: pd.DataFrame, path) -> str:
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


# ---------------------------------------------------------------------------
# stages; each takes (cfg, ctx, out, seed) and returns an updated StageResult


def _ingest(cfg, ctx, out, seed, res):
    aset = ingest_students(cfg.students, cfg.outcomes or None, cfg.design or None)
    if cfg.log:
        problems, rep = ingest_log(cfg.log, aset, cfg.min_section_students)
        aset = apply_design_drops(aset.with_problems(problems, rep), cfg.missing_log_threshold)
    aset = impute_analysis_set(aset, seed=seed, n_estimators=cfg.impute_trees)
    ctx["aset"] = aset
    imputed = pd.concat([aset.students[["student_id"]], aset.imputed], axis=1)
    res.outputs += [_csv(aset.students, os.path.join(out, "analysis_students.csv")),
                    _csv(imputed, os.path.join(out, "imputed_covariates.csv")),
                    _csv(aset.problems, os.path.join(out, "problems.csv")),
                    _json(os.path.join(out, "ingest_report.json"), aset.report)]
    res.status = OK


def _measure(cfg, ctx, out, seed, res):
    aset: AnalysisSet = ctx["aset"]
    ch = challenge_filter(aset.problems)
    fit = fit_rasch_mixture(ch, cfg.measure_sampler.to_sampler(seed))
    dich = choose_cutoff(fit, hint_rates(ch))
    ctx.update(challenges=ch, mixture=fit, dich=dich)
    path = os.path.join(out, "mixture.json")
    fit.to_json(path)
    summary = {"cutoff": dich.cutoff, "p0": dich.p0, "agreement": dich.agreement,
               "pr_h1": float(dich.table["H"].mean()), "n_students": int(len(dich.table))}
    res.outputs += [path, _json(os.path.join(out, "dichotomization.json"), summary)]
    dpath = os.path.join(out, "hint_dichotomization.csv")
    dich.to_csv(dpath)
    res.outputs.append(dpath)
    res.flags += fit.flags
    res.status = OK if fit.valid else FAILED


def _match(cfg, ctx, out, seed, res):
    aset: AnalysisSet = ctx["aset"]
    H = ctx["dich"].H
    s = aset.students.reset_index(drop=True)
    rows = np.flatnonzero(s["student_id"].isin(H.index).to_numpy())
    st = s.iloc[rows].reset_index(drop=True)
    imp = aset.imputed.iloc[rows].reset_index(drop=True)
    ids = st["student_id"].astype(str)
    h = H.loc[ids].to_numpy(int)
    X, names, spline = propensity_design(imp, CATEGORICAL_COVARIATES, df=cfg.spline_df)
    groups = {"state": st["state_id"].to_numpy(), "school": st["school_id"].to_numpy(),
              "class": st["class_id"].to_numpy()}
    pf = fit_mlogit(X.to_numpy(float), h, groups, names=names, index=ids.to_numpy(), ridge=cfg.ridge,
                    spline=spline)
    school = pd.Series(st["school_id"].to_numpy(), index=ids.to_numpy())
    ma = full_match(pf.logit, h, school.loc[pf.logit.index])
    Xi = X.set_axis(ids.to_numpy())
    matched = Xi.index.isin(ma.match_id.index)
    bal = match_balance(ma, Xi[matched], h[matched])
    ctx.update(propensity=pf, assignment=ma, balance=bal, match_ids=ids.to_numpy()[matched],
               match_H=pd.Series(h[matched], index=ids.to_numpy()[matched]))
    ppath = os.path.join(out, "propensity.csv")
    pf.to_csv(ppath)
    mpath = os.path.join(out, "matches.csv")
    ma.to_csv(mpath)
    summary = {"certified": ma.certified, "excluded_schools": list(map(str, ma.excluded)),
               "total_distance": ma.total_distance, "n_sets": int(len(ma.sets)),
               "random_effect_sd": pf.sd, "converged": pf.converged, "ridge": pf.ridge,
               "omnibus_pre": bal.attrs["omnibus_pre"], "omnibus_post": bal.attrs["omnibus_post"],
               "flags": list(pf.flags)}
    res.outputs += [ppath, mpath, _csv(ma.sets, os.path.join(out, "matched_sets.csv")),
                    _csv(bal, os.path.join(out, "balance.csv")), _json(os.path.join(out, "match.json"), summary)]
    failures = []
    if not ma.certified:
        failures.append("matching optimality not certified")
    if not pf.converged:
        failures.append("hint-use model did not converge")
    if bal.attrs["omnibus_post"] < 0.05:
        failures.append(f"post-match omnibus balance p = {bal.attrs['omnibus_post']:.3g} < 0.05")
    res.flags += list(pf.flags) + failures
    res.status = FAILED if failures else OK


def _covariates_for(aset: AnalysisSet, ids) -> pd.DataFrame:
    X = aset.covariate_matrix().set_axis(aset.students["student_id"].astype(str).to_numpy())
    X = X.loc[list(ids)]
    return X.loc[:, X.std(ddof=0) > 0]


def _set_effects(ctx):
    aset: AnalysisSet = ctx["aset"]
    y = aset.students.set_index(aset.students["student_id"].astype(str))["y"]
    mid = ctx["assignment"].match_id.loc[ctx["match_ids"]]
    return matched_set_effects(mid, y.loc[mid.index].to_numpy(float), ctx["match_H"].loc[mid.index].to_numpy())


def _effects(cfg, ctx, out, seed, res):
    aset: AnalysisSet = ctx["aset"]
    se = _set_effects(ctx)
    X = _covariates_for(aset, se.units.index)
    estimates, params = [], {}
    for scheme in cfg.schemes:
        est = weighted_effect(se, scheme, X=X)
        for b in cfg.benchmarks:
            rho_sq, t_z = benchmark_covariate(est, b)
            params.setdefault(b, {})[scheme] = {"rho_sq": rho_sq, "t_z": t_z}
            est.sensitivity[b] = sensitivity_interval(est, rho_sq, t_z)
        estimates.append(est)
        if not math.isfinite(est.std_error):
            res.flags.append(f"{scheme}: standard error undefined")
    ctx.update(set_effects=se, estimates=estimates)
    tpath = os.path.join(out, "table3.csv")
    write_table3(tpath, estimates, cfg.benchmarks)
    jpath = os.path.join(out, "effects.json")
    write_results_json(jpath, estimates, {"benchmarks": params, "dropped_sets": list(map(str, se.dropped))})
    res.outputs += [tpath, jpath, _csv(se.table, os.path.join(out, "set_effects.csv"))]
    res.status = FAILED if res.flags else OK


def _mediate(cfg, ctx, out, seed, res):
    aset: AnalysisSet = ctx["aset"]
    se = ctx["set_effects"]
    tot = next((e for e in ctx["estimates"] if e.scheme == "TOT"), None) or weighted_effect(se, "TOT")
    pr_h1 = float(ctx["dich"].table["H"].mean())
    ind = indirect_effect(tot, pr_h1)
    mid = ctx["assignment"].match_id.loc[ctx["match_ids"]]
    s = aset.students.set_index(aset.students["student_id"].astype(str))
    y10 = impute_y10(mid, s.loc[mid.index, "y"].to_numpy(float), ctx["match_H"].loc[mid.index].to_numpy())
    ctrl = s[(s["z"] == 0) & s["y"].notna()]
    treated = y10[np.isfinite(y10["y10"])]
    y_tilde = pd.concat([treated["y10"], ctrl["y"]])
    frame = s.loc[y_tilde.index]
    direct = direct_effect(y_tilde.to_numpy(), frame["z"].to_numpy(), frame["block_id"].to_numpy(),
                           frame["school_id"].to_numpy())
    X = _covariates_for(aset, y_tilde.index)
    direct_adj = direct_effect(y_tilde.to_numpy(), frame["z"].to_numpy(), frame["block_id"].to_numpy(),
                               frame["school_id"].to_numpy(), X=X)
    ctx["mediation"] = [ind, direct, direct_adj]
    jpath = os.path.join(out, "mediation.json")
    write_results_json(jpath, [tot, ind, direct, direct_adj], {"pr_h1": pr_h1})
    ypath = os.path.join(out, "y10.csv")
    _csv(y10.rename_axis("student_id").reset_index(), ypath)
    res.outputs += [jpath, ypath]
    res.status = OK


def _ps(cfg, ctx, out, seed, res):
    aset: AnalysisSet = ctx["aset"]
    X = aset.covariate_matrix()
    data = PSData.build(aset.students, X, ctx["challenges"])
    fit = fit_ps(data, cfg.ps_sampler.to_sampler(seed))
    ctx["ps_fit"] = fit
    res.outputs.append(_json(os.path.join(out, "ps_fit.json"), fit.summary()))
    res.flags += fit.flags
    if not fit.valid:
        res.status = FAILED
        return
    curve = principal_effect_curve(fit)
    cpath = os.path.join(out, "ps_curve.json")
    curve.to_json(cpath)
    dens = {g: ppc_density(fit, g, n_rep=cfg.ppc_replicates, seed=seed + k)
            for k, g in enumerate(("treatment", "control"))}
    resid = residual_table(fit, "pooled")
    binned = binned_residuals(fit, n_bins=cfg.residual_bins, n_draws=cfg.residual_draws, seed=seed)
    ctx.update(ps_curve=curve, ppc=dens, residuals=resid, binned=binned)
    res.outputs += [cpath, _csv(curve.to_frame(), os.path.join(out, "ps_curve_table.csv")),
                    _csv(resid, os.path.join(out, "ps_residuals.csv")),
                    _csv(binned, os.path.join(out, "ps_binned_residuals.csv")),
                    _json(os.path.join(out, "ppc_coverage.json"), {g: d.coverage() for g, d in dens.items()})]
    res.status = OK


def _report(cfg, ctx, out, seed, res):
    fig = os.path.join(out, "figures")
    os.makedirs(fig, exist_ok=True)
    made = []
    if "dich" in ctx:
        made.append(plots.plot_hint_rates(ctx["dich"].table, ctx["dich"].cutoff, os.path.join(fig, "hint_rates")))
    if "balance" in ctx:
        made.append(plots.plot_balance(ctx["balance"], os.path.join(fig, "balance")))
    if "ps_curve" in ctx:
        made.append(plots.plot_effect_curve(ctx["ps_curve"], os.path.join(fig, "ps_curve")))
        made.append(plots.plot_ppc(ctx["ppc"], os.path.join(fig, "ppc")))
        made.append(plots.plot_residuals(ctx["residuals"], os.path.join(fig, "ps_residuals")))
        made.append(plots.plot_binned_residuals(ctx["binned"], os.path.join(fig, "ps_binned_residuals")))
    for m in made:
        res.outputs += [m["svg"], m["csv"]]
    res.status = OK


RUNNERS = {"ingest": _ingest, "measure": _measure, "match": _match, "effects": _effects,
           "mediate": _mediate, "ps": _ps, "report": _report}
# errors that mean the inputs, not the code, are at fault
DATA_ERRORS = (IngestError, PSDataError, EffectError, ValueError, KeyError)


def run_pipeline(config: PipelineConfig, stages: Optional[Iterable[str]] = None) -> RunReport:
    """Run the requested stages and everything they depend on.

    A stage whose diagnostics fail is marked ``failed`` and the stages
    consuming its output are skipped.  The report stage renders whatever
    its upstream stages produced.  ``run_report.json`` is written to the
    output directory last.

    Args:
        config: a validated PipelineConfig.
        stages: stages to run (default all).

    Raises:
        ConfigError: when the config cannot support the requested stages.
        StageError: when a stage's inputs violate the expected schema.
    """
    requested = list(stages) if stages is not None else list(STAGES)
    order = closure(requested)
    config.validate(order)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    report = RunReport(requested=requested, seed=config.seed)
    ctx = {}
    for name in order:
        res = StageResult()
        report.stages[name] = res
        blocked = [d for d in DEPENDS[name] if report.stages[d].status != OK]
        if blocked and name != "report":
            res.flags.append("upstream not ok: " + ", ".join(blocked))
            continue
        t0 = time.perf_counter()
        try:
            RUNNERS[name](config, ctx, out, stage_seed(config.seed, name), res)
        except DATA_ERRORS as e:
            raise StageError(name, e) from e
        finally:
            res.seconds = round(time.perf_counter() - t0, 3)
        if name == "report" and blocked:
            res.flags.append("partial: upstream not ok: " + ", ".join(blocked))
            res.status = FAILED
        log.info("stage %s: %s (%.1f s)", name, res.status, res.seconds)
    report.path = os.path.join(out, "run_report.json")
    report.to_json(report.path)
    return report


def bundled_dataset() -> dict:
    """Paths of the packaged 200-student synthetic dataset."""
    root = resources.files("logcausal") / "data" / "demo"
    return {k: str(root / f) for k, f in (("students", "students.csv"), ("log", "log.csv"),
                                           ("truth", "truth.json"), ("truth_students", "truth_students.csv"),
                                           ("config", "pipeline.ini"))}


def demo_config(out_dir: str = "out", seed: int = 0) -> PipelineConfig:
    """Config for the bundled dataset."""
    cfg = PipelineConfig.read(bundled_dataset()["config"])
    cfg.out_dir, cfg.seed = out_dir, seed
    return cfg
