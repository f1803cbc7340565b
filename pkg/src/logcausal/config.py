"""Pipeline configuration stored as an INI file with one section per stage."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .effects import SCHEMES
from .sampler import SamplerConfig

STAGES = ("ingest", "measure", "match", "effects", "mediate", "ps", "report")
# stage -> stages whose outputs it consumes
DEPENDS = {
    "ingest": (),
    "measure": ("ingest",),
    "match": ("ingest", "measure"),
    "effects": ("match",),
    "mediate": ("effects",),
    "ps": ("ingest", "measure"),
    "report": ("ingest", "measure", "match", "effects", "mediate", "ps"),
}


class ConfigError(ValueError):
    """The configuration is incomplete or inconsistent."""


@dataclass
class SamplerSettings:
    chains: int = 4
    warmup: int = 1000
    iters: int = 2000
    max_treedepth: int = 10
    warmup_max_treedepth: Optional[int] = 6
    integration_time: Optional[float] = None

    def to_sampler(self, seed: int, **kw) -> SamplerConfig:
        extra = {} if self.integration_time is None else {"integration_time": self.integration_time}
        extra.update(kw)
        return SamplerConfig(chains=self.chains, warmup=self.warmup, iters=self.iters, seed=seed,
                             max_treedepth=self.max_treedepth, warmup_max_treedepth=self.warmup_max_treedepth,
                             **extra)


@dataclass
class PipelineConfig:
    """Everything a run depends on besides the input files themselves.

    Attributes:
        students: student file (design, covariates and outcome columns).
        outcomes: optional separate outcome file joined on student_id.
        design: optional separate design file joined on student_id.
        log: worked-problem log; required by every stage after ingest.
        out_dir: output directory.
        seed: master seed; each stage derives its own from it.
        min_section_students: sections worked by fewer students are dropped.
        missing_log_threshold: treated schools with at least this share of
            students lacking log data are dropped with their block.
        impute_trees: trees per forest in covariate imputation.
        measure_sampler: HMC settings for the Rasch mixture.
        spline_df: natural-spline degrees of freedom for pretest.
        ridge: fallback penalty when the hint-use model separates.
        schemes: weighting schemes for the matched estimators.
        benchmarks: covariates (column names or prefixes) whose strength
            calibrates the sensitivity intervals.
        ps_sampler: HMC settings for the principal stratification model.
        ppc_replicates: replicated data sets per density check.
        residual_bins: bins for the binned hint residuals.
        residual_draws: posterior draws shown in the binned residual plot.
    """

    students: str = ""
    outcomes: str = ""
    design: str = ""
    log: str = ""
    out_dir: str = "out"
    seed: int = 0
    min_section_students: int = 100
    missing_log_threshold: float = 0.9
    impute_trees: int = 100
    measure_sampler: SamplerSettings = field(default_factory=SamplerSettings)
    spline_df: int = 5
    ridge: float = 1.0
    schemes: tuple = SCHEMES
    benchmarks: tuple = ("pretest", "ethnicity")
    ps_sampler: SamplerSettings = field(default_factory=lambda: SamplerSettings(integration_time=6.283185307179586))
    ppc_replicates: int = 1000
    residual_bins: int = 20
    residual_draws: int = 9

    # section -> attribute names, in file order
    LAYOUT = {
        "paths": ("students", "outcomes", "design", "log", "out_dir"),
        "run": ("seed",),
        "ingest": ("min_section_students", "missing_log_threshold", "impute_trees"),
        "measure": ("measure_sampler",),
        "match": ("spline_df", "ridge"),
        "effects": ("schemes", "benchmarks"),
        "ps": ("ps_sampler", "ppc_replicates", "residual_bins", "residual_draws"),
    }

    def validate(self, stages=STAGES) -> None:
        """Raise ConfigError when ``stages`` cannot run with these settings."""
        stages = set(stages)
        if not self.students:
            raise ConfigError("[paths] students is required")
        if stages - {"ingest"} and not self.log:
            raise ConfigError(f"[paths] log is required for stage(s) {sorted(stages - {'ingest'})}")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError(f"[effects] schemes must be a non-empty subset of {list(SCHEMES)}, got {bad}")
        if not 0 < self.missing_log_threshold <= 1:
            raise ConfigError("[ingest] missing_log_threshold must lie in (0, 1]")
        if self.min_section_students < 1:
            raise ConfigError("[ingest] min_section_students must be positive")
        for name in ("measure_sampler", "ps_sampler"):
            s = getattr(self, name)
            if s.chains < 2 or s.warmup < 100 or s.iters < 100:
                # fewer draws leave the convergence diagnostics undefined
                raise ConfigError(f"{name}: need at least 2 chains, 100 warmup and 100 draws")

    # -- serialization

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec, names in self.LAYOUT.items():
            cp[sec] = {}
            for name in names:
                value = getattr(self, name)
                if isinstance(value, SamplerSettings):
                    for k, v in asdict(value).items():
                        cp[sec][k] = "" if v is None else repr(v) if isinstance(v, float) else str(v)
                elif isinstance(value, tuple):
                    cp[sec][name] = ", ".join(value)
                elif isinstance(value, float):
                    cp[sec][name] = repr(value)
                else:
                    cp[sec][name] = str(value)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from e
        known = set(cls.LAYOUT)
        unknown = [s for s in cp.sections() if s not in known]
        if unknown:
            raise ConfigError(f"unknown section(s) {unknown}")
        defaults = cls()
        kw = {}
        for sec, names in cls.LAYOUT.items():
            if sec not in cp:
                continue
            items = dict(cp[sec])
            for name in names:
                current = getattr(defaults, name)
                if isinstance(current, SamplerSettings):
                    kw[name] = _sampler_from(items, current, sec)
                    continue
                if name not in items:
                    continue
                kw[name] = _coerce(items.pop(name), current, f"[{sec}] {name}")
            if items:
                raise ConfigError(f"[{sec}] unknown key(s) {sorted(items)}")
        return cls(**kw)

    @classmethod
    def read(cls, path) -> "PipelineConfig":
        """Parse an INI file; relative input paths resolve against its directory."""
        with open(path) as fh:
            cfg = cls.from_ini(fh.read())
        root = os.path.dirname(os.path.abspath(path))
        for name in ("students", "outcomes", "design", "log"):
            value = getattr(cfg, name)
            if value and not os.path.isabs(value):
                setattr(cfg, name, os.path.join(root, value))
        return cfg


def _coerce(raw: str, current, where: str):
    raw = raw.strip()
    try:
        if isinstance(current, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if isinstance(current, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from e
    return raw


def _sampler_from(items: dict, current: SamplerSettings, sec: str) -> SamplerSettings:
    kw = {}
    for f in fields(SamplerSettings):
        if f.name not in items:
            continue
        raw = items.pop(f.name).strip()
        default = getattr(current, f.name)
        if raw == "" and f.name in ("warmup_max_treedepth", "integration_time"):
            kw[f.name] = None
        elif f.name == "integration_time":
            kw[f.name] = _coerce(raw, 0.0, f"[{sec}] {f.name}")
        else:
            kw[f.name] = _coerce(raw, default if default is not None else 0, f"[{sec}] {f.name}")
    return SamplerSettings(**{**asdict(current), **kw})
