"""Command line entry point.

Every subcommand accepts ``--config``, ``--seed`` and ``--out-dir``.  The
analysis subcommands run their stage plus its upstream stages; ``report``
runs everything.  Exit status is 0 when the requested diagnostics pass,
1 when a diagnostic fails, 2 for configuration errors and 3 for input
data errors.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys

from .config import STAGES, ConfigError, PipelineConfig
from .pipeline import StageError, demo_config, run_pipeline
from .simulate import simulate_dataset, truth_config_from_dict

EXIT_OK, EXIT_DIAGNOSTIC, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logcausal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("simulate",):
        sp = sub.add_parser(name, help=_HELP[name])
        sp.add_argument("--config", help="INI file (default: the bundled demo dataset)"
                        if name != "simulate" else "INI file with a [truth] section")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out-dir", help="override the configured output directory")
    return p


_HELP = {
    "ingest": "read and validate inputs, apply design drops, impute covariates",
    "measure": "fit the Rasch mixture and dichotomize hint use",
    "match": "fit the hint-use model and match within schools",
    "effects": "matched-set effect estimates with sensitivity intervals",
    "mediate": "indirect and direct effects",
    "ps": "principal stratification model fit and checks",
    "report": "run every stage and render figures",
    "simulate": "write a synthetic dataset with known truth",
}


def _load(args) -> PipelineConfig:
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config!r} not found")
        cfg = PipelineConfig.read(args.config)
    else:
        cfg = demo_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


def _simulate(args) -> int:
    values = {}
    if args.config:
        cp = configparser.ConfigParser(interpolation=None)
        if not cp.read(args.config):
            raise ConfigError(f"config file {args.config!r} not found")
        if "truth" not in cp:
            raise ConfigError("simulation config needs a [truth] section")
        values = dict(cp["truth"])
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        truth = truth_config_from_dict(values)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = args.out_dir or "simulated"
    ds = simulate_dataset(truth, out_dir=out)
    cfg = PipelineConfig(students="students.csv", log="log.csv", seed=truth.seed,
                         min_section_students=max(1, min(100, int(ds.students.z.sum()) // 2)))
    cfg.write(os.path.join(out, "pipeline.ini"))
    for path in list(ds.paths.values()) + [os.path.join(out, "pipeline.ini")]:
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return _simulate(args)
        report = run_pipeline(_load(args), [args.command])
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    for name, res in report.stages.items():
        line = f"{name:8s} {res.status:8s} {res.seconds:8.1f}s"
        if res.flags:
            line += "  " + "; ".join(res.flags)
        print(line)
    print(report.path)
    return EXIT_OK if report.ok else EXIT_DIAGNOSTIC


if __name__ == "__main__":
    sys.exit(main())
