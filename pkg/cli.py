"""Command-line harness: run experiments, validate configs, calibrate thresholds."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import reports
from audio import AudioExperiment, run_audio_transposition
from config import EXPERIMENTS, PROFILES, RunConfig, parse_value, resolve_profile
from core import CalibrationError, ConfigError
from experiments import ExperimentReport, ExperimentRunner, run_1d_demo
from sensors import Agent1D, default_body

logger = logging.getLogger(__name__)

CALIBRATED_EXPERIMENTS = ("atlas", "rigid", "medium", "relpos", "audio")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master seed (default 0).")
    common.add_argument("--profile", choices=sorted(PROFILES), default=None, help="Parameter profile.")
    common.add_argument("--threads", type=int, default=None, help="Worker threads; never changes results.")
    common.add_argument("--out", type=Path, default=None, help="Output directory (default ./results).")
    common.add_argument("--trials", type=int, default=None, help="Override the experiment's trial count.")
    common.add_argument("--config", type=Path, default=None, help="TOML file with run fields and [params].")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one profile parameter (repeatable).")
    common.add_argument("--timestamp", action="store_true", help="Add a generation comment to SVG output.")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    common.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors.")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="sensible-space",
                                     description="Naive agent discovering space through sensorimotor invariants.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="Run one experiment and write its report.")
    run.add_argument("experiment", choices=EXPERIMENTS)

    validate = sub.add_parser("validate", parents=[common], help="Check a configuration and print it.")
    validate.add_argument("experiment", nargs="?", choices=EXPERIMENTS, default="atlas")

    calibrate_cmd = sub.add_parser("calibrate", parents=[common], help="Calibrate and write a decision threshold.")
    calibrate_cmd.add_argument("experiment", choices=CALIBRATED_EXPERIMENTS)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """Profile defaults, then TOML file, then --set, then dedicated flags."""
    config = RunConfig.from_profile(args.profile or "desk", experiment=args.experiment)
    if args.config is not None:
        config.load_toml(args.config)
        if args.profile is not None and args.profile != config.profile:
            config.profile = args.profile
            config.params = resolve_profile(args.profile)
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(value.strip())
    config.update(**overrides)
    if args.seed is not None:
        config.seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    if args.out is not None:
        config.out = args.out
    if args.trials is not None:
        config.trials = args.trials
    config.timestamp = args.timestamp
    return config


def _check(config: RunConfig) -> None:
    errors = config.validate()
    if errors:
        raise ConfigError("; ".join(errors))


def _runner(config: RunConfig) -> ExperimentRunner:
    return ExperimentRunner(default_body(config.seed), config.params, config.seed, config.threads)


def execute(config: RunConfig) -> ExperimentReport:
    """Run the configured experiment and return its report."""
    name = config.experiment
    n_trials = config.n_trials()
    if name == "atlas":
        return _runner(config).atlas_report()
    if name == "rigid":
        return _runner(config).rigid_displacement(n_trials)
    if name == "medium":
        return _runner(config).unchanging_medium(n_trials)
    if name == "relpos":
        return _runner(config).relative_position(n_trials)
    if name == "demo1d":
        return run_1d_demo(Agent1D(), config.seed, n_trials, params=config.params).report
    if name == "audio":
        return run_audio_transposition(config.seed, n_trials, params=config.params, workers=config.threads)
    raise ConfigError(f"Unknown experiment '{name}'")


def summary_lines(report: ExperimentReport) -> List[str]:
    lines = []
    for name in sorted(report.curves):
        curve = report.curves[name]
        keys = [c for c in curve.columns if c not in reports.SUMMARY_COLUMNS]
        for row in curve.itertuples(index=False):
            row = row._asdict()
            label = ", ".join(f"{k}={row[k]}" for k in keys)
            lines.append(f"{report.experiment} {name} [{label}]: n={row['n']} "
                         f"associated={row['association_rate']:.3f} accuracy={row['accuracy']:.3f}")
    for key in sorted(report.summary):
        value = report.summary[key]
        if isinstance(value, (int, float, str)) or value is None:
            lines.append(f"{report.experiment} {key}: {value}")
    return lines


def cmd_run(config: RunConfig) -> int:
    _check(config)
    report = execute(config)
    paths = reports.write_report(report, config.out, timestamp=config.timestamp)
    for line in summary_lines(report):
        print(line)
    print(f"Wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_validate(config: RunConfig) -> int:
    errors = config.validate()
    if errors:
        for error in errors:
            print(f"invalid {error}", file=sys.stderr)
        return 2
    defaults = PROFILES[config.profile]
    overridden = sorted(k for k, v in config.params.items() if defaults.get(k) != v)
    print(json.dumps(config.snapshot(), sort_keys=True, indent=2))
    for note in config.notes():
        print(f"note: {note}")
    if overridden:
        print(f"Overridden {config.profile} parameters: {', '.join(overridden)}")
    else:
        print(f"All {config.profile} profile parameters at their defaults")
    return 0


def cmd_calibrate(config: RunConfig) -> int:
    _check(config)
    if config.experiment == "audio":
        threshold = AudioExperiment(params=config.params, seed=config.seed, workers=config.threads).calibrate()
    else:
        threshold = _runner(config).calibrate(config.experiment)
    config.out.mkdir(parents=True, exist_ok=True)
    path = config.out / f"{config.experiment}_{config.seed}_threshold.json"
    path.write_text(json.dumps(threshold.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"{config.experiment} threshold: {threshold.value:.6g} "
          f"(quantile {threshold.quantile}, {threshold.n_trials} trials, {threshold.n_undefined} undefined)")
    print(f"Wrote {path}")
    return 0


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "calibrate": cmd_calibrate}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        return COMMANDS[args.command](config)
    except ConfigError as e:
        logger.error(f"Configuration error: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        logger.error(f"I/O error: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CalibrationError as e:
        logger.error(f"Calibration failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
