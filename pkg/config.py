"""Run profiles and the run configuration.

Profiles are plain parameter dicts. ``paper`` reproduces the published scale,
``desk`` trades resolution and trial counts for a run that fits on a laptop.
"""
from __future__ import annotations

import logging
import math
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from core import ConfigError

logger = logging.getLogger(__name__)

EXPERIMENTS = ("atlas", "rigid", "medium", "relpos", "demo1d", "audio")

# CLI experiment name -> profile key holding its trial count
TRIAL_KEYS = {
    "rigid": "rigid_trials",
    "medium": "medium_trials",
    "relpos": "relpos_trials",
    "demo1d": "demo1d_trials",
    "audio": "audio_trials",
}

# parameters that must be positive integers
INTEGER_KEYS = (
    "calibration_trials", "rigid_trials", "medium_trials", "relpos_trials", "demo1d_trials",
    "demo1d_nodes", "audio_trials", "audio_nodes", "audio_calibration_trials", "atlas_sources",
)

_BASE_PARAMS: Dict[str, Any] = {
    # scanning and matching
    "grid": 201,
    "photo_tol": 0.005,
    "dedup_tol": 0.01,
    # objects are small; darker vectors are treated as seeing nothing
    "object_min_signal": 0.05,
    # object scenes only coincide exactly, up to round-off
    "object_photo_tol": 1e-6,
    # phi atlas
    "atlas_step": 0.02,
    "atlas_extent": 1.8,
    "atlas_sources": 200,
    "atlas_side": 3.0,
    # threshold calibration
    "calibration_trials": 1000,
    "calibration_quantile": 0.9,
    # one lattice step of the 201 grid; snapping erases anything below half a step
    "calibration_perturbation": 0.005,
    # sensible rigid displacement
    "rigid_trials": 1000,
    "rigid_max_difference": 0.1,
    # unchanging medium
    "medium_trials": 10000,
    "medium_jump_step": 0.02,
    "medium_jump_extent": 0.6,
    "medium_circle_region": 0.4,
    "medium_max_deformation": 0.5,
    "medium_unchanged_bound": 0.005,
    "medium_unchanged_fraction": 0.5,
    # relative position
    "relpos_trials": 1000,
    "relpos_segments": [2, 3, 4],
    "relpos_destination": [0.6, 0.6],
    # the figure caption gives 0.15, the methods text 0.1
    "relpos_offset_range": 0.15,
    "relpos_zero_fraction": 0.5,
    "relpos_intermediate_extent": 0.9,
    "relpos_max_segment": 0.75,
    "relpos_min_overlap": 0.1,
    # pedagogical 1D agent
    "demo1d_trials": 10,
    "demo1d_nodes": 101,
    "demo1d_shift": 0.2,
    "demo1d_sources": 20,
    "demo1d_photo_tol": 1e-5,
    "demo1d_dedup_tol": 0.002,
    "demo1d_min_signal": 0.01,
    # hair-cell agent
    "audio_trials": 200,
    "audio_nodes": 241,
    "audio_max_transposition": 12,
    # a transposed sound reproduces its readings up to round-off
    "audio_photo_tol": 1e-6,
    "audio_dedup_tol": 0.001,
    "audio_min_signal": 0.01,
    "audio_calibration_trials": 100,
}

PROFILES: Dict[str, Dict[str, Any]] = {
    "paper": dict(_BASE_PARAMS),
    "desk": {
        **_BASE_PARAMS,
        "grid": 51,
        "atlas_step": 0.2,
        "calibration_trials": 100,
        "calibration_perturbation": 0.02,
        "rigid_trials": 400,
        "medium_trials": 1000,
        "relpos_trials": 200,
        "audio_trials": 100,
        "audio_calibration_trials": 40,
    },
}


def resolve_profile(name: str) -> Dict[str, Any]:
    if name not in PROFILES:
        raise ConfigError(f"Unknown profile '{name}', expected one of {sorted(PROFILES)}")
    return {k: (list(v) if isinstance(v, list) else v) for k, v in PROFILES[name].items()}


def parse_value(text: str) -> Any:
    """Parse a ``--set`` value with TOML scalar/array syntax, falling back to a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _divides(extent: float, step: float) -> bool:
    ratio = extent / step
    return math.isclose(ratio, round(ratio), rel_tol=0, abs_tol=1e-9)


@dataclass
class RunConfig:
    """Everything one CLI run needs; ``params`` starts from a profile."""
    experiment: str = "atlas"
    profile: str = "desk"
    seed: int = 0
    threads: int = 1
    out: Path = Path("results")
    trials: Optional[int] = None
    timestamp: bool = False
    params: Dict[str, Any] = field(default_factory=lambda: resolve_profile("desk"))

    def __post_init__(self):
        self.logger = logging.getLogger(__name__)
        self.out = Path(self.out)

    @classmethod
    def from_profile(cls, profile: str = "desk", **kwargs) -> "RunConfig":
        return cls(profile=profile, params=resolve_profile(profile), **kwargs)

    def update(self, **kwargs) -> None:
        """Override profile parameters, logging each change"""
        for key, value in kwargs.items():
            if key not in self.params:
                raise ConfigError(f"Unknown parameter '{key}'")
            old = self.params[key]
            if old != value:
                self.params[key] = value
                self.logger.info(f"Parameter {key}: {old} -> {value}")

    def load_toml(self, path: Path) -> None:
        """Apply a TOML file: top-level keys are run fields, [params] overrides the profile."""
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Malformed config file {path}: {e}") from e
        if "profile" in data:
            self.profile = data["profile"]
            self.params = resolve_profile(self.profile)
        for key in ("seed", "threads", "trials"):
            if key in data:
                setattr(self, key, data[key])
        if "out" in data:
            self.out = Path(data["out"])
        self.update(**data.get("params", {}))

    def n_trials(self, experiment: Optional[str] = None) -> int:
        experiment = experiment or self.experiment
        if self.trials is not None:
            return self.trials
        key = TRIAL_KEYS.get(experiment)
        return int(self.params[key]) if key else 0

    def validate(self) -> List[str]:
        """Return one diagnostic per offending field; empty means valid."""
        errors = []
        p = self.params
        if self.experiment not in EXPERIMENTS:
            errors.append(f"experiment: unknown '{self.experiment}'")
        if self.profile not in PROFILES:
            errors.append(f"profile: unknown '{self.profile}'")
        if not isinstance(self.seed, int) or self.seed < 0:
            errors.append(f"seed: must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.threads, int) or self.threads < 1:
            errors.append(f"threads: must be >= 1, got {self.threads!r}")
        if self.trials is not None and (not isinstance(self.trials, int) or self.trials < 1):
            errors.append(f"trials: must be >= 1, got {self.trials!r}")
        if not isinstance(p.get("grid"), int) or p["grid"] < 2:
            errors.append(f"grid: must be an integer >= 2, got {p.get('grid')!r}")
        for key in ("photo_tol", "dedup_tol", "atlas_step", "atlas_extent", "medium_jump_step",
                    "medium_jump_extent", "rigid_max_difference", "relpos_offset_range", "object_photo_tol"):
            value = p.get(key)
            if not isinstance(value, (int, float)) or not value > 0:
                errors.append(f"{key}: must be > 0, got {value!r}")
        if not errors:
            if not _divides(p["atlas_extent"], p["atlas_step"]):
                errors.append(
                    f"atlas_step: {p['atlas_step']} does not divide atlas_extent {p['atlas_extent']}"
                )
            if not _divides(p["medium_jump_extent"], p["medium_jump_step"]):
                errors.append(
                    f"medium_jump_step: {p['medium_jump_step']} does not divide "
                    f"medium_jump_extent {p['medium_jump_extent']}"
                )
        for key in INTEGER_KEYS:
            value = p.get(key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                errors.append(f"{key}: must be a positive integer, got {value!r}")
        calibration_trials = p.get("calibration_trials")
        if isinstance(calibration_trials, int) and 1 <= calibration_trials < 20:
            errors.append(f"calibration_trials: must be >= 20, got {calibration_trials!r}")
        perturbation = p.get("calibration_perturbation")
        if not isinstance(perturbation, (int, float)) or not perturbation >= 0:
            errors.append(f"calibration_perturbation: must be >= 0, got {perturbation!r}")
        quantile = p.get("calibration_quantile")
        if not isinstance(quantile, (int, float)) or not 0 < quantile < 1:
            errors.append(f"calibration_quantile: must be in (0, 1), got {quantile!r}")
        segments = p.get("relpos_segments")
        if not isinstance(segments, list) or not segments or any(s not in (2, 3, 4) for s in segments):
            errors.append(f"relpos_segments: must be a non-empty subset of [2, 3, 4], got {segments!r}")
        return errors

    def notes(self) -> List[str]:
        """Non-fatal remarks about a valid configuration"""
        p = self.params
        notes = []
        spacing = 1.0 / (p["grid"] - 1)
        perturbation = p["calibration_perturbation"]
        if 0 < perturbation < spacing / 2:
            notes.append(f"calibration_perturbation: {perturbation} is below half the lattice step {spacing:.4g} "
                         f"and snaps to zero; thresholds will calibrate on identical jumps")
        return notes

    def snapshot(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "profile": self.profile,
            "seed": self.seed,
            "trials": self.n_trials(),
            "params": dict(self.params),
        }
