"""Seeded Monte-Carlo experiments on learned phi-functions.

``ExperimentRunner`` owns one body, one parameter profile and one seed, and
runs the phi atlas, sensible rigid displacement, unchanging medium, relative
position and 1D demonstration procedures. Every trial draws from its own
counter-based generator, so reports do not depend on the number of workers.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import pairwise
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import reports
from config import resolve_profile
from core import (
    AgentBody,
    ConfigError,
    Environment,
    PhiFunction,
    RigidDisplacement,
    SimulationError,
    SmcTable,
    Square,
    Vec2,
    as_vec2,
    displace_environment,
    stream_rng,
    trial_rng,
)
from phi import (
    DisplacementPair,
    MatchConfig,
    PhiThreshold,
    arrow_field,
    calibrate_threshold,
    compose_phi,
    learn_displacement_phi,
    learn_phi,
    oracle_phi,
    phi_distance,
    phi_sup_gap,
    prediction_error,
    quantile_threshold,
    rich_pair_sampler,
    snap_to_lattice,
)
from sensors import (
    Agent1D,
    Scanner,
    ScanGrid,
    random_environment,
    random_environment_1d,
    scan,
    scan_1d,
)

logger = logging.getLogger(__name__)

# kind -> (number of lights, size); circle size is the radius, star size the ray length
SHAPES: Dict[str, Tuple[int, float]] = {
    "circle": (40, 0.1),
    "square": (40, 0.2),
    "triangle": (39, 0.2),
    "star": (40, 0.3),
}
SHAPE_KINDS = tuple(SHAPES)
STAR_RAYS = 5

ATLAS_STREAM = 7101
RELPOS_STREAM = 7102
CALIBRATION_OFFSET = 1_000_003

DEFORMATION_EDGES = (0.0, 0.005, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5)
JUMP_SIZE_EDGES = (0.0, 0.1, 0.2, 0.3, 0.43)
ATLAS_SIZE_EDGES = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5)

_MAX_TRIES = 200


@dataclass(frozen=True)
class ObjectShape:
    kind: str
    n_lights: int
    size: float

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ConfigError(f"Unknown shape '{self.kind}', expected one of {SHAPE_KINDS}")
        if (self.n_lights, self.size) != SHAPES[self.kind]:
            n, size = SHAPES[self.kind]
            raise ConfigError(f"A {self.kind} has {n} lights and size {size}")

    @classmethod
    def of(cls, kind: str) -> "ObjectShape":
        if kind not in SHAPES:
            raise ConfigError(f"Unknown shape '{kind}', expected one of {SHAPE_KINDS}")
        n, size = SHAPES[kind]
        return cls(kind, n, size)

    def offsets(self) -> np.ndarray:
        """Light positions relative to the object's centre."""
        n, s = self.n_lights, self.size
        if self.kind == "circle":
            angles = 2 * np.pi * np.arange(n) / n
            return s * np.column_stack([np.cos(angles), np.sin(angles)])
        if self.kind == "square":
            t = np.arange(n) * 4 * s / n
            side = np.minimum((t // s).astype(int), 3)
            u = t - side * s
            h = s / 2
            xs = np.select([side == 0, side == 1, side == 2], [-h + u, h + 0 * u, h - u], -h + 0 * u)
            ys = np.select([side == 0, side == 1, side == 2], [-h + 0 * u, -h + u, h + 0 * u], h - u)
            return np.column_stack([xs, ys])
        if self.kind == "triangle":
            per_side = n // 3
            radius = s / np.sqrt(3)
            angles = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
            vertices = radius * np.column_stack([np.cos(angles), np.sin(angles)])
            frac = np.arange(per_side) / per_side
            return np.vstack([
                vertices[j] + (vertices[(j + 1) % 3] - vertices[j]) * frac[:, None] for j in range(3)
            ])
        # star
        per_ray = n // STAR_RAYS
        radii = s * (np.arange(per_ray) + 1) / per_ray
        points = []
        for r in range(STAR_RAYS):
            angle = 2 * np.pi * r / STAR_RAYS + np.pi / 2
            points.append(np.column_stack([radii * np.cos(angle), radii * np.sin(angle)]))
        return np.vstack(points)


def object_environment(shape: ObjectShape, center, stretch: float = 1.0, intensity: float = 1.0) -> Environment:
    """Lights of ``shape`` around ``center``, stretched along x by ``stretch``."""
    if not stretch > 0:
        raise ConfigError(f"Stretch factor must be > 0, got {stretch}")
    center = as_vec2(center)
    positions = shape.offsets() * np.array([stretch, 1.0]) + center.as_array()
    return Environment.from_arrays(positions, np.full(len(positions), float(intensity)))


@dataclass(frozen=True)
class TrialRecord:
    """One trial. ``decision`` is "same" (or "unchanged") iff statistic <= threshold."""
    trial: int
    seed: int
    truth: bool
    statistic: Optional[float]
    threshold: float
    condition: Dict[str, Any] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def decision(self) -> bool:
        return self.statistic is not None and self.statistic <= self.threshold

    @property
    def correct(self) -> bool:
        return self.decision == self.truth

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "truth": self.truth,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "decision": self.decision,
            "correct": self.correct,
            "condition": self.condition,
            "extras": self.extras,
            "error": self.error,
        }


@dataclass(eq=False)
class ExperimentReport:
    experiment: str
    seed: int
    config: Dict[str, Any]
    threshold: Dict[str, Any]
    records: List[TrialRecord]
    curves: Dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    plot: Dict[str, Any] = field(default_factory=dict)
    plot_data: Any = None
    # contingency heatmap over the scan grid, rows are y
    heatmap: Optional[np.ndarray] = None

    def __post_init__(self):
        for name, curve in self.curves.items():
            if len(self.records) and int(curve["n"].sum()) != len(self.records):
                raise SimulationError(f"Curve '{name}' counts {int(curve['n'].sum())} of {len(self.records)} trials")

    def __len__(self) -> int:
        return len(self.records)

    def accuracy(self) -> float:
        return float(np.mean([r.correct for r in self.records])) if self.records else float("nan")

    def association_rate(self, where: Optional[Callable[[TrialRecord], bool]] = None) -> float:
        chosen = [r for r in self.records if where is None or where(r)]
        return float(np.mean([r.decision for r in chosen])) if chosen else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "config": self.config,
            "threshold": self.threshold,
            "summary": self.summary,
            "n_trials": len(self.records),
            "records": [r.to_dict() for r in self.records],
            "curves": {name: curve.to_dict(orient="records") for name, curve in sorted(self.curves.items())},
        }


@dataclass(frozen=True, eq=False)
class PhiAtlas:
    """One learned phi per destination of a square jump lattice around the start."""
    jump_step: float
    jump_extent: float
    jumps: np.ndarray
    phis: Tuple[PhiFunction, ...]
    grid: ScanGrid
    env: Environment

    def __len__(self) -> int:
        return len(self.phis)

    def index_of(self, jump) -> Optional[int]:
        jump = as_vec2(jump).as_array()
        dist = np.abs(self.jumps - jump).max(axis=1)
        k = int(np.argmin(dist))
        return k if dist[k] < self.jump_step / 2 else None

    def lookup(self, jump) -> Optional[PhiFunction]:
        k = self.index_of(jump)
        return None if k is None else self.phis[k]

    def items(self):
        return [(Vec2.from_array(j), phi) for j, phi in zip(self.jumps, self.phis)]


def atlas_jumps(jump_step: float, jump_extent: float) -> np.ndarray:
    """Destinations of the jump lattice, row-major with y outer."""
    ratio = jump_extent / jump_step
    n = int(round(ratio))
    if not math.isclose(ratio, n, rel_tol=0, abs_tol=1e-9):
        raise ConfigError(f"jump_step {jump_step} does not divide jump_extent {jump_extent}")
    offsets = (np.arange(n + 1) - n / 2) * jump_step
    gx, gy = np.meshgrid(offsets, offsets)
    return np.column_stack([gx.ravel(), gy.ravel()])


def run_phi_atlas(body: AgentBody, seed: int, grid: ScanGrid, jump_step: float, jump_extent: float,
                  cfg: MatchConfig = MatchConfig(), workers: int = 1, n_sources: int = 200,
                  side: float = 3.0) -> PhiAtlas:
    """Learn one phi per jump destination in a single rich environment."""
    jumps = atlas_jumps(jump_step, jump_extent)
    env = random_environment(stream_rng(seed, ATLAS_STREAM), n_sources, body.center, side)
    logger.info(f"Learning phi atlas: {len(jumps)} destinations, step {jump_step}, extent {jump_extent}")
    before = scan(env, body, Vec2.zero(), grid)

    def learn(jump):
        after = scan(env, body, Vec2.from_array(jump), grid)
        return learn_phi(before, after, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            phis = tuple(pool.map(learn, jumps))
    else:
        phis = tuple(learn(j) for j in jumps)
    n_empty = sum(phi.is_empty() for phi in phis)
    logger.info(f"Atlas completed: {len(phis) - n_empty}/{len(phis)} nonempty phi functions")
    return PhiAtlas(jump_step, jump_extent, jumps, phis, grid, env)


@dataclass(frozen=True)
class _RigidSetup:
    kind: str
    level: int
    env_ref: Environment
    d_ref: RigidDisplacement
    env_test: Environment
    d_test: RigidDisplacement


@dataclass(frozen=True)
class _MediumSetup:
    center: Vec2
    deformation: float
    jump: Vec2
    env: Environment
    env_deformed: Environment


@dataclass(eq=False)
class Demo1DResult:
    report: ExperimentReport
    before: SmcTable
    after: SmcTable
    phi: PhiFunction
    phi_other: PhiFunction
    curve: pd.DataFrame
    jitter_bound: float


class ExperimentRunner:
    """Runs seeded trial batches for one body and parameter profile"""

    def __init__(self, body: AgentBody, params: Optional[Dict[str, Any]] = None, seed: int = 0,
                 workers: int = 1):
        self.body = body
        self.params = dict(params) if params is not None else resolve_profile("desk")
        self.seed = int(seed)
        self.workers = max(1, int(workers))
        self.grid = ScanGrid(self.params["grid"], self.params["grid"])
        self.spacing = self.grid.spacing(body.retina_range)
        self.cfg = MatchConfig(self.params["photo_tol"], self.params["dedup_tol"])
        # a displaced object reproduces its readings up to round-off
        self.object_cfg = MatchConfig(self.params["object_photo_tol"], self.params["dedup_tol"],
                                      self.params["object_min_signal"])
        self.atlas_cache: Dict[Tuple[float, float], PhiAtlas] = {}
        self.threshold_cache: Dict[str, PhiThreshold] = {}
        self._relpos_ref: Optional[Tuple[Vec2, PhiFunction]] = None
        self.logger = logging.getLogger(__name__)

    # -- plumbing ----------------------------------------------------------

    def _map(self, fn, items: Sequence) -> list:
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def _run_trials(self, label: str, indices: Sequence[int], trial: Callable[[int], TrialRecord],
                    threshold: float) -> List[TrialRecord]:
        self.logger.info(f"Starting {label} run of {len(indices)} trials (seed {self.seed})")

        def guarded(i: int) -> TrialRecord:
            try:
                return trial(i)
            except Exception as e:
                self.logger.error(f"Error in {label} trial {i}: {str(e)}")
                return TrialRecord(i, self.seed + i, False, None, threshold, error=str(e))

        records = self._map(guarded, list(indices))
        failed = sum(r.error is not None for r in records)
        self.logger.info(f"{label.capitalize()} completed: {len(records) - failed}/{len(records)} trials")
        return records

    def _config(self, experiment: str, n_trials: int) -> Dict[str, Any]:
        return {
            "experiment": experiment,
            "seed": self.seed,
            "n_trials": n_trials,
            "grid": self.grid.describe(),
            "body": self.body.to_dict(),
            "params": dict(self.params),
        }

    def _calibration_trials(self) -> int:
        return int(self.params["calibration_trials"])

    def _random_point(self, rng: np.random.Generator, region: Square) -> Vec2:
        return Vec2(float(rng.uniform(region.lo.x, region.hi.x)), float(rng.uniform(region.lo.y, region.hi.y)))

    def _lattice_steps(self, length: float) -> int:
        return int(round(length / self.spacing[0]))

    # -- phi atlas ---------------------------------------------------------

    def phi_atlas(self, jump_step: Optional[float] = None, jump_extent: Optional[float] = None) -> PhiAtlas:
        """Atlas for the given lattice, cached per (step, extent)"""
        step = jump_step if jump_step is not None else self.params["atlas_step"]
        extent = jump_extent if jump_extent is not None else self.params["atlas_extent"]
        key = (float(step), float(extent))
        if key in self.atlas_cache:
            self.logger.info(f"Using cached atlas for step {step}, extent {extent}")
            return self.atlas_cache[key]
        atlas = run_phi_atlas(self.body, self.seed, self.grid, step, extent, self.cfg, workers=self.workers,
                              n_sources=self.params["atlas_sources"], side=self.params["atlas_side"])
        self.atlas_cache[key] = atlas
        return atlas

    def rich_threshold(self) -> PhiThreshold:
        """rho threshold for arbitrary jumps in rich environments"""
        if "rich" not in self.threshold_cache:
            sampler = rich_pair_sampler(self.body, self.grid, self.params["atlas_sources"], self.params["atlas_side"])
            self.threshold_cache["rich"] = self._calibrate(sampler, self.cfg)
        return self.threshold_cache["rich"]

    def _calibrate(self, sampler, cfg: MatchConfig) -> PhiThreshold:
        return calibrate_threshold(
            self.body, sampler, cfg, self._calibration_trials(), self.grid,
            seed=self.seed + CALIBRATION_OFFSET,
            quantile=self.params["calibration_quantile"],
            perturbation=self.params["calibration_perturbation"],
            workers=self.workers,
        )

    def atlas_report(self, threshold: Optional[PhiThreshold] = None) -> ExperimentReport:
        """Learned atlas checked against the phi that true geometry predicts."""
        atlas = self.phi_atlas()
        threshold = threshold or self.rich_threshold()

        def trial(i: int) -> TrialRecord:
            jump = Vec2.from_array(atlas.jumps[i])
            phi = atlas.phis[i]
            oracle = oracle_phi(self.body, RigidDisplacement(jump), self.grid)
            rho = phi_distance(phi, oracle, self.cfg.dedup_tol) if not phi.is_empty() else None
            return TrialRecord(
                i, self.seed, not oracle.is_empty(), rho, threshold.value,
                condition={"jump_size": jump.norm()},
                extras={"jump": [jump.x, jump.y], "phi_size": len(phi), "oracle_size": len(oracle)},
            )

        records = self._run_trials("atlas", range(len(atlas)), trial, threshold.value)
        curves = {"by_jump_size": reports.summarize(records, ["jump_size"], {"jump_size": ATLAS_SIZE_EDGES})}
        nonzero = [k for k in np.argsort(np.linalg.norm(atlas.jumps, axis=1), kind="stable")
                   if np.linalg.norm(atlas.jumps[k]) > 0 and not atlas.phis[k].is_empty()]
        plot_data = None
        if nonzero:
            k = int(nonzero[0])
            arrows = arrow_field(atlas.phis[k], self.grid)
            # thin out to about 20 arrows per axis
            stride = max(1, (self.grid.nx - 1) // 20)
            ix, iy = self.grid.coords(atlas.phis[k].domain_index)
            keep = (ix % stride == 0) & (iy % stride == 0)
            plot_data = arrows[keep].reset_index(drop=True)
        return ExperimentReport(
            "atlas", self.seed, self._config("atlas", len(records)), threshold.to_dict(), records, curves,
            summary={
                "n_functions": len(atlas),
                "n_nonempty": int(sum(not p.is_empty() for p in atlas.phis)),
                "accuracy": float(np.mean([r.correct for r in records])) if records else None,
            },
            plot={"kind": "arrows", "title": "phi atlas: smallest nonzero jump"} if plot_data is not None else {},
            plot_data=plot_data,
            heatmap=scan(atlas.env, self.body, Vec2.zero(), self.grid).s.sum(axis=1).reshape(
                self.grid.ny, self.grid.nx),
        )

    # -- sensible rigid displacement ----------------------------------------

    def _object_phi(self, env: Environment, d: RigidDisplacement) -> PhiFunction:
        before = scan(env, self.body, Vec2.zero(), self.grid)
        after = scan(displace_environment(env, d), self.body, Vec2.zero(), self.grid)
        return learn_phi(before, after, self.object_cfg)

    def _rigid_setup(self, rng: np.random.Generator, level: Optional[int] = None,
                     kind: Optional[str] = None) -> _RigidSetup:
        hx, hy = self.spacing
        fov = self.body.retina_range
        max_level = self._lattice_steps(self.params["rigid_max_difference"])
        if level is None:
            level = int(rng.integers(0, max_level + 1))

        drawn = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        kind = kind or drawn
        axis = int(rng.integers(2))
        main = level * int(rng.choice([-1, 1]))
        other = int(rng.integers(-level, level + 1))
        steps = (main, other) if axis == 0 else (other, main)
        difference = Vec2(steps[0] * hx, steps[1] * hy)

        # both objects must start and end inside the field of view
        for _ in range(_MAX_TRIES):
            ref_center = self._random_point(rng, fov)
            d_ref = snap_to_lattice(self._random_point(rng, fov) - ref_center, self.spacing)
            test_center = self._random_point(rng, fov)
            d_test = d_ref + difference
            if fov.contains(ref_center + d_ref) and fov.contains(test_center + d_test):
                break
        else:
            raise SimulationError("Could not place the displacements inside the field of view")
        d_ref = RigidDisplacement(d_ref)

        return _RigidSetup(
            kind, level,
            object_environment(ObjectShape.of("circle"), ref_center), d_ref,
            object_environment(ObjectShape.of(kind), test_center), RigidDisplacement(d_test),
        )

    def rigid_threshold(self) -> PhiThreshold:
        """Calibrated on reference/test pairs sharing the same displacement"""
        if "rigid" not in self.threshold_cache:
            def sampler(rng: np.random.Generator, perturbation: float) -> DisplacementPair:
                setup = self._rigid_setup(rng, level=0)
                noise = snap_to_lattice(Vec2(*rng.uniform(-perturbation, perturbation, size=2)), self.spacing)
                # a displaced environment is seen as the agent jumping the other way
                return DisplacementPair(
                    setup.env_ref, setup.d_ref.inverse(),
                    setup.env_test, RigidDisplacement(setup.d_test.delta + noise).inverse(),
                )
            self.threshold_cache["rigid"] = self._calibrate(sampler, self.object_cfg)
        return self.threshold_cache["rigid"]

    def rigid_displacement(self, n_trials: Optional[int] = None, threshold: Optional[PhiThreshold] = None,
                           level: Optional[int] = None, kind: Optional[str] = None) -> ExperimentReport:
        """Reference circle against a test object; ``level`` and ``kind`` pin the difference and shape."""
        n_trials = n_trials if n_trials is not None else int(self.params["rigid_trials"])
        threshold = threshold or self.rigid_threshold()
        hx = self.spacing[0]

        def trial(i: int) -> TrialRecord:
            setup = self._rigid_setup(trial_rng(self.seed, i), level, kind)
            phi_ref = self._object_phi(setup.env_ref, setup.d_ref)
            phi_test = self._object_phi(setup.env_test, setup.d_test)
            rho = phi_distance(phi_ref, phi_test, self.cfg.dedup_tol)
            if rho is None:
                self.logger.warning(f"Rigid trial {i}: phi functions share no domain")
            return TrialRecord(
                i, self.seed + i, setup.level == 0, rho, threshold.value,
                condition={"shape": setup.kind, "difference": setup.level * hx},
                extras={
                    "d_ref": [setup.d_ref.delta.x, setup.d_ref.delta.y],
                    "d_test": [setup.d_test.delta.x, setup.d_test.delta.y],
                    "phi_ref_size": len(phi_ref),
                    "phi_test_size": len(phi_test),
                },
            )

        records = self._run_trials("rigid displacement", range(n_trials), trial, threshold.value)
        curves = {
            "by_shape_difference": reports.summarize(records, ["shape", "difference"]),
            "by_difference": reports.summarize(records, ["difference"]),
        }
        return ExperimentReport(
            "rigid", self.seed, self._config("rigid", n_trials), threshold.to_dict(), records, curves,
            summary={"accuracy": _mean([r.correct for r in records]),
                     "association_rate_same": _mean([r.decision for r in records if r.truth])},
            plot={"curve": "by_shape_difference", "x": "difference", "series": "shape",
                  "y": "association_rate", "title": "Association with the reference displacement"},
        )

    # -- unchanging medium ---------------------------------------------------

    def _medium_setup(self, rng: np.random.Generator, force_unchanged: bool = False) -> _MediumSetup:
        p = self.params
        step = p["medium_jump_step"]
        m = int(round(p["medium_jump_extent"] / 2 / step))
        bound = p["medium_unchanged_bound"]
        side = p["medium_circle_region"]
        c = self.body.center
        region = Square(Vec2(c.x - side / 2, c.y - side / 2), Vec2(c.x + side / 2, c.y + side / 2))

        center = self._random_point(rng, region)
        unchanged = force_unchanged or rng.random() < p["medium_unchanged_fraction"]
        magnitude = rng.uniform(0.0, bound) if unchanged else rng.uniform(bound, p["medium_max_deformation"])
        deformation = float(magnitude * rng.choice([-1.0, 1.0]))
        circle = ObjectShape.of("circle")
        env = object_environment(circle, center)
        env_deformed = object_environment(circle, center, stretch=1.0 + deformation)
        lights = env_deformed.positions()

        fov = self.body.retina_range
        for _ in range(_MAX_TRIES):
            k = rng.integers(-m, m + 1, size=2)
            jump = Vec2(float(k[0] * step), float(k[1] * step))
            # the whole circle must stay visible from the jump destination
            seen = Square(fov.lo + jump, fov.hi + jump)
            if np.all(seen.contains_array(lights)):
                break
        else:
            raise SimulationError("No jump keeps the deformed circle in view")
        return _MediumSetup(center, deformation, jump, env, env_deformed)

    def _best_fit(self, atlas: PhiAtlas, before: SmcTable, after: SmcTable) -> Optional[Tuple[float, float, int]]:
        """(sum, mean, index) of the candidate with the smallest mean epsilon"""
        best = None
        for k, phi in enumerate(atlas.phis):
            if phi.is_empty():
                continue
            total, mean = prediction_error(phi, before, after)
            if best is None or mean < best[1]:
                best = (total, mean, k)
        return best

    def _medium_measure(self, setup: _MediumSetup, atlas: PhiAtlas) -> Dict[str, Any]:
        origin = Vec2.zero()
        before = scan(setup.env, self.body, origin, self.grid)
        after = scan(setup.env_deformed, self.body, setup.jump, self.grid)
        fit = self._best_fit(atlas, before, after)
        return {"fit": fit, "before": before, "after": after}

    def epsilon_threshold(self, n_trials: Optional[int] = None) -> PhiThreshold:
        """90% quantile (by default) of the best-fit epsilon over near-undeformed trials"""
        if "medium" in self.threshold_cache and n_trials is None:
            return self.threshold_cache["medium"]
        n_trials = n_trials or self._calibration_trials()
        if n_trials < 20:
            raise ConfigError(f"Calibration needs at least 20 trials, got {n_trials}")
        atlas = self.phi_atlas(self.params["medium_jump_step"], self.params["medium_jump_extent"])
        seed = self.seed + CALIBRATION_OFFSET
        self.logger.info(f"Calibrating epsilon threshold over {n_trials} trials (seed {seed})")

        def trial(i: int) -> Optional[float]:
            setup = self._medium_setup(trial_rng(seed, i), force_unchanged=True)
            fit = self._medium_measure(setup, atlas)["fit"]
            return None if fit is None else fit[1]

        values = self._map(trial, list(range(n_trials)))
        threshold = quantile_threshold(values, self.params["calibration_quantile"],
                                       self.params["medium_unchanged_bound"])
        self.threshold_cache["medium"] = threshold
        return threshold

    def unchanging_medium(self, n_trials: Optional[int] = None,
                          threshold: Optional[PhiThreshold] = None) -> ExperimentReport:
        n_trials = n_trials if n_trials is not None else int(self.params["medium_trials"])
        atlas = self.phi_atlas(self.params["medium_jump_step"], self.params["medium_jump_extent"])
        threshold = threshold or self.epsilon_threshold()
        bound = self.params["medium_unchanged_bound"]

        def trial(i: int) -> TrialRecord:
            setup = self._medium_setup(trial_rng(self.seed, i))
            measured = self._medium_measure(setup, atlas)
            fit, before, after = measured["fit"], measured["before"], measured["after"]
            jumped = scan(setup.env, self.body, setup.jump, self.grid)
            to_deformed, to_jumped = visual_distances(before, after, jumped)
            extras = {
                "deformation_signed": setup.deformation,
                "jump": [setup.jump.x, setup.jump.y],
                "visual_distance_deformed": to_deformed,
                "visual_distance_jumped": to_jumped,
                "visual_confound": to_deformed < to_jumped,
            }
            if fit is None:
                self.logger.warning(f"Medium trial {i}: no candidate phi fits")
                statistic = None
            else:
                total, statistic, k = fit
                best_jump = atlas.jumps[k]
                extras.update({
                    "epsilon_sum": total,
                    "best_jump": [float(best_jump[0]), float(best_jump[1])],
                    "best_is_true_jump": bool(np.abs(best_jump - setup.jump.as_array()).max() < 1e-9),
                })
            return TrialRecord(
                i, self.seed + i, abs(setup.deformation) < bound, statistic, threshold.value,
                condition={"deformation": abs(setup.deformation), "jump_size": setup.jump.norm()},
                extras=extras,
            )

        records = self._run_trials("unchanging medium", range(n_trials), trial, threshold.value)
        curves = {
            "by_deformation": reports.summarize(records, ["deformation"], {"deformation": DEFORMATION_EDGES}),
            "by_jump_size": reports.summarize(records, ["jump_size"], {"jump_size": JUMP_SIZE_EDGES}),
        }
        confound = [r.extras["visual_confound"] for r in records if "visual_confound" in r.extras]
        return ExperimentReport(
            "medium", self.seed, self._config("medium", n_trials), threshold.to_dict(), records, curves,
            summary={
                "accuracy": _mean([r.correct for r in records]),
                "accuracy_unchanged": _mean([r.correct for r in records if r.truth]),
                "visual_confound_rate": _mean(confound),
                "best_fit_true_jump_rate": _mean([r.extras.get("best_is_true_jump", False) for r in records]),
            },
            plot={"curve": "by_deformation", "x": "deformation", "y": "accuracy",
                  "title": "Detection of a changed medium"},
        )

    # -- relative position ---------------------------------------------------

    def relpos_reference(self) -> Tuple[Vec2, PhiFunction]:
        """Reference destination on the lattice and its single-jump phi"""
        if self._relpos_ref is None:
            dest = snap_to_lattice(Vec2(*self.params["relpos_destination"]), self.spacing)
            env = random_environment(stream_rng(self.seed, RELPOS_STREAM), self.params["atlas_sources"],
                                     self.body.center, self.params["atlas_side"])
            phi_ref = learn_displacement_phi(env, self.body, Vec2.zero(), RigidDisplacement(dest), self.grid,
                                             self.cfg)
            self._relpos_ref = (dest, phi_ref)
        return self._relpos_ref

    def relpos_threshold(self) -> PhiThreshold:
        if "relpos" not in self.threshold_cache:
            dest, _ = self.relpos_reference()
            sampler = rich_pair_sampler(self.body, self.grid, self.params["atlas_sources"],
                                        self.params["atlas_side"], fixed_jump=dest)
            self.threshold_cache["relpos"] = self._calibrate(sampler, self.cfg)
        return self.threshold_cache["relpos"]

    def _path_ok(self, path: List[Vec2]) -> bool:
        p = self.params
        for a, b in pairwise(path):
            if abs(b.x - a.x) > p["relpos_max_segment"] + 1e-9 or abs(b.y - a.y) > p["relpos_max_segment"] + 1e-9:
                return False
        xs = [v.x for v in path]
        ys = [v.y for v in path]
        region = self.body.retina_range
        # retina positions reachable from every point of the path
        return (region.width - (max(xs) - min(xs)) >= p["relpos_min_overlap"] - 1e-9
                and region.height - (max(ys) - min(ys)) >= p["relpos_min_overlap"] - 1e-9)

    def relpos_path(self, rng: np.random.Generator, n_segments: int, final: Vec2) -> Tuple[List[Vec2], bool]:
        """Lattice path origin -> final; returns (points, fell_back_to_straight_line)."""
        hx, hy = self.spacing
        half = self.params["relpos_intermediate_extent"] / 2
        mx, my = int(math.floor(half / hx + 1e-9)), int(math.floor(half / hy + 1e-9))
        for _ in range(_MAX_TRIES):
            steps = np.column_stack([rng.integers(-mx, mx + 1, size=n_segments - 1),
                                     rng.integers(-my, my + 1, size=n_segments - 1)])
            path = [Vec2.zero()] + [Vec2(float(ix * hx), float(iy * hy)) for ix, iy in steps] + [final]
            if self._path_ok(path):
                return path, False
        self.logger.warning(f"Falling back to a straight {n_segments}-segment path")
        path = [Vec2.zero()] + [snap_to_lattice(final.scaled(k / n_segments), self.spacing)
                                for k in range(1, n_segments)] + [final]
        return path, True

    def relative_position(self, n_trials: Optional[int] = None, segments: Optional[Sequence[int]] = None,
                          threshold: Optional[PhiThreshold] = None) -> ExperimentReport:
        p = self.params
        n_trials = n_trials if n_trials is not None else int(p["relpos_trials"])
        segments = list(segments if segments is not None else p["relpos_segments"])
        for n_seg in segments:
            if n_seg not in (2, 3, 4):
                raise ConfigError(f"n_segments must be 2, 3 or 4, got {n_seg}")
        dest, phi_ref = self.relpos_reference()
        threshold = threshold or self.relpos_threshold()
        hx = self.spacing[0]
        max_offset = self._lattice_steps(p["relpos_offset_range"])

        def trial(g: int) -> TrialRecord:
            n_seg = segments[g // n_trials]
            rng = trial_rng(self.seed, g)
            if rng.random() < p["relpos_zero_fraction"] or max_offset == 0:
                m = 0
            else:
                m = int(rng.integers(1, max_offset + 1)) * int(rng.choice([-1, 1]))
            final = dest + Vec2(m * hx, 0.0)
            path, straight = self.relpos_path(rng, n_seg, final)
            env = random_environment(rng, p["atlas_sources"], self.body.center, p["atlas_side"])
            scanner = Scanner(self.body, self.grid, cache_size=n_seg + 1)
            phis = [learn_phi(scanner.scan(env, a), scanner.scan(env, b), self.cfg) for a, b in pairwise(path)]
            composed = phis[0]
            for phi in phis[1:]:
                composed = compose_phi(phi, composed, self.cfg)
            rho = phi_distance(phi_ref, composed, self.cfg.dedup_tol)
            if composed.is_empty():
                self.logger.warning(f"Relative position trial {g}: empty composition")
            return TrialRecord(
                g, self.seed + g, m == 0, rho, threshold.value,
                condition={"n_segments": n_seg, "offset": m * hx},
                extras={
                    "path": [[v.x, v.y] for v in path],
                    "straight_line": straight,
                    "segment_sizes": [len(phi) for phi in phis],
                    "composition_size": len(composed),
                },
            )

        records = self._run_trials("relative position", range(n_trials * len(segments)), trial, threshold.value)
        curves = {"by_segments_offset": reports.summarize(records, ["n_segments", "offset"])}
        zero = {
            str(n): _mean([r.decision for r in records if r.truth and r.condition.get("n_segments") == n])
            for n in segments
        }
        return ExperimentReport(
            "relpos", self.seed, self._config("relpos", n_trials), threshold.to_dict(), records, curves,
            summary={"accuracy": _mean([r.correct for r in records]),
                     "association_rate_zero_offset": zero,
                     "destination": [dest.x, dest.y]},
            plot={"curve": "by_segments_offset", "x": "offset", "series": "n_segments",
                  "y": "association_rate", "title": "Association with the reference destination"},
        )

    # -- calibration entry point ---------------------------------------------

    def calibrate(self, experiment: str) -> PhiThreshold:
        if experiment == "atlas":
            return self.rich_threshold()
        if experiment == "rigid":
            return self.rigid_threshold()
        if experiment == "medium":
            return self.epsilon_threshold()
        if experiment == "relpos":
            return self.relpos_threshold()
        raise ConfigError(f"No threshold calibration for experiment '{experiment}'")


def visual_distances(before: SmcTable, after: SmcTable, jumped: SmcTable) -> Tuple[float, float]:
    """Raw exteroceptive distance of the original scan to the deformed and to the undeformed scan.

    Both later scans are taken after the same jump. When the first distance is
    the smaller one, the deformation cannot be spotted by comparing images.
    """
    return float(np.linalg.norm(before.s - after.s)), float(np.linalg.norm(before.s - jumped.s))


def _mean(values: Sequence) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def calibrate_epsilon_threshold(body: AgentBody, seed: int, n_trials: Optional[int] = None,
                                params: Optional[Dict[str, Any]] = None, workers: int = 1) -> PhiThreshold:
    return ExperimentRunner(body, params, seed, workers).epsilon_threshold(n_trials)


def run_rigid_displacement(body: AgentBody, seed: int, n_trials: Optional[int] = None,
                           params: Optional[Dict[str, Any]] = None, workers: int = 1,
                           threshold: Optional[PhiThreshold] = None) -> ExperimentReport:
    return ExperimentRunner(body, params, seed, workers).rigid_displacement(n_trials, threshold)


def run_unchanging_medium(body: AgentBody, seed: int, n_trials: Optional[int] = None,
                          params: Optional[Dict[str, Any]] = None, workers: int = 1,
                          threshold: Optional[PhiThreshold] = None) -> ExperimentReport:
    return ExperimentRunner(body, params, seed, workers).unchanging_medium(n_trials, threshold)


def run_relative_position(body: AgentBody, seed: int, n_trials: Optional[int] = None, n_segments=None,
                          params: Optional[Dict[str, Any]] = None, workers: int = 1,
                          threshold: Optional[PhiThreshold] = None) -> ExperimentReport:
    """``n_segments`` is one count or a sequence of counts from {2, 3, 4}."""
    if isinstance(n_segments, int):
        n_segments = [n_segments]
    return ExperimentRunner(body, params, seed, workers).relative_position(n_trials, n_segments, threshold)


# -- pedagogical 1D agent ----------------------------------------------------

def demo1d_config(params: Dict[str, Any]) -> MatchConfig:
    return MatchConfig(params["demo1d_photo_tol"], params["demo1d_dedup_tol"], params["demo1d_min_signal"])


def learn_phi_1d(agent: Agent1D, env_1d, n_nodes: int, shift: float,
                 cfg: MatchConfig) -> Tuple[SmcTable, SmcTable, PhiFunction]:
    before = scan_1d(agent, env_1d, n_nodes)
    after = scan_1d(agent, env_1d, n_nodes, agent_pos=shift)
    return before, after, learn_phi(before, after, cfg)


def oracle_curve_1d(agent: Agent1D, shift: float, n_nodes: int) -> pd.DataFrame:
    xs = np.linspace(agent.travel[0], agent.travel[1], n_nodes)
    targets = xs - shift
    inside = (targets >= agent.travel[0] - 1e-9) & (targets <= agent.travel[1] + 1e-9)
    return pd.DataFrame({"p": agent.proprio(xs[inside]), "pprime": agent.proprio(targets[inside])})


def jitter_bound_1d(agent: Agent1D, n_nodes: int, cfg: MatchConfig, tables: Sequence[SmcTable] = ()) -> float:
    """Largest proprioceptive error of a correct 1D match.

    A match may land one node off, and anywhere along a run of neighbouring lit
    nodes of ``tables`` whose readings stay within ``photo_tol`` of the run's
    first node.
    """
    longest = 0
    for table in tables:
        s = table.s[:, 0]
        lit = s >= cfg.min_signal
        for i in np.flatnonzero(lit):
            j = i + 1
            while j < len(s) and lit[j] and abs(s[j] - s[i]) < cfg.photo_tol:
                j += 1
            longest = max(longest, int(j - i - 1))
    xs = np.linspace(agent.travel[0], agent.travel[1], n_nodes)
    spacing = (agent.travel[1] - agent.travel[0]) / (n_nodes - 1)
    return float(np.max(agent.proprio_slope(xs)) * spacing * (1 + longest))


def run_1d_demo(agent: Agent1D = Agent1D(), seed: int = 0, n_trials: Optional[int] = None,
                shift: Optional[float] = None, params: Optional[Dict[str, Any]] = None) -> Demo1DResult:
    """Two random 1D worlds under one shift must teach the same phi curve."""
    params = dict(params) if params is not None else resolve_profile("desk")
    n_trials = n_trials if n_trials is not None else int(params["demo1d_trials"])
    n_nodes = int(params["demo1d_nodes"])
    cfg = demo1d_config(params)
    spacing = (agent.travel[1] - agent.travel[0]) / (n_nodes - 1)
    shift = params["demo1d_shift"] if shift is None else shift
    shift = float(np.rint(shift / spacing) * spacing)
    # grows with photo_tol once neighbouring readings blur together
    jitter = jitter_bound_1d(agent, n_nodes, cfg)
    n_sources = int(params["demo1d_sources"])
    logger.info(f"Starting 1D demo: {n_trials} environment pairs, shift {shift:.4g}")

    def worlds(i: int):
        rng = trial_rng(seed, i)
        return (random_environment_1d(rng, n_sources, -0.5, 1.5),
                random_environment_1d(rng, n_sources, -0.5, 1.5))

    records, first = [], None
    for i in range(n_trials):
        try:
            env_a, env_b = worlds(i)
            before, after, phi_a = learn_phi_1d(agent, env_a, n_nodes, shift, cfg)
            before_b, after_b, phi_b = learn_phi_1d(agent, env_b, n_nodes, shift, cfg)
            trial_jitter = jitter_bound_1d(agent, n_nodes, cfg, (before, after, before_b, after_b))
            jitter = max(jitter, trial_jitter)
            gap = phi_sup_gap(phi_a, phi_b, cfg.dedup_tol)
            records.append(TrialRecord(i, seed + i, True, gap, 2 * trial_jitter, condition={"shift": shift},
                                       extras={"phi_sizes": [len(phi_a), len(phi_b)], "jitter_bound": trial_jitter}))
            if first is None:
                first = (before, after, phi_a, phi_b)
        except Exception as e:
            logger.error(f"Error in 1D demo trial {i}: {str(e)}")
            records.append(TrialRecord(i, seed + i, True, None, 2 * jitter, error=str(e)))
    logger.info(f"1D demo completed: {sum(r.decision for r in records)}/{len(records)} pairs agree")

    if first is None:
        empty = PhiFunction.empty(1)
        before = after = scan_1d(agent, [], n_nodes)
        phi_a = phi_b = empty
    else:
        before, after, phi_a, phi_b = first
    oracle = oracle_curve_1d(agent, shift, n_nodes)
    curve = pd.concat([
        phi_a.to_frame().rename(columns={"p_1": "p", "pprime_1": "pprime"}).assign(series="world A"),
        phi_b.to_frame().rename(columns={"p_1": "p", "pprime_1": "pprime"}).assign(series="world B"),
        oracle.assign(series="oracle"),
    ], ignore_index=True)
    plot_data = {
        name: (group["p"].to_numpy(), group["pprime"].to_numpy())
        for name, group in curve.sort_values(["series", "p"]).groupby("series", sort=True)
    }
    report = ExperimentReport(
        "demo1d", seed,
        {"experiment": "demo1d", "seed": seed, "n_trials": n_trials, "shift": shift, "nodes": n_nodes,
         "agent": {"sigma": agent.sigma, "travel": list(agent.travel), "gain": agent.gain},
         "match": {"photo_tol": cfg.photo_tol, "dedup_tol": cfg.dedup_tol, "min_signal": cfg.min_signal}},
        {"value": 2 * jitter, "jitter_bound": jitter},
        records,
        {"by_shift": reports.summarize(records, ["shift"])},
        summary={"agreement_rate": _mean([r.decision for r in records]),
                 "max_gap": max((r.statistic for r in records if r.statistic is not None), default=None)},
        plot={"kind": "curves", "title": "phi learned in two 1D worlds", "xlabel": "p", "ylabel": "p'"},
        plot_data=plot_data,
    )
    return Demo1DResult(report, before, after, phi_a, phi_b, curve, jitter)
