"""Learning, comparing and composing phi-functions.

A phi-function is learned purely from two contingency tables: every pair of
scan nodes whose photoreceptor vectors coincide contributes the pair of their
proprioceptive vectors. Nothing here reads the oracle view of a table except
``oracle_phi``, which builds the reference answer from the body geometry.

Sign convention: ``jump`` / ``relative_displacement`` is the displacement of the
agent relative to the environment. A jump by d pairs p(x) with p(x - d).
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from core import (
    AgentBody,
    CalibrationError,
    ConfigError,
    Environment,
    PhiFunction,
    RigidDisplacement,
    SmcTable,
    Vec2,
    as_vec2,
    iter_chunks,
    trial_rng,
)
from sensors import Scanner, ScanGrid, proprio_responses, random_environment, scan

logger = logging.getLogger(__name__)

_MATCH_CHUNK = 1024
# Slack added to KD-tree radii so boundary points are never missed before the
# exact strict test.
_RADIUS_SLACK = 1e-9
_TIE_TOL = 1e-12
_LATTICE_TOL = 1e-9


@dataclass(frozen=True)
class MatchConfig:
    photo_tol: float = 0.005
    dedup_tol: float = 0.01
    # exteroceptor vectors whose largest component is below this see nothing
    min_signal: float = 0.0

    def __post_init__(self):
        if not self.photo_tol > 0:
            raise ConfigError(f"photo_tol must be > 0, got {self.photo_tol}")
        if not self.dedup_tol > 0:
            raise ConfigError(f"dedup_tol must be > 0, got {self.dedup_tol}")
        if not self.min_signal >= 0:
            raise ConfigError(f"min_signal must be >= 0, got {self.min_signal}")


@dataclass(frozen=True)
class PhiThreshold:
    value: float
    quantile: float = 0.9
    displacement_size: float = 0.005
    n_trials: int = 0
    n_undefined: int = 0
    samples: Tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if not self.value >= 0:
            raise ConfigError(f"Threshold must be >= 0, got {self.value}")

    def accepts(self, statistic: Optional[float]) -> bool:
        """Undefined statistics are never accepted."""
        return statistic is not None and statistic <= self.value

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "quantile": self.quantile,
            "displacement_size": self.displacement_size,
            "n_trials": self.n_trials,
            "n_undefined": self.n_undefined,
        }


# ---------------------------------------------------------------------------
# coincidence matching

def _visible(s: np.ndarray, min_signal: float) -> np.ndarray:
    if min_signal <= 0:
        return np.ones(len(s), dtype=bool)
    return s.max(axis=1) >= min_signal


def _match_naive(s_before: np.ndarray, s_after: np.ndarray, cfg: MatchConfig) -> Tuple[np.ndarray, np.ndarray]:
    """All-pairs reference matcher."""
    vis_before = _visible(s_before, cfg.min_signal)
    vis_after = _visible(s_after, cfg.min_signal)
    ks, kps = [], []
    for k in range(len(s_before)):
        if not vis_before[k]:
            continue
        close = (np.abs(s_after - s_before[k]).max(axis=1) < cfg.photo_tol) & vis_after
        hits = np.flatnonzero(close)
        ks.append(np.full(len(hits), k, dtype=np.int64))
        kps.append(hits.astype(np.int64))
    if not ks:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ks), np.concatenate(kps)


def _match_kdtree(s_before: np.ndarray, s_after: np.ndarray, cfg: MatchConfig,
                  workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Same accepted set as _match_naive, pruned with a Chebyshev KD-tree."""
    vis_before = _visible(s_before, cfg.min_signal)
    after_idx = np.flatnonzero(_visible(s_after, cfg.min_signal))
    if len(after_idx) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    tree = cKDTree(s_after[after_idx])
    radius = cfg.photo_tol * (1 + _RADIUS_SLACK)

    def work(bound):
        start, stop = bound
        ks, kps = [], []
        hits_per_row = tree.query_ball_point(s_before[start:stop], r=radius, p=np.inf)
        for offset, hits in enumerate(hits_per_row):
            k = start + offset
            if not vis_before[k] or not hits:
                continue
            cand = np.sort(after_idx[np.asarray(hits, dtype=np.int64)])
            close = np.abs(s_after[cand] - s_before[k]).max(axis=1) < cfg.photo_tol
            cand = cand[close]
            ks.append(np.full(len(cand), k, dtype=np.int64))
            kps.append(cand)
        return ks, kps

    bounds = list(iter_chunks(len(s_before), _MATCH_CHUNK))
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    ks = [a for part in parts for a in part[0]]
    kps = [a for part in parts for a in part[1]]
    if not ks:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ks), np.concatenate(kps)


def _dedup(domain: np.ndarray, image: np.ndarray, tol: float) -> np.ndarray:
    """Indices of pairs kept by first-wins deduplication, in input order."""
    m = len(domain)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    joined = np.hstack([domain, image])
    tree = cKDTree(joined)
    neighbours = tree.query_ball_point(joined, r=tol * (1 + _RADIUS_SLACK), p=np.inf)
    suppressed = np.zeros(m, dtype=bool)
    keep = []
    for i in range(m):
        if suppressed[i]:
            continue
        keep.append(i)
        nb = np.asarray(neighbours[i], dtype=np.int64)
        close = np.abs(joined[nb] - joined[i]).max(axis=1) < tol
        suppressed[nb[close]] = True
    return np.asarray(keep, dtype=np.int64)


def _build_phi(domain, image, domain_index, image_index, tol: float) -> PhiFunction:
    order = np.lexsort((image_index, domain_index))
    domain, image = domain[order], image[order]
    domain_index, image_index = domain_index[order], image_index[order]
    keep = _dedup(domain, image, tol)
    return PhiFunction(domain[keep], image[keep], domain_index[keep], image_index[keep])


def learn_phi(before: SmcTable, after: SmcTable, cfg: MatchConfig = MatchConfig(),
              method: str = "kdtree", workers: int = 1) -> PhiFunction:
    """Pair p_k with p'_k' wherever every photoreceptor agrees within photo_tol."""
    p_before, s_before = before.merkwelt()
    p_after, s_after = after.merkwelt()
    if p_before.shape[1] != p_after.shape[1] or s_before.shape[1] != s_after.shape[1]:
        raise ConfigError(
            f"Tables come from different bodies: p {p_before.shape[1]} vs {p_after.shape[1]}, "
            f"s {s_before.shape[1]} vs {s_after.shape[1]}"
        )
    if method == "kdtree":
        ks, kps = _match_kdtree(s_before, s_after, cfg, workers=workers)
    elif method == "naive":
        ks, kps = _match_naive(s_before, s_after, cfg)
    else:
        raise ConfigError(f"Unknown matching method: {method}")

    if len(ks) == 0:
        logger.debug("No coincidences between scans; phi is empty")
        return PhiFunction.empty(p_before.shape[1])
    return _build_phi(p_before[ks], p_after[kps], ks, kps, cfg.dedup_tol)


def learn_displacement_phi(env: Environment, body: AgentBody, agent_pos, jump: RigidDisplacement,
                           grid: ScanGrid, cfg: MatchConfig = MatchConfig(),
                           scanner: Optional[Scanner] = None, workers: int = 1) -> PhiFunction:
    """Scan, jump the agent by ``jump``, rescan and learn phi."""
    agent_pos = as_vec2(agent_pos)
    if scanner is not None:
        before = scanner.scan(env, agent_pos)
        after = scanner.scan(env, agent_pos + jump.delta)
    else:
        before = scan(env, body, agent_pos, grid, workers=workers)
        after = scan(env, body, agent_pos + jump.delta, grid, workers=workers)
    return learn_phi(before, after, cfg, workers=workers)


def oracle_phi(body: AgentBody, relative_displacement: RigidDisplacement, grid: ScanGrid) -> PhiFunction:
    """The phi a perfectly rich environment would teach, from true geometry."""
    region = body.retina_range
    nodes = grid.nodes(region)
    targets = nodes - relative_displacement.delta.as_array()[None, :]
    inside = region.contains_array(targets)
    k = np.flatnonzero(inside)
    if len(k) == 0:
        return PhiFunction.empty(body.n_proprio)
    targets = targets[k]
    # clip floating overshoot at the border back into the range
    targets[:, 0] = np.clip(targets[:, 0], region.lo.x, region.hi.x)
    targets[:, 1] = np.clip(targets[:, 1], region.lo.y, region.hi.y)
    hx, hy = grid.spacing(region)
    ix = np.rint((targets[:, 0] - region.lo.x) / hx).astype(np.int64)
    iy = np.rint((targets[:, 1] - region.lo.y) / hy).astype(np.int64)
    image_index = iy * grid.nx + ix
    # targets on the lattice reuse the scanned node response bit for bit
    p_nodes = proprio_responses(body, nodes)
    image = p_nodes[image_index]
    off_node = np.abs(nodes[image_index] - targets).max(axis=1) >= _LATTICE_TOL
    if off_node.any():
        image[off_node] = proprio_responses(body, targets[off_node])
    return PhiFunction(p_nodes[k], image, k.astype(np.int64), image_index)


# ---------------------------------------------------------------------------
# comparing and composing

def _nearest_matches(query: np.ndarray, reference: np.ndarray, tol: float) -> List[Tuple[int, np.ndarray]]:
    """For each query row, the reference rows at minimal Chebyshev distance < tol."""
    if len(query) == 0 or len(reference) == 0:
        return []
    tree = cKDTree(reference)
    dist, _ = tree.query(query, k=1, p=np.inf, distance_upper_bound=tol)
    matched = np.flatnonzero(dist < tol)
    if len(matched) == 0:
        return []
    radii = dist[matched] + _TIE_TOL
    hits = tree.query_ball_point(query[matched], r=radii, p=np.inf)
    result = []
    for i, cand in zip(matched, hits):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        d = np.abs(reference[cand] - query[i]).max(axis=1)
        result.append((int(i), cand[(d <= dist[i] + _TIE_TOL) & (d < tol)]))
    return result


def phi_distance(a: PhiFunction, b: PhiFunction, tol: float = 0.01) -> Optional[float]:
    """rho(a, b): summed euclidean image distance over matched domain values.

    Each pair of ``a`` is matched to the pairs of ``b`` whose domain value is the
    nearest one within ``tol`` (the same grid node when both phis come from one
    scan grid) and contributes its distance to the closest of their images, so
    rho(phi, phi) is 0 for a multivalued phi too. Not normalised by the number
    of matches. Returns None when no domain value is shared.
    """
    matches = _nearest_matches(a.domain, b.domain, tol)
    if not matches:
        return None
    total = 0.0
    for i, js in matches:
        total += float(np.min(np.linalg.norm(b.image[js] - a.image[i], axis=1)))
    return total


def phi_sup_gap(a: PhiFunction, b: PhiFunction, tol: float = 0.01) -> Optional[float]:
    """Sup-norm gap between two possibly multivalued phi curves on their shared domain.

    At each shared domain value the gap is the closest distance between an image
    of ``a`` and an image of ``b``.
    """
    matches = _nearest_matches(a.domain, b.domain, tol)
    if not matches:
        return None
    # group a's pairs by domain value so each value counts all of its images
    gap = 0.0
    for i, js in matches:
        same_a = np.flatnonzero(np.abs(a.domain - a.domain[i]).max(axis=1) <= _TIE_TOL)
        diff = a.image[same_a][:, None, :] - b.image[js][None, :, :]
        closest = float(np.abs(diff).max(axis=-1).min())
        gap = max(gap, closest)
    return gap


def compose_phi(second: PhiFunction, first: PhiFunction, cfg: MatchConfig = MatchConfig()) -> PhiFunction:
    """second o first: chain first's image into second's domain."""
    matches = _nearest_matches(first.image, second.domain, cfg.dedup_tol)
    if not matches:
        return PhiFunction.empty(first.n_proprio)
    firsts = np.concatenate([np.full(len(js), i, dtype=np.int64) for i, js in matches])
    seconds = np.concatenate([js for _, js in matches])
    return _build_phi(
        first.domain[firsts],
        second.image[seconds],
        first.domain_index[firsts],
        second.image_index[seconds],
        cfg.dedup_tol,
    )


def prediction_error(phi: PhiFunction, before: SmcTable, after: SmcTable) -> Optional[Tuple[float, float]]:
    """epsilon = sum_k ||s_k - s'_k'|| over phi's pairs, with its per-pair mean.

    Pairs are located in the tables by scan index, so phi must come from scans
    on the same grid.
    """
    if phi.is_empty():
        return None
    if len(before) != len(after):
        raise ConfigError("Tables must share one scan grid")
    s_before = before.merkwelt()[1]
    s_after = after.merkwelt()[1]
    if phi.domain_index.max() >= len(before) or phi.image_index.max() >= len(after):
        raise ConfigError("phi was learned on a different scan grid")
    norms = np.linalg.norm(s_before[phi.domain_index] - s_after[phi.image_index], axis=1)
    total = float(norms.sum())
    return total, total / len(norms)


def arrow_field(phi: PhiFunction, grid: ScanGrid) -> pd.DataFrame:
    """Arrows from each pair's domain node to its image node on the unfolded scan grid."""
    x0, y0 = grid.coords(phi.domain_index)
    x1, y1 = grid.coords(phi.image_index)
    sx = max(grid.nx - 1, 1)
    sy = max(grid.ny - 1, 1)
    return pd.DataFrame({
        "x0": np.asarray(x0, dtype=float) / sx,
        "y0": np.asarray(y0, dtype=float) / sy,
        "x1": np.asarray(x1, dtype=float) / sx,
        "y1": np.asarray(y1, dtype=float) / sy,
    })


# ---------------------------------------------------------------------------
# threshold calibration

@dataclass(frozen=True)
class DisplacementPair:
    """A reference and a test displacement, each with its own scene."""
    env_ref: Environment
    jump_ref: RigidDisplacement
    env_test: Environment
    jump_test: RigidDisplacement
    agent_ref: Vec2 = Vec2(0.0, 0.0)
    agent_test: Vec2 = Vec2(0.0, 0.0)


PairSampler = Callable[[np.random.Generator, float], DisplacementPair]


def snap_to_lattice(v: Vec2, spacing: Tuple[float, float]) -> Vec2:
    hx, hy = spacing
    return Vec2(float(np.rint(v.x / hx) * hx), float(np.rint(v.y / hy) * hy))


def perturbation_snaps_away(perturbation: float, spacing: Tuple[float, float]) -> bool:
    """True when a nonzero perturbation is too small to survive ``snap_to_lattice``."""
    return 0 < perturbation < min(spacing) / 2


def rich_pair_sampler(body: AgentBody, grid: ScanGrid, n_sources: int = 200, side: float = 3.0,
                      jump_range: float = 0.5, fixed_jump: Optional[Vec2] = None) -> PairSampler:
    """Two independent rich environments; test jump = reference jump + small perturbation.

    Jumps are snapped to the scan lattice, so the perturbation has to reach half a
    grid step before the test jump can differ from the reference jump.
    """
    spacing = grid.spacing(body.retina_range)
    center = body.center

    def sample(rng: np.random.Generator, perturbation: float) -> DisplacementPair:
        env_ref = random_environment(rng, n_sources, center, side)
        env_test = random_environment(rng, n_sources, center, side)
        if fixed_jump is None:
            ref = Vec2(*rng.uniform(-jump_range, jump_range, size=2))
        else:
            ref = fixed_jump
        ref = snap_to_lattice(ref, spacing)
        test = snap_to_lattice(ref + Vec2(*rng.uniform(-perturbation, perturbation, size=2)), spacing)
        return DisplacementPair(env_ref, RigidDisplacement(ref), env_test, RigidDisplacement(test))

    return sample


def calibrate_threshold(body: AgentBody, env_generator: PairSampler, cfg: MatchConfig, n_trials: int,
                        grid: ScanGrid, seed: int = 0, quantile: float = 0.9,
                        perturbation: float = 0.005, workers: int = 1) -> PhiThreshold:
    """Threshold under which ``quantile`` of near-identical displacements fall."""
    if n_trials < 20:
        raise ConfigError(f"Calibration needs at least 20 trials, got {n_trials}")
    logger.info(f"Calibrating phi threshold over {n_trials} trials (seed {seed})")
    if perturbation_snaps_away(perturbation, grid.spacing(body.retina_range)):
        logger.warning(f"Calibration perturbation {perturbation} is below half the lattice step "
                       f"{min(grid.spacing(body.retina_range))}; every snapped test jump equals its reference")

    def trial(i: int) -> Optional[float]:
        rng = trial_rng(seed, i)
        pair = env_generator(rng, perturbation)
        phi_ref = learn_displacement_phi(pair.env_ref, body, pair.agent_ref, pair.jump_ref, grid, cfg)
        phi_test = learn_displacement_phi(pair.env_test, body, pair.agent_test, pair.jump_test, grid, cfg)
        return phi_distance(phi_ref, phi_test, cfg.dedup_tol)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rhos = list(pool.map(trial, range(n_trials)))
    else:
        rhos = [trial(i) for i in range(n_trials)]

    return quantile_threshold(rhos, quantile, perturbation)


def quantile_threshold(statistics: Sequence[Optional[float]], quantile: float = 0.9,
                       displacement_size: float = 0.005) -> PhiThreshold:
    """Smallest sample value with at least ``quantile`` of the defined samples at or below it.

    Undefined samples (None) are left out; more than half undefined is an error.
    """
    n_trials = len(statistics)
    defined = np.array([r for r in statistics if r is not None], dtype=float)
    n_undefined = n_trials - len(defined)
    if n_trials == 0 or n_undefined > n_trials / 2:
        raise CalibrationError(f"{n_undefined}/{n_trials} calibration trials had an undefined statistic")
    if n_undefined:
        logger.warning(f"{n_undefined}/{n_trials} calibration trials had an undefined statistic")
    value = float(np.quantile(defined, quantile, method="higher"))
    logger.info(f"Calibrated threshold {value:.6g} at quantile {quantile}")
    return PhiThreshold(value, quantile, displacement_size, n_trials, n_undefined, tuple(float(r) for r in defined))
