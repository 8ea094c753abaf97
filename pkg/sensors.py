"""Receptor models and environment scanning.

Tray agent (2D): proprioceptors p_j = exp(-d_j^2 / sigma_j^2) report where the
retina sits inside the body; photoreceptors s_j = sum_i I_i exp(-d_ij^2 / sigma_j^2)
respond to the light sources. The pedagogical 1D agent has one photoreceptor on
a muscle whose length is read through a fixed nonlinear proprioceptive map.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core import (
    AgentBody,
    ConfigError,
    Environment,
    OracleView,
    PhotoreceptorSpec,
    ProprioceptorSpec,
    RangeError,
    SmcTable,
    Square,
    Vec2,
    as_vec2,
    iter_chunks,
    stream_rng,
)

logger = logging.getLogger(__name__)

# Irregular 3-2-3 rows with no receptor at the centre. Neighbouring nodes of the
# 51 x 51 desk grid differ by at least 0.01 in some component.
DEFAULT_PROPRIOCEPTOR_LOCATIONS: Tuple[Tuple[float, float], ...] = (
    (0.08, 0.18),
    (0.50, 0.08),
    (0.88, 0.18),
    (0.30, 0.48),
    (0.72, 0.52),
    (0.10, 0.78),
    (0.50, 0.92),
    (0.88, 0.82),
)
DEFAULT_PROPRIO_ACUITY = 0.3
DEFAULT_N_PHOTORECEPTORS = 9
PHOTORECEPTOR_SQUARE = 0.3
PHOTO_ACUITY_RANGE = (0.03, 0.3)
DEFAULT_INTENSITY_RANGE = (0.5, 1.5)

BODY_STREAM = 7001

# Rows of the (nodes x receptors x sources) distance block per chunk.
_CHUNK_ELEMENTS = 2_000_000


@dataclass(frozen=True)
class ScanGrid:
    """Regular nx x ny grid over the retina range, both endpoints included."""
    nx: int = 201
    ny: int = 201

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"ScanGrid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")

    def __len__(self) -> int:
        return self.nx * self.ny

    def spacing(self, region: Square = Square()) -> Tuple[float, float]:
        return region.width / (self.nx - 1), region.height / (self.ny - 1)

    def nodes(self, region: Square = Square()) -> np.ndarray:
        """Node positions in row-major order (y outer, x inner)."""
        xs = np.linspace(region.lo.x, region.hi.x, self.nx)
        ys = np.linspace(region.lo.y, region.hi.y, self.ny)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    def coords(self, k) -> Tuple[np.ndarray, np.ndarray]:
        k = np.asarray(k)
        return k % self.nx, k // self.nx

    def describe(self) -> Dict[str, int]:
        return {"nx": self.nx, "ny": self.ny}


@dataclass(frozen=True)
class LineGrid:
    """Evenly spaced 1D scan with n nodes."""
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"LineGrid needs at least 2 nodes, got {self.n}")

    def __len__(self) -> int:
        return self.n

    def coords(self, k) -> Tuple[np.ndarray, np.ndarray]:
        k = np.asarray(k)
        return k, np.zeros_like(k)

    def describe(self) -> Dict[str, int]:
        return {"n": self.n}


@dataclass(frozen=True)
class Agent1D:
    """Photoreceptor on a muscle; proprioception p = 0.5 (1 + tanh(gain (x - 0.5)))."""
    sigma: float = 0.05
    travel: Tuple[float, float] = (0.0, 1.0)
    gain: float = 2.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"Agent1D sigma must be > 0, got {self.sigma}")
        if not self.travel[0] < self.travel[1]:
            raise ConfigError(f"Agent1D travel must be increasing, got {self.travel}")

    def proprio(self, x):
        return 0.5 * (1.0 + np.tanh(self.gain * (np.asarray(x, dtype=float) - 0.5)))

    def proprio_inverse(self, p):
        return 0.5 + np.arctanh(2.0 * np.asarray(p, dtype=float) - 1.0) / self.gain

    def proprio_slope(self, x):
        t = np.tanh(self.gain * (np.asarray(x, dtype=float) - 0.5))
        return 0.5 * self.gain * (1.0 - t * t)


def default_proprioceptors(acuity: float = DEFAULT_PROPRIO_ACUITY) -> Tuple[ProprioceptorSpec, ...]:
    return tuple(ProprioceptorSpec(Vec2(x, y), acuity) for x, y in DEFAULT_PROPRIOCEPTOR_LOCATIONS)


def random_photoreceptors(rng: np.random.Generator, n: int = DEFAULT_N_PHOTORECEPTORS,
                          side: float = PHOTORECEPTOR_SQUARE,
                          acuity_range: Tuple[float, float] = PHOTO_ACUITY_RANGE) -> Tuple[PhotoreceptorSpec, ...]:
    """Offsets drawn from a side x side square around the retina centre."""
    offsets = rng.uniform(-side / 2, side / 2, size=(n, 2))
    acuities = rng.uniform(acuity_range[0], acuity_range[1], size=n)
    return tuple(PhotoreceptorSpec(Vec2(float(x), float(y)), float(a)) for (x, y), a in zip(offsets, acuities))


def default_body(seed: int) -> AgentBody:
    """The body shared by every experiment of one run."""
    rng = stream_rng(seed, BODY_STREAM)
    body = AgentBody(default_proprioceptors(), random_photoreceptors(rng))
    logger.info(f"Built default body for seed {seed}: "
                f"photo acuities {np.round(body.photo_acuities(), 3).tolist()}")
    return body


def random_environment(rng: np.random.Generator, n: int, center: Vec2, side: float,
                       intensity_range: Tuple[float, float] = DEFAULT_INTENSITY_RANGE) -> Environment:
    """n sources uniform in a side x side square around center."""
    positions = rng.uniform(-side / 2, side / 2, size=(n, 2)) + center.as_array()
    intensities = rng.uniform(intensity_range[0], intensity_range[1], size=n)
    return Environment.from_arrays(positions, intensities)


def random_environment_1d(rng: np.random.Generator, n: int, lo: float, hi: float,
                          intensity_range: Tuple[float, float] = DEFAULT_INTENSITY_RANGE) -> List[Tuple[float, float]]:
    positions = rng.uniform(lo, hi, size=n)
    intensities = rng.uniform(intensity_range[0], intensity_range[1], size=n)
    return [(float(x), float(i)) for x, i in zip(positions, intensities)]


def _check_in_range(body: AgentBody, retina_pos: Vec2) -> None:
    if not body.retina_range.contains(retina_pos):
        raise RangeError(f"Retina position ({retina_pos.x}, {retina_pos.y}) outside retina range")


def proprio_responses(body: AgentBody, retina_positions: np.ndarray) -> np.ndarray:
    """Vectorised proprio_response over an (n, 2) array of retina positions."""
    retina_positions = np.atleast_2d(np.asarray(retina_positions, dtype=float))
    if not np.all(body.retina_range.contains_array(retina_positions)):
        raise RangeError("Retina position outside retina range")
    diff = retina_positions[:, None, :] - body.proprio_locations()[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    return np.exp(-d2 / body.proprio_acuities()[None, :] ** 2)


def proprio_response(body: AgentBody, retina_pos) -> np.ndarray:
    retina_pos = as_vec2(retina_pos)
    _check_in_range(body, retina_pos)
    return proprio_responses(body, retina_pos.as_array()[None, :])[0]


def _photo_block(rel_sources: np.ndarray, intensities: np.ndarray, offsets: np.ndarray,
                 inv_acuity2: np.ndarray, retina_positions: np.ndarray) -> np.ndarray:
    receptors = retina_positions[:, None, :] + offsets[None, :, :]
    diff = rel_sources[None, None, :, :] - receptors[:, :, None, :]
    d2 = np.sum(diff * diff, axis=-1)
    return np.exp(-d2 * inv_acuity2[None, :, None]) @ intensities


def photo_responses(env: Environment, body: AgentBody, agent_pos, retina_positions: np.ndarray,
                    workers: int = 1) -> np.ndarray:
    """Vectorised photo_response over an (n, 2) array of retina positions.

    Sources are taken relative to the agent before subtracting the receptor
    position, so only the relative geometry of agent and environment enters.
    """
    agent_pos = as_vec2(agent_pos)
    retina_positions = np.atleast_2d(np.asarray(retina_positions, dtype=float))
    n = len(retina_positions)
    if len(env) == 0:
        return np.zeros((n, body.n_photo))

    rel_sources = env.positions() - agent_pos.as_array()
    intensities = env.intensities()
    offsets = body.photo_offsets()
    inv_acuity2 = 1.0 / body.photo_acuities() ** 2

    chunk = max(1, _CHUNK_ELEMENTS // (body.n_photo * len(env)))
    bounds = list(iter_chunks(n, chunk))

    def work(bound):
        start, stop = bound
        return _photo_block(rel_sources, intensities, offsets, inv_acuity2, retina_positions[start:stop])

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(work, bounds))
    else:
        blocks = [work(b) for b in bounds]
    return np.vstack(blocks)


def photo_response(env: Environment, body: AgentBody, agent_pos, retina_pos) -> np.ndarray:
    retina_pos = as_vec2(retina_pos)
    _check_in_range(body, retina_pos)
    return photo_responses(env, body, agent_pos, retina_pos.as_array()[None, :])[0]


def scan(env: Environment, body: AgentBody, agent_pos, grid: ScanGrid, workers: int = 1) -> SmcTable:
    """Move the retina over every grid node and tabulate <p, s>."""
    agent_pos = as_vec2(agent_pos)
    nodes = grid.nodes(body.retina_range)
    p = proprio_responses(body, nodes)
    s = photo_responses(env, body, agent_pos, nodes, workers=workers)
    return SmcTable(p, s, grid, OracleView(nodes, agent_pos))


def scan_1d(agent: Agent1D, env_1d: Sequence[Tuple[float, float]], n_nodes: int,
            agent_pos: float = 0.0) -> SmcTable:
    """1D scan over the muscle travel; both p and s have one component."""
    grid = LineGrid(n_nodes)
    xs = np.linspace(agent.travel[0], agent.travel[1], n_nodes)
    p = agent.proprio(xs)[:, None]
    if len(env_1d):
        src = np.array([pos for pos, _ in env_1d], dtype=float) - agent_pos
        intensity = np.array([i for _, i in env_1d], dtype=float)
        d = src[None, :] - xs[:, None]
        s = (np.exp(-(d * d) / agent.sigma ** 2) @ intensity)[:, None]
    else:
        s = np.zeros((n_nodes, 1))
    return SmcTable(p, s, grid, OracleView(xs[:, None], Vec2(float(agent_pos), 0.0)))


class Scanner:
    """Scans environments for one body, remembering recent scans."""

    def __init__(self, body: AgentBody, grid: ScanGrid, workers: int = 1, cache_size: int = 64):
        self.body = body
        self.grid = grid
        self.workers = workers
        self.cache_size = cache_size
        self.cache: Dict[tuple, SmcTable] = {}
        self.logger = logging.getLogger(__name__)

    def _key(self, env: Environment, agent_pos: Vec2) -> tuple:
        return (env, agent_pos.x, agent_pos.y)

    def scan(self, env: Environment, agent_pos=Vec2.zero()) -> SmcTable:
        agent_pos = as_vec2(agent_pos)
        key = self._key(env, agent_pos)
        cached = self.cache.get(key)
        if cached is not None:
            self.logger.debug(f"Using cached scan at ({agent_pos.x:.3f}, {agent_pos.y:.3f})")
            return cached
        table = scan(env, self.body, agent_pos, self.grid, workers=self.workers)
        if len(self.cache) >= self.cache_size:
            # drop the oldest entry
            self.cache.pop(next(iter(self.cache)))
        self.cache[key] = table
        return table

    def clear_cache(self) -> None:
        self.cache.clear()
