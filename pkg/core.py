"""Shared domain types for the sensorimotor space simulator.

Everything here is an immutable value: vectors, displacements, light sources,
environments, body specifications, contingency tables and phi-functions.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class SimulationError(Exception):
    """Base class for simulator errors"""


class RangeError(SimulationError, ValueError):
    """A sensor was asked for a position outside its admissible range"""


class ConfigError(SimulationError):
    """Invalid configuration or incompatible inputs"""


class CalibrationError(SimulationError):
    """Threshold calibration could not produce a usable value"""


def trial_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator for one trial; sub-seed is seed + index."""
    return np.random.Generator(np.random.Philox(int(seed) + int(index)))


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Generator for a named side stream (body layout, reference scenes)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Vec2 components must be finite, got ({self.x}, {self.y})")

    def __add__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x - other.x, self.y - other.y)

    def __neg__(self) -> "Vec2":
        return Vec2(-self.x, -self.y)

    def scaled(self, k: float) -> "Vec2":
        return Vec2(self.x * k, self.y * k)

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Vec2":
        return cls(float(values[0]), float(values[1]))

    @classmethod
    def zero(cls) -> "Vec2":
        return cls(0.0, 0.0)


@dataclass(frozen=True)
class RigidDisplacement:
    """A pure translation; the only rigid motion the tray agent can compensate."""
    delta: Vec2

    @classmethod
    def identity(cls) -> "RigidDisplacement":
        return cls(Vec2.zero())

    @classmethod
    def of(cls, dx: float, dy: float) -> "RigidDisplacement":
        return cls(Vec2(float(dx), float(dy)))

    def inverse(self) -> "RigidDisplacement":
        return RigidDisplacement(-self.delta)


def compose_displacements(a: RigidDisplacement, b: RigidDisplacement) -> RigidDisplacement:
    return RigidDisplacement(a.delta + b.delta)


@dataclass(frozen=True)
class LightSource:
    position: Vec2
    intensity: float = 1.0

    def __post_init__(self):
        if not self.intensity >= 0:
            raise ValueError(f"Light intensity must be >= 0, got {self.intensity}")


@dataclass(frozen=True)
class Environment:
    sources: Tuple[LightSource, ...] = ()

    def __post_init__(self):
        # accept any iterable but store a tuple
        object.__setattr__(self, "sources", tuple(self.sources))

    def __len__(self) -> int:
        return len(self.sources)

    def positions(self) -> np.ndarray:
        if not self.sources:
            return np.zeros((0, 2))
        return np.array([[s.position.x, s.position.y] for s in self.sources], dtype=float)

    def intensities(self) -> np.ndarray:
        return np.array([s.intensity for s in self.sources], dtype=float)

    @classmethod
    def from_arrays(cls, positions: np.ndarray, intensities: np.ndarray) -> "Environment":
        return cls(tuple(
            LightSource(Vec2(float(x), float(y)), float(i))
            for (x, y), i in zip(np.asarray(positions, dtype=float), np.asarray(intensities, dtype=float))
        ))

    def merged(self, other: "Environment") -> "Environment":
        return Environment(self.sources + other.sources)

    def to_dict(self) -> Dict[str, Any]:
        return {"sources": [
            {"x": s.position.x, "y": s.position.y, "intensity": s.intensity}
            for s in self.sources
        ]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Environment":
        try:
            return cls(tuple(
                LightSource(Vec2(float(src["x"]), float(src["y"])), float(src.get("intensity", 1.0)))
                for src in data["sources"]
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed environment document: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        return cls.from_dict(json.loads(text))


def displace_environment(env: Environment, d: RigidDisplacement) -> Environment:
    """Translate every source by d.delta, keeping order and intensities."""
    return Environment(tuple(
        LightSource(s.position + d.delta, s.intensity) for s in env.sources
    ))


@dataclass(frozen=True)
class Square:
    """Axis-aligned square region [lo, hi] (both corners inclusive)."""
    lo: Vec2 = Vec2(0.0, 0.0)
    hi: Vec2 = Vec2(1.0, 1.0)

    @property
    def center(self) -> Vec2:
        return Vec2((self.lo.x + self.hi.x) / 2, (self.lo.y + self.hi.y) / 2)

    @property
    def width(self) -> float:
        return self.hi.x - self.lo.x

    @property
    def height(self) -> float:
        return self.hi.y - self.lo.y

    def contains(self, point: Vec2, tol: float = 1e-9) -> bool:
        return (self.lo.x - tol <= point.x <= self.hi.x + tol
                and self.lo.y - tol <= point.y <= self.hi.y + tol)

    def contains_array(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        points = np.atleast_2d(points)
        return ((points[:, 0] >= self.lo.x - tol) & (points[:, 0] <= self.hi.x + tol)
                & (points[:, 1] >= self.lo.y - tol) & (points[:, 1] <= self.hi.y + tol))


@dataclass(frozen=True)
class ProprioceptorSpec:
    location: Vec2
    acuity: float = 0.3

    def __post_init__(self):
        if not self.acuity > 0:
            raise ValueError(f"Proprioceptor acuity must be > 0, got {self.acuity}")


@dataclass(frozen=True)
class PhotoreceptorSpec:
    offset: Vec2
    acuity: float

    def __post_init__(self):
        if not self.acuity > 0:
            raise ValueError(f"Photoreceptor acuity must be > 0, got {self.acuity}")


@dataclass(frozen=True)
class AgentBody:
    """Tray body: proprioceptors on the body, photoreceptors on the mobile retina.

    ``agent_pos`` used throughout is the world position of the body frame origin,
    so a retina at ``retina_pos`` has its centre at ``agent_pos + retina_pos``.
    The agent's field of view is centred at ``agent_pos + retina_range.center``.
    """
    proprioceptors: Tuple[ProprioceptorSpec, ...]
    photoreceptors: Tuple[PhotoreceptorSpec, ...]
    retina_range: Square = Square()

    def __post_init__(self):
        object.__setattr__(self, "proprioceptors", tuple(self.proprioceptors))
        object.__setattr__(self, "photoreceptors", tuple(self.photoreceptors))
        if not self.proprioceptors or not self.photoreceptors:
            raise ConfigError("AgentBody needs at least one proprioceptor and one photoreceptor")

    @property
    def n_proprio(self) -> int:
        return len(self.proprioceptors)

    @property
    def n_photo(self) -> int:
        return len(self.photoreceptors)

    @property
    def center(self) -> Vec2:
        return self.retina_range.center

    def proprio_locations(self) -> np.ndarray:
        return np.array([[p.location.x, p.location.y] for p in self.proprioceptors])

    def proprio_acuities(self) -> np.ndarray:
        return np.array([p.acuity for p in self.proprioceptors])

    def photo_offsets(self) -> np.ndarray:
        return np.array([[p.offset.x, p.offset.y] for p in self.photoreceptors])

    def photo_acuities(self) -> np.ndarray:
        return np.array([p.acuity for p in self.photoreceptors])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "proprioceptors": [
                {"x": p.location.x, "y": p.location.y, "acuity": p.acuity} for p in self.proprioceptors
            ],
            "photoreceptors": [
                {"x": p.offset.x, "y": p.offset.y, "acuity": p.acuity} for p in self.photoreceptors
            ],
            "retina_range": [self.retina_range.lo.x, self.retina_range.lo.y,
                             self.retina_range.hi.x, self.retina_range.hi.y],
        }


# Proprioception and photoreception vectors are plain float arrays.
ProprioVector = np.ndarray
PhotoVector = np.ndarray


@dataclass(frozen=True)
class SmcSample:
    p: ProprioVector
    s: PhotoVector


@dataclass(frozen=True)
class OracleView:
    """True sensor positions behind a table. Only tests and oracles read this."""
    positions: np.ndarray
    agent_pos: Optional[Vec2] = None


@dataclass(frozen=True, eq=False)
class SmcTable:
    """Tabulated sensorimotor contingency of one scan.

    Rows follow the scan order of ``grid``. ``p`` and ``s`` are everything the
    learning code may read; the oracle view is kept out of ``merkwelt()``.
    """
    p: np.ndarray
    s: np.ndarray
    grid: Any
    _oracle: Optional[OracleView] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.p.ndim != 2 or self.s.ndim != 2 or len(self.p) != len(self.s):
            raise ConfigError(f"Inconsistent table shapes p={self.p.shape} s={self.s.shape}")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.s))):
            raise ConfigError("SmcTable values must be finite")

    def __len__(self) -> int:
        return len(self.p)

    @property
    def n_proprio(self) -> int:
        return self.p.shape[1]

    @property
    def n_photo(self) -> int:
        return self.s.shape[1]

    def merkwelt(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.p, self.s

    def samples(self) -> List[SmcSample]:
        return [SmcSample(p, s) for p, s in zip(self.p, self.s)]

    def without_oracle(self) -> "SmcTable":
        return SmcTable(self.p, self.s, self.grid)

    def to_frame(self):
        data = {f"p_{j + 1}": self.p[:, j] for j in range(self.n_proprio)}
        data.update({f"s_{j + 1}": self.s[:, j] for j in range(self.n_photo)})
        return pd.DataFrame(data)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g")


def oracle_view(table: SmcTable) -> OracleView:
    """Ground-truth positions of a scan, for tests and oracle comparisons."""
    if table._oracle is None:
        raise SimulationError("Table carries no oracle view")
    return table._oracle


@dataclass(frozen=True, eq=False)
class PhiFunction:
    """Finite set of proprioceptive pairs <p, p'>: a sensible rigid displacement.

    ``domain_index``/``image_index`` are the scan-order indices the pair came
    from (agent-side knowledge: they are its own motor commands). Pairs are kept
    sorted by domain index, then image index.
    """
    domain: np.ndarray
    image: np.ndarray
    domain_index: np.ndarray
    image_index: np.ndarray

    def __post_init__(self):
        n = len(self.domain)
        if len(self.image) != n or len(self.domain_index) != n or len(self.image_index) != n:
            raise ConfigError("PhiFunction arrays must have equal length")

    @classmethod
    def empty(cls, n_proprio: int) -> "PhiFunction":
        return cls(np.zeros((0, n_proprio)), np.zeros((0, n_proprio)),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.domain)

    @property
    def n_proprio(self) -> int:
        return self.domain.shape[1]

    def is_empty(self) -> bool:
        return len(self) == 0

    @property
    def pairs(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.domain, self.image))

    def to_frame(self):
        data = {f"p_{j + 1}": self.domain[:, j] for j in range(self.n_proprio)}
        data.update({f"pprime_{j + 1}": self.image[:, j] for j in range(self.n_proprio)})
        return pd.DataFrame(data)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g")


def as_vec2(value: Union[Vec2, Sequence[float], np.ndarray]) -> Vec2:
    if isinstance(value, Vec2):
        return value
    return Vec2.from_array(value)


def iter_chunks(n: int, size: int) -> Iterable[Tuple[int, int]]:
    """Fixed-size [start, stop) chunks; boundaries never depend on thread count."""
    for start in range(0, n, size):
        yield start, min(start + size, n)
