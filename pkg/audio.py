"""Hair-cell agent: a tunable resonator listening to notes and chords.

The cell's eigenfrequency plays the part of the retina position. Its
proprioceptor reads the eigenfrequency through a monotone map, and the single
exteroceptor is the resonance amplitude. Transposing the sound by a factor k
then acts on the cell the way a rigid displacement acts on the tray agent.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import reports
from config import resolve_profile
from core import ConfigError, OracleView, PhiFunction, RangeError, SmcTable, Vec2, stream_rng, trial_rng
from experiments import ExperimentReport, TrialRecord
from phi import MatchConfig, PhiThreshold, compose_phi, learn_phi, phi_distance, quantile_threshold
from sensors import LineGrid

logger = logging.getLogger(__name__)

CALIBRATION_OFFSET = 2_000_003
GROUP_LAW_STREAM = 7201
DEFAULT_AMPLITUDE_RANGE = (0.5, 1.5)


@dataclass(frozen=True)
class Chord:
    """Notes as (frequency in Hz, amplitude) pairs; one note is a pure tone."""
    notes: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        notes = tuple((float(f), float(a)) for f, a in self.notes)
        for f, a in notes:
            if not (math.isfinite(f) and f > 0):
                raise ConfigError(f"Note frequency must be > 0, got {f}")
            if not (math.isfinite(a) and a >= 0):
                raise ConfigError(f"Note amplitude must be >= 0, got {a}")
        object.__setattr__(self, "notes", notes)

    def __len__(self) -> int:
        return len(self.notes)

    @classmethod
    def note(cls, frequency: float, amplitude: float = 1.0) -> "Chord":
        return cls(((frequency, amplitude),))

    def transposed(self, k: float) -> "Chord":
        if not k > 0:
            raise ConfigError(f"Transposition factor must be > 0, got {k}")
        return Chord(tuple((f * k, a) for f, a in self.notes))

    def merged(self, other: "Chord") -> "Chord":
        return Chord(self.notes + other.notes)

    def frequencies(self) -> np.ndarray:
        return np.array([f for f, _ in self.notes], dtype=float)

    def amplitudes(self) -> np.ndarray:
        return np.array([a for _, a in self.notes], dtype=float)

    def to_json(self) -> str:
        return json.dumps([{"freq": f, "amp": a} for f, a in self.notes])

    @classmethod
    def from_json(cls, text: str) -> "Chord":
        try:
            return cls(tuple((item["freq"], item.get("amp", 1.0)) for item in json.loads(text)))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed chord document: {e}") from e


@dataclass(frozen=True)
class HairCell:
    """Eigenfrequency range, resonance width in log-frequency, proprioceptive gain."""
    f_min: float = 100.0
    f_max: float = 1600.0
    width: float = 0.05
    gain: float = 2.0

    def __post_init__(self):
        if not 0 < self.f_min < self.f_max:
            raise ConfigError(f"Need 0 < f_min < f_max, got [{self.f_min}, {self.f_max}]")
        if not self.width > 0:
            raise ConfigError(f"Resonance width must be > 0, got {self.width}")
        if not self.gain > 0:
            raise ConfigError(f"Proprioceptive gain must be > 0, got {self.gain}")

    def _unit(self, f):
        return (np.log(f) - math.log(self.f_min)) / (math.log(self.f_max) - math.log(self.f_min))

    def proprio(self, f_eigen):
        """p = 0.5 (1 + tanh(gain (u - 0.5))) with u the normalised log-frequency."""
        return 0.5 * (1.0 + np.tanh(self.gain * (self._unit(np.asarray(f_eigen, dtype=float)) - 0.5)))

    def proprio_inverse(self, p):
        u = 0.5 + np.arctanh(2.0 * np.asarray(p, dtype=float) - 1.0) / self.gain
        return np.exp(math.log(self.f_min) + u * (math.log(self.f_max) - math.log(self.f_min)))

    def eigenfrequencies(self, n_nodes: int) -> np.ndarray:
        """Log-uniform scan grid, both ends included."""
        if n_nodes < 2:
            raise ConfigError(f"Need at least 2 scan nodes, got {n_nodes}")
        return np.exp(np.linspace(math.log(self.f_min), math.log(self.f_max), n_nodes))

    def step_ratio(self, n_nodes: int) -> float:
        """Frequency ratio between neighbouring scan nodes."""
        return (self.f_max / self.f_min) ** (1.0 / (n_nodes - 1))

    def in_range(self, f_eigen) -> np.ndarray:
        f = np.asarray(f_eigen, dtype=float)
        return (f >= self.f_min * (1 - 1e-12)) & (f <= self.f_max * (1 + 1e-12))


def haircell_responses(chord: Chord, f_eigen: np.ndarray, cell: HairCell) -> np.ndarray:
    f_eigen = np.atleast_1d(np.asarray(f_eigen, dtype=float))
    if not np.all(cell.in_range(f_eigen)):
        raise RangeError(f"Eigenfrequency outside [{cell.f_min}, {cell.f_max}]")
    if len(chord) == 0:
        return np.zeros(len(f_eigen))
    log_ratio = np.log(chord.frequencies()[None, :] / f_eigen[:, None])
    return np.exp(-(log_ratio ** 2) / cell.width ** 2) @ chord.amplitudes()


def haircell_response(chord: Chord, f_eigen: float, cell: HairCell = HairCell()) -> float:
    """s = sum_i A_i exp(-ln^2(f_i / f) / w^2)."""
    return float(haircell_responses(chord, np.array([f_eigen]), cell)[0])


def haircell_scan(chord: Chord, cell: HairCell, n_nodes: int) -> SmcTable:
    freqs = cell.eigenfrequencies(n_nodes)
    p = cell.proprio(freqs)[:, None]
    s = haircell_responses(chord, freqs, cell)[:, None]
    return SmcTable(p, s, LineGrid(n_nodes), OracleView(np.log(freqs)[:, None], Vec2.zero()))


def audio_match_config(params: Dict[str, Any]) -> MatchConfig:
    return MatchConfig(params["audio_photo_tol"], params["audio_dedup_tol"], params["audio_min_signal"])


def audio_learn_phi(before: Chord, after: Chord, cell: HairCell, n_nodes: int,
                    match_tol: Union[MatchConfig, float, None] = None) -> PhiFunction:
    """Scan the eigenfrequency range for both sounds and learn phi."""
    if n_nodes < 2:
        raise ConfigError(f"Need at least 2 scan nodes, got {n_nodes}")
    if isinstance(match_tol, MatchConfig):
        cfg = match_tol
    else:
        defaults = resolve_profile("desk")
        cfg = audio_match_config(defaults)
        if match_tol is not None:
            cfg = MatchConfig(float(match_tol), defaults["audio_dedup_tol"], defaults["audio_min_signal"])
    return learn_phi(haircell_scan(before, cell, n_nodes), haircell_scan(after, cell, n_nodes), cfg)


def audio_oracle_phi(cell: HairCell, steps: int, n_nodes: int) -> PhiFunction:
    """p -> proprio(k proprio^-1(p)) for k = step_ratio ** steps, on scan nodes."""
    idx = np.arange(n_nodes)
    target = idx + steps
    inside = (target >= 0) & (target < n_nodes)
    freqs = cell.eigenfrequencies(n_nodes)
    k, kp = idx[inside], target[inside]
    return PhiFunction(cell.proprio(freqs[k])[:, None], cell.proprio(freqs[kp])[:, None],
                       k.astype(np.int64), kp.astype(np.int64))


def restrict_to_oracle(phi: PhiFunction, oracle: PhiFunction) -> PhiFunction:
    """Keep the pairs of phi that the oracle also contains (by scan index)."""
    if phi.is_empty() or oracle.is_empty():
        return PhiFunction.empty(phi.n_proprio)
    truth = dict(zip(oracle.domain_index.tolist(), oracle.image_index.tolist()))
    keep = np.array([truth.get(int(d)) == int(i) for d, i in zip(phi.domain_index, phi.image_index)])
    return PhiFunction(phi.domain[keep], phi.image[keep], phi.domain_index[keep], phi.image_index[keep])


class AudioExperiment:
    """Note-versus-chord transposition trials for one hair cell"""

    def __init__(self, cell: HairCell = HairCell(), params: Optional[Dict[str, Any]] = None, seed: int = 0,
                 workers: int = 1):
        self.cell = cell
        self.params = dict(params) if params is not None else resolve_profile("desk")
        self.seed = int(seed)
        self.workers = max(1, int(workers))
        self.n_nodes = int(self.params["audio_nodes"])
        self.cfg = audio_match_config(self.params)
        self.ratio = cell.step_ratio(self.n_nodes)
        self.logger = logging.getLogger(__name__)

    def _map(self, fn, items: Sequence) -> list:
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def random_note(self, rng: np.random.Generator, margin: float = 0.25) -> Chord:
        """Tone log-uniform in the inner part of the cell's range."""
        lo, hi = math.log(self.cell.f_min), math.log(self.cell.f_max)
        pad = margin * (hi - lo)
        return Chord.note(math.exp(rng.uniform(lo + pad, hi - pad)), rng.uniform(*DEFAULT_AMPLITUDE_RANGE))

    def _pair(self, rng: np.random.Generator, same: bool) -> Tuple[Chord, Chord, int, int]:
        """Reference tone and a chord containing it, with their transposition steps."""
        max_steps = int(self.params["audio_max_transposition"])
        note = self.random_note(rng)
        chord = note.merged(self.random_note(rng, margin=0.0))
        m_ref = int(rng.integers(-max_steps, max_steps + 1))
        if same:
            m_test = m_ref
        else:
            diff = int(rng.integers(1, max_steps + 1)) * int(rng.choice([-1, 1]))
            m_test = m_ref + diff
        return note, chord, m_ref, m_test

    def _rho(self, note: Chord, chord: Chord, m_ref: int, m_test: int) -> Tuple[Optional[float], int, int]:
        phi_note = audio_learn_phi(note, note.transposed(self.ratio ** m_ref), self.cell, self.n_nodes, self.cfg)
        phi_chord = audio_learn_phi(chord, chord.transposed(self.ratio ** m_test), self.cell, self.n_nodes,
                                    self.cfg)
        return phi_distance(phi_note, phi_chord, self.cfg.dedup_tol), len(phi_note), len(phi_chord)

    def calibrate(self, n_trials: Optional[int] = None) -> PhiThreshold:
        """Threshold from tone/chord pairs under the same transposition"""
        n_trials = n_trials or int(self.params["audio_calibration_trials"])
        if n_trials < 20:
            raise ConfigError(f"Calibration needs at least 20 trials, got {n_trials}")
        seed = self.seed + CALIBRATION_OFFSET
        self.logger.info(f"Calibrating audio threshold over {n_trials} trials (seed {seed})")

        def trial(i: int) -> Optional[float]:
            note, chord, m_ref, m_test = self._pair(trial_rng(seed, i), same=True)
            return self._rho(note, chord, m_ref, m_test)[0]

        return quantile_threshold(self._map(trial, list(range(n_trials))),
                                  self.params["calibration_quantile"], 0.0)

    def group_law(self, n_checks: int = 20, threshold: Optional[PhiThreshold] = None) -> List[Dict[str, Any]]:
        """rho between learned phi(m2) o phi(m1) and learned phi(m1 + m2), judged by ``threshold``"""
        threshold = threshold or self.calibrate()
        rng = stream_rng(self.seed, GROUP_LAW_STREAM)
        max_steps = int(self.params["audio_max_transposition"])
        checks = []
        for _ in range(n_checks):
            chord = self.random_note(rng).merged(self.random_note(rng))
            m1, m2 = (int(v) for v in rng.integers(-max_steps, max_steps + 1, size=2))

            def learned(m):
                return audio_learn_phi(chord, chord.transposed(self.ratio ** m), self.cell, self.n_nodes, self.cfg)

            composed = compose_phi(learned(m2), learned(m1), self.cfg)
            direct = learned(m1 + m2)
            rho = phi_distance(composed, direct, self.cfg.dedup_tol)
            checks.append({"m1": m1, "m2": m2, "rho": rho, "composed_size": len(composed),
                           "holds": threshold.accepts(rho)})
        self.logger.info(f"Group law held in {sum(c['holds'] for c in checks)}/{n_checks} checks")
        return checks

    def run(self, n_trials: Optional[int] = None, threshold: Optional[PhiThreshold] = None) -> ExperimentReport:
        n_trials = n_trials if n_trials is not None else int(self.params["audio_trials"])
        threshold = threshold or self.calibrate()
        self.logger.info(f"Starting audio transposition run of {n_trials} trials (seed {self.seed})")

        def trial(i: int) -> TrialRecord:
            rng = trial_rng(self.seed, i)
            same = bool(rng.random() < 0.5)
            try:
                note, chord, m_ref, m_test = self._pair(rng, same)
                rho, n_note, n_chord = self._rho(note, chord, m_ref, m_test)
            except Exception as e:
                self.logger.error(f"Error in audio trial {i}: {str(e)}")
                return TrialRecord(i, self.seed + i, same, None, threshold.value, error=str(e))
            return TrialRecord(
                i, self.seed + i, same, rho, threshold.value,
                condition={"difference_steps": abs(m_test - m_ref)},
                extras={"note": note.notes[0][0], "chord": [f for f, _ in chord.notes],
                        "steps_ref": m_ref, "steps_test": m_test,
                        "phi_note_size": n_note, "phi_chord_size": n_chord},
            )

        records = self._map(trial, list(range(n_trials)))
        self.logger.info(f"Audio completed: {sum(r.error is None for r in records)}/{n_trials} trials")
        checks = self.group_law(threshold=threshold)
        defined = [c["rho"] for c in checks if c["rho"] is not None]
        curves = {"by_difference": reports.summarize(records, ["difference_steps"])}
        return ExperimentReport(
            "audio", self.seed,
            {"experiment": "audio", "seed": self.seed, "n_trials": n_trials, "nodes": self.n_nodes,
             "cell": {"f_min": self.cell.f_min, "f_max": self.cell.f_max, "width": self.cell.width,
                      "gain": self.cell.gain},
             "step_ratio": self.ratio, "params": dict(self.params)},
            threshold.to_dict(), records, curves,
            summary={
                "accuracy": float(np.mean([r.correct for r in records])) if records else None,
                "group_law_checks": checks,
                "group_law_max_rho": max(defined) if defined else None,
                "group_law_pass_rate": float(np.mean([c["holds"] for c in checks])) if checks else None,
            },
            plot={"curve": "by_difference", "x": "difference_steps", "y": "association_rate",
                  "title": "Tone and chord transpositions associated"},
        )


def run_audio_transposition(seed: int = 0, n_trials: Optional[int] = None, cell: HairCell = HairCell(),
                            params: Optional[Dict[str, Any]] = None, workers: int = 1) -> ExperimentReport:
    return AudioExperiment(cell, params, seed, workers).run(n_trials)
