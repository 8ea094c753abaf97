import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from audio import (
    AudioExperiment,
    Chord,
    HairCell,
    audio_learn_phi,
    audio_match_config,
    audio_oracle_phi,
    haircell_response,
    haircell_responses,
    haircell_scan,
    restrict_to_oracle,
    run_audio_transposition,
)
from core import ConfigError, RangeError

CELL = HairCell()
NODES = 121


@pytest.fixture
def cfg(small_params):
    return audio_match_config(small_params)


def test_response_peaks_at_note():
    assert haircell_response(Chord.note(400.0, 0.7), 400.0) == pytest.approx(0.7)
    assert haircell_response(Chord.note(400.0), 800.0) < 1e-6
    assert haircell_response(Chord(), 400.0) == 0.0


@given(st.floats(150.0, 1000.0), st.floats(0.5, 1.5), st.floats(200.0, 1000.0))
@settings(max_examples=50)
def test_transposition_scales_the_response(note, k, f):
    chord = Chord(((note, 1.0), (note * 1.25, 0.5)))
    assert haircell_response(chord.transposed(k), f * k) == pytest.approx(haircell_response(chord, f), abs=1e-9)


def test_response_out_of_range():
    with pytest.raises(RangeError):
        haircell_response(Chord.note(400.0), 50.0)
    with pytest.raises(RangeError):
        haircell_responses(Chord.note(400.0), np.array([200.0, 2000.0]), CELL)


def test_proprio_is_invertible():
    freqs = CELL.eigenfrequencies(NODES)
    np.testing.assert_allclose(CELL.proprio_inverse(CELL.proprio(freqs)), freqs, rtol=1e-9)
    assert freqs[0] == pytest.approx(100.0) and freqs[-1] == pytest.approx(1600.0)
    assert CELL.step_ratio(NODES) == pytest.approx(16.0 ** (1 / 120))


def test_cell_validation():
    with pytest.raises(ConfigError):
        HairCell(f_min=500.0, f_max=100.0)
    with pytest.raises(ConfigError):
        HairCell(width=0.0)
    with pytest.raises(ConfigError):
        CELL.eigenfrequencies(1)


def test_chord_validation_and_json():
    with pytest.raises(ConfigError):
        Chord.note(-1.0)
    with pytest.raises(ConfigError):
        Chord.note(440.0, -0.5)
    with pytest.raises(ConfigError):
        Chord.note(440.0).transposed(0.0)
    chord = Chord(((261.6, 1.0), (329.6, 0.8)))
    assert Chord.from_json(chord.to_json()) == chord
    with pytest.raises(ConfigError):
        Chord.from_json('[{"amp": 1.0}]')
    with pytest.raises(ConfigError):
        Chord.from_json("not json")


def test_no_transposition_learns_identity(cfg):
    note = Chord.note(400.0)
    phi = audio_learn_phi(note, note, CELL, NODES, cfg)
    assert not phi.is_empty()
    restricted = restrict_to_oracle(phi, audio_oracle_phi(CELL, 0, NODES))
    assert not restricted.is_empty()
    np.testing.assert_array_equal(restricted.domain_index, restricted.image_index)


def test_transposition_out_of_range_is_empty(cfg):
    note = Chord.note(400.0)
    assert audio_learn_phi(note, note.transposed(8.0), CELL, NODES, cfg).is_empty()
    assert audio_oracle_phi(CELL, NODES, NODES).is_empty()


def test_learned_phi_contains_oracle_pairs(cfg):
    ratio = CELL.step_ratio(NODES)
    chord = Chord(((300.0, 1.0), (450.0, 0.7)))
    phi = audio_learn_phi(chord, chord.transposed(ratio ** 5), CELL, NODES, cfg)
    oracle = audio_oracle_phi(CELL, 5, NODES)
    restricted = restrict_to_oracle(phi, oracle)
    assert 0 < len(restricted) <= len(phi)
    np.testing.assert_array_equal(restricted.image_index - restricted.domain_index, 5)
    assert math.isclose(
        float(CELL.proprio_inverse(restricted.image[0, 0]) / CELL.proprio_inverse(restricted.domain[0, 0])),
        ratio ** 5, rel_tol=1e-9,
    )


def test_learned_phi_contains_every_audible_oracle_pair(cfg):
    ratio = CELL.step_ratio(NODES)
    chord = Chord(((300.0, 1.0), (450.0, 0.7)))
    phi = audio_learn_phi(chord, chord.transposed(ratio ** 5), CELL, NODES, cfg)
    oracle = audio_oracle_phi(CELL, 5, NODES)
    audible = haircell_scan(chord, CELL, NODES).s[:, 0] >= cfg.min_signal
    restricted = restrict_to_oracle(phi, oracle)
    assert set(restricted.domain_index.tolist()) == set(oracle.domain_index[audible[oracle.domain_index]].tolist())


def test_group_law_holds_on_learned_phis(small_params):
    experiment = AudioExperiment(CELL, small_params, seed=2)
    threshold = experiment.calibrate()
    checks = experiment.group_law(20, threshold)
    assert len(checks) == 20
    assert all(c["holds"] == threshold.accepts(c["rho"]) for c in checks)
    assert sum(c["holds"] for c in checks) >= 18


def test_note_and_chord_associate_under_the_same_transposition(small_params):
    small_params["audio_trials"] = 40
    report = run_audio_transposition(seed=6, params=small_params)
    same = report.association_rate(lambda r: r.truth)
    assert same >= 0.9
    assert report.association_rate(lambda r: not r.truth) < same
    assert report.summary["group_law_pass_rate"] >= 0.9


def test_small_audio_run(small_params):
    report = run_audio_transposition(seed=1, params=small_params)
    assert report.experiment == "audio"
    assert len(report) == 20
    for r in report.records:
        assert r.error is None
        assert r.truth == (r.condition["difference_steps"] == 0)
        assert r.decision == (r.statistic is not None and r.statistic <= r.threshold)
    assert int(report.curves["by_difference"]["n"].sum()) == 20
    assert report.threshold["n_trials"] == 20
