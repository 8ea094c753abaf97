import pytest

from config import resolve_profile
from core import stream_rng
from sensors import ScanGrid, default_body, random_environment


@pytest.fixture(scope="session")
def body():
    return default_body(3)


@pytest.fixture(scope="session")
def grid():
    return ScanGrid(21, 21)


@pytest.fixture
def rich_env(body):
    return random_environment(stream_rng(11, 1), 200, body.center, 3.0)


@pytest.fixture
def other_rich_env(body):
    return random_environment(stream_rng(12, 1), 200, body.center, 3.0)


@pytest.fixture
def small_params():
    """Desk profile shrunk to a 21 x 21 grid and a handful of trials."""
    params = resolve_profile("desk")
    params.update({
        "grid": 21,
        "calibration_trials": 20,
        # one lattice step of the 21 x 21 grid
        "calibration_perturbation": 0.05,
        "atlas_step": 0.2,
        "atlas_extent": 0.4,
        "rigid_trials": 12,
        "medium_trials": 12,
        "medium_jump_step": 0.1,
        "relpos_trials": 4,
        "relpos_segments": [2, 3],
        "demo1d_trials": 3,
        "audio_trials": 20,
        "audio_nodes": 121,
        "audio_calibration_trials": 20,
    })
    return params
