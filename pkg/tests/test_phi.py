import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from core import (
    CalibrationError,
    ConfigError,
    Environment,
    PhiFunction,
    RigidDisplacement,
    Vec2,
    displace_environment,
)
from experiments import ObjectShape, object_environment
from phi import (
    DisplacementPair,
    MatchConfig,
    arrow_field,
    calibrate_threshold,
    compose_phi,
    learn_displacement_phi,
    learn_phi,
    oracle_phi,
    perturbation_snaps_away,
    phi_distance,
    phi_sup_gap,
    prediction_error,
    quantile_threshold,
    rich_pair_sampler,
    snap_to_lattice,
)
from sensors import ScanGrid, scan

H = 0.05  # node spacing of the 21 x 21 test grid


def step(ix, iy):
    return RigidDisplacement.of(ix * H, iy * H)


def test_match_config_validation():
    with pytest.raises(ConfigError):
        MatchConfig(photo_tol=-0.1)
    with pytest.raises(ConfigError):
        MatchConfig(dedup_tol=0)
    with pytest.raises(ConfigError):
        MatchConfig(min_signal=-1)


def test_zero_jump_learns_identity(body, rich_env, grid):
    table = scan(rich_env, body, Vec2.zero(), grid)
    phi = learn_phi(table, table)
    identity = phi.domain_index == phi.image_index
    assert set(phi.domain_index[identity]) == set(range(len(grid)))


def test_kdtree_matches_naive(body):
    # a small object leaves dark regions and many coincidences
    env = object_environment(ObjectShape.of("star"), Vec2(0.4, 0.6))
    before = scan(env, body, Vec2.zero(), ScanGrid(15, 15))
    after = scan(env, body, Vec2(0.1, -0.05), ScanGrid(15, 15))
    fast = learn_phi(before, after, method="kdtree", workers=2)
    slow = learn_phi(before, after, method="naive")
    np.testing.assert_array_equal(fast.domain_index, slow.domain_index)
    np.testing.assert_array_equal(fast.image_index, slow.image_index)
    np.testing.assert_array_equal(fast.domain, slow.domain)


def test_unknown_match_method(body, rich_env, grid):
    table = scan(rich_env, body, Vec2.zero(), grid)
    with pytest.raises(ConfigError):
        learn_phi(table, table, method="bogus")


def test_pairs_are_sorted_and_deduplicated(body, rich_env, grid):
    phi = learn_displacement_phi(rich_env, body, Vec2.zero(), step(3, -2), grid)
    keys = list(zip(phi.domain_index.tolist(), phi.image_index.tolist()))
    assert keys == sorted(keys)
    joined = np.hstack([phi.domain, phi.image])
    for i in range(len(joined)):
        others = np.delete(joined, i, axis=0)
        assert np.abs(others - joined[i]).max(axis=1).min() >= 0.01


@pytest.mark.parametrize("ix,iy", [(4, -2), (-3, 5), (0, 7), (10, 10)])
def test_learned_phi_matches_oracle(body, rich_env, grid, ix, iy):
    jump = step(ix, iy)
    learned = learn_displacement_phi(rich_env, body, Vec2.zero(), jump, grid)
    oracle = oracle_phi(body, jump, grid)
    assert not learned.is_empty()
    rho = phi_distance(learned, oracle)
    assert rho / len(learned) <= 0.02


def test_same_jump_in_two_environments_gives_same_phi(body, rich_env, other_rich_env, grid):
    a = learn_displacement_phi(rich_env, body, Vec2.zero(), step(2, 3), grid)
    b = learn_displacement_phi(other_rich_env, body, Vec2.zero(), step(2, 3), grid)
    c = learn_displacement_phi(other_rich_env, body, Vec2.zero(), step(3, 3), grid)
    assert phi_distance(a, b) == pytest.approx(0.0, abs=1e-9)
    assert phi_distance(a, c) > 0.1


def test_displaced_environment_matches_opposite_jump(body, rich_env, grid):
    d = step(2, -1)
    before = scan(rich_env, body, Vec2.zero(), grid)
    after = scan(displace_environment(rich_env, d), body, Vec2.zero(), grid)
    learned = learn_phi(before, after)
    assert phi_distance(learned, oracle_phi(body, d.inverse(), grid)) / len(learned) <= 0.02


def test_jump_beyond_range_gives_empty_oracle(body, grid):
    assert oracle_phi(body, RigidDisplacement.of(1.2, 0.0), grid).is_empty()


def test_phi_distance_undefined_without_shared_domain(body, grid):
    a = oracle_phi(body, step(15, 0), grid)
    b = oracle_phi(body, step(-15, 0), grid)
    assert phi_distance(a, b) is None
    assert phi_distance(a, PhiFunction.empty(8)) is None
    assert phi_distance(a, a) == 0.0


def test_phi_distance_uses_the_closest_image():
    domain = np.array([[0.1, 0.1], [0.1, 0.1], [0.5, 0.5]])
    image = np.array([[0.2, 0.2], [0.6, 0.6], [0.5, 0.8]])
    multivalued = PhiFunction(domain, image, np.array([0, 0, 1]), np.array([1, 2, 3]))
    assert phi_distance(multivalued, multivalued) == 0.0
    single = PhiFunction(domain[1:], np.array([[0.6, 0.6], [0.5, 0.5]]), np.array([0, 1]), np.array([2, 4]))
    assert phi_distance(single, multivalued) == pytest.approx(0.3)


def test_phi_distance_is_not_normalised(body, grid):
    a = oracle_phi(body, step(0, 0), grid)
    b = oracle_phi(body, step(1, 0), grid)
    rho = phi_distance(b, a)
    per_pair = np.linalg.norm(b.image - a.image[b.domain_index], axis=1)
    assert rho == pytest.approx(per_pair.sum())


@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6), st.integers(0, 6))
@settings(max_examples=25, deadline=None)
def test_oracle_composition_follows_group_law(ax, ay, bx, by):
    from sensors import default_body
    body, grid = default_body(3), ScanGrid(21, 21)
    a, b = step(ax, ay), step(bx, by)
    composed = compose_phi(oracle_phi(body, b, grid), oracle_phi(body, a, grid))
    direct = oracle_phi(body, step(ax + bx, ay + by), grid)
    assert len(composed) == len(direct)
    np.testing.assert_array_equal(composed.domain_index, direct.domain_index)
    np.testing.assert_array_equal(composed.image_index, direct.image_index)
    if len(direct):
        assert phi_distance(composed, direct) <= 1e-9


def test_compose_with_empty_is_empty(body, grid):
    assert compose_phi(oracle_phi(body, step(1, 1), grid), PhiFunction.empty(8)).is_empty()


def test_learned_composition_equals_direct_jump(body, rich_env, other_rich_env, grid):
    first = learn_displacement_phi(rich_env, body, Vec2.zero(), step(4, 2), grid)
    second = learn_displacement_phi(other_rich_env, body, Vec2.zero(), step(3, 5), grid)
    direct = learn_displacement_phi(rich_env, body, Vec2.zero(), step(7, 7), grid)
    composed = compose_phi(second, first)
    assert not composed.is_empty()
    assert phi_distance(composed, direct) <= 1e-9


def test_sup_gap(body, grid):
    a = oracle_phi(body, step(2, 0), grid)
    assert phi_sup_gap(a, a) == 0.0
    assert phi_sup_gap(a, oracle_phi(body, step(3, 0), grid)) > 0
    assert phi_sup_gap(a, PhiFunction.empty(8)) is None


def test_prediction_error(body, rich_env, grid):
    table = scan(rich_env, body, Vec2.zero(), grid)
    identity = oracle_phi(body, RigidDisplacement.identity(), grid)
    assert prediction_error(identity, table, table) == (0.0, 0.0)
    assert prediction_error(PhiFunction.empty(8), table, table) is None
    jumped = scan(rich_env, body, Vec2(0.1, 0.0), grid)
    total, mean = prediction_error(oracle_phi(body, step(2, 0), grid), table, jumped)
    assert total == pytest.approx(0.0, abs=1e-9)
    wrong_total, wrong_mean = prediction_error(identity, table, jumped)
    assert wrong_mean > 0.01


def test_arrow_field(body, grid):
    arrows = arrow_field(oracle_phi(body, step(2, 1), grid), grid)
    assert list(arrows.columns) == ["x0", "y0", "x1", "y1"]
    np.testing.assert_allclose(arrows["x0"] - arrows["x1"], 0.1, atol=1e-12)
    np.testing.assert_allclose(arrows["y0"] - arrows["y1"], 0.05, atol=1e-12)


def test_snap_to_lattice():
    assert snap_to_lattice(Vec2(0.123, -0.077), (0.05, 0.05)) == Vec2(0.1, -0.1)


def test_small_perturbation_snaps_away():
    assert perturbation_snaps_away(0.005, (0.05, 0.05))
    assert not perturbation_snaps_away(0.05, (0.05, 0.05))
    assert not perturbation_snaps_away(0.0, (0.05, 0.05))


def test_calibration_needs_twenty_trials(body, grid):
    sampler = rich_pair_sampler(body, grid)
    with pytest.raises(ConfigError):
        calibrate_threshold(body, sampler, MatchConfig(), 10, grid)


def test_calibration_fails_when_rho_is_undefined(body):
    def dark(rng, perturbation):
        return DisplacementPair(Environment(), step(1, 0), Environment(), step(1, 0))

    with pytest.raises(CalibrationError):
        calibrate_threshold(body, dark, MatchConfig(min_signal=0.01), 20, ScanGrid(5, 5))


def test_exact_coincidences_calibrate_to_zero(body):
    grid = ScanGrid(11, 11)
    threshold = calibrate_threshold(body, rich_pair_sampler(body, grid), MatchConfig(photo_tol=1e-9), 20, grid,
                                    seed=4, perturbation=0.0)
    assert threshold.value < 1e-9
    assert threshold.n_trials == 20
    assert threshold.accepts(0.0)
    assert not threshold.accepts(None)


def test_calibration_is_independent_of_workers(body):
    grid = ScanGrid(11, 11)
    sampler = rich_pair_sampler(body, grid, jump_range=0.3)
    serial = calibrate_threshold(body, sampler, MatchConfig(), 20, grid, seed=9, perturbation=0.15)
    threaded = calibrate_threshold(body, sampler, MatchConfig(), 20, grid, seed=9, perturbation=0.15, workers=3)
    assert serial == threaded


def test_quantile_threshold():
    values = [float(v) for v in range(10)] + [None]
    threshold = quantile_threshold(values, 0.9)
    assert threshold.value == 9.0
    assert threshold.n_undefined == 1
    assert sum(v <= threshold.value for v in values if v is not None) >= 9
    with pytest.raises(CalibrationError):
        quantile_threshold([None] * 3 + [1.0], 0.9)
