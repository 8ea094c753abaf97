import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from scipy.spatial import cKDTree

from core import (
    Environment,
    LightSource,
    RangeError,
    RigidDisplacement,
    Vec2,
    displace_environment,
    oracle_view,
    stream_rng,
)
from sensors import (
    Agent1D,
    Scanner,
    ScanGrid,
    default_body,
    photo_response,
    photo_responses,
    proprio_response,
    proprio_responses,
    random_environment,
    scan,
    scan_1d,
)

unit = st.floats(0.0, 1.0, allow_nan=False)
shift = st.floats(-1.0, 1.0, allow_nan=False)


def test_proprio_peaks_at_receptor_location(body):
    p = proprio_response(body, body.proprioceptors[0].location)
    assert p.shape == (8,)
    assert p[0] == pytest.approx(1.0)
    assert np.all((p > 0) & (p <= 1))


def test_proprio_out_of_range(body):
    with pytest.raises(RangeError):
        proprio_response(body, Vec2(1.2, 0.5))
    with pytest.raises(RangeError):
        photo_response(Environment(), body, Vec2.zero(), Vec2(-0.1, 0.5))


@pytest.mark.parametrize("n", [21, 51])
def test_proprio_is_injective_at_dedup_tol(body, n):
    # no two nodes closer than the 0.01 dedup tolerance, so dedup keeps every node
    p = proprio_responses(body, ScanGrid(n, n).nodes())
    assert cKDTree(p).query_pairs(0.01, p=np.inf) == set()


def test_default_layout_is_not_uniform():
    locations = np.array([r.location.as_array() for r in default_body(0).proprioceptors])
    assert len(locations) == 8
    assert len({round(y, 6) for y in locations[:, 1]}) > 3
    assert np.linalg.norm(locations - [0.5, 0.5], axis=1).min() > 0.15


def test_empty_environment_is_dark(body):
    assert np.all(photo_response(Environment(), body, Vec2.zero(), Vec2(0.5, 0.5)) == 0)


@given(shift, shift, unit, unit)
@settings(max_examples=200, deadline=None)
def test_joint_translation_is_compensated(dx, dy, rx, ry):
    body = default_body(3)
    env = random_environment(stream_rng(2, 9), 30, body.center, 3.0)
    d = RigidDisplacement.of(dx, dy)
    agent = Vec2(0.2, -0.3)
    retina = Vec2(rx, ry)
    original = photo_response(env, body, agent, retina)
    moved = photo_response(displace_environment(env, d), body, agent + d.delta, retina)
    np.testing.assert_allclose(moved, original, rtol=0, atol=1e-12)


def test_photo_response_is_linear_in_sources(body, rich_env, other_rich_env):
    nodes = ScanGrid(5, 5).nodes()
    merged = rich_env.merged(other_rich_env)
    combined = photo_responses(merged, body, Vec2.zero(), nodes)
    separate = photo_responses(rich_env, body, Vec2.zero(), nodes) + photo_responses(other_rich_env, body,
                                                                                      Vec2.zero(), nodes)
    np.testing.assert_allclose(combined, separate, atol=1e-12)
    doubled = Environment.from_arrays(rich_env.positions(), 2 * rich_env.intensities())
    np.testing.assert_allclose(photo_responses(doubled, body, Vec2.zero(), nodes),
                               2 * photo_responses(rich_env, body, Vec2.zero(), nodes), atol=1e-12)


def test_single_light_peaks_on_receptor(body):
    offset = body.photoreceptors[0].offset
    retina = Vec2(0.5, 0.5)
    env = Environment((LightSource(retina + offset, 0.8),))
    assert photo_response(env, body, Vec2.zero(), retina)[0] == pytest.approx(0.8)


def test_scan_shapes_and_oracle(body, rich_env, grid):
    table = scan(rich_env, body, Vec2(0.1, 0.1), grid)
    assert table.p.shape == (441, 8)
    assert table.s.shape == (441, 9)
    view = oracle_view(table)
    np.testing.assert_array_equal(view.positions, grid.nodes())
    assert view.agent_pos == Vec2(0.1, 0.1)


def test_scan_is_independent_of_workers(body, rich_env, grid):
    serial = scan(rich_env, body, Vec2.zero(), grid, workers=1)
    threaded = scan(rich_env, body, Vec2.zero(), grid, workers=4)
    np.testing.assert_array_equal(serial.s, threaded.s)


def test_grid_index_and_coords(grid):
    k = grid.index(3, 7)
    ix, iy = grid.coords(k)
    assert (ix, iy) == (3, 7)
    np.testing.assert_allclose(grid.nodes()[k], [3 * 0.05, 7 * 0.05])


def test_default_body_layout():
    body = default_body(42)
    assert body.n_proprio == 8 and body.n_photo == 9
    assert np.all(np.abs(body.photo_offsets()) <= 0.15)
    assert np.all((body.photo_acuities() >= 0.03) & (body.photo_acuities() <= 0.3))
    np.testing.assert_array_equal(default_body(42).photo_offsets(), body.photo_offsets())


def test_agent1d_proprio_is_invertible():
    agent = Agent1D()
    xs = np.linspace(0, 1, 11)
    np.testing.assert_allclose(agent.proprio_inverse(agent.proprio(xs)), xs, atol=1e-12)
    assert agent.proprio(0.5) == pytest.approx(0.5)


def test_scan_1d_shapes():
    table = scan_1d(Agent1D(), [(0.5, 1.0)], 101)
    assert table.p.shape == (101, 1) and table.s.shape == (101, 1)
    assert table.s[50, 0] == pytest.approx(1.0)


def test_scanner_caches(body, rich_env, grid):
    scanner = Scanner(body, grid, cache_size=2)
    first = scanner.scan(rich_env, Vec2.zero())
    assert scanner.scan(rich_env, Vec2.zero()) is first
    scanner.scan(rich_env, Vec2(0.1, 0.0))
    scanner.scan(rich_env, Vec2(0.2, 0.0))
    assert len(scanner.cache) == 2
    assert scanner.scan(rich_env, Vec2.zero()) is not first
