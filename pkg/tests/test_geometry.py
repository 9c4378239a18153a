import numpy as np
import pytest

from services.geometry_service import (
    DuplicatePoint,
    NotUnit,
    OddCount,
    antipodal_configuration,
    bump_field,
    cutoff,
    displace_configuration,
    empty_configuration,
    exp_map,
    fibonacci_sphere,
    geodesic_distance,
    load_configuration,
    log_cutoff,
    log_map,
    make_config_tangent,
    make_configuration,
    matching_field,
    merge_direction,
    pair_configuration,
    platonic_configuration,
    random_configuration,
    random_tangent,
    rotation_fields,
    rotation_vector_field,
    save_configuration,
    stereo_chart,
)


def test_configuration_validation():
    with pytest.raises(OddCount):
        make_configuration([(0, 0, 1), (1, 0, 0), (0, 1, 0)])
    with pytest.raises(OddCount):
        make_configuration([])
    with pytest.raises(DuplicatePoint):
        make_configuration([(0, 0, 1), (0, 0, 1)])
    with pytest.raises(NotUnit):
        make_configuration([(0, 0, 1.1), (1, 0, 0)])
    assert empty_configuration().is_empty()


def test_antipodal_and_pair_configurations():
    config = antipodal_configuration()
    assert config.n_points == 2
    assert config.min_separation == pytest.approx(np.pi)
    pair = pair_configuration(0.3)
    assert geodesic_distance(pair.points[0], pair.points[1]) == pytest.approx(0.3)


@pytest.mark.parametrize("kind,count", [("tetrahedron", 4), ("octahedron", 6), ("cube", 8), ("icosahedron", 12)])
def test_platonic_configurations(kind, count):
    config = platonic_configuration(kind)
    assert config.n_points == count
    np.testing.assert_allclose(np.linalg.norm(config.points, axis=1), 1.0)


def test_platonic_unknown_kind():
    with pytest.raises(ValueError):
        platonic_configuration("dodecagon")


def test_random_configuration_is_seeded_and_separated():
    a = random_configuration(6, seed=7, min_separation=0.4)
    b = random_configuration(6, seed=7, min_separation=0.4)
    np.testing.assert_array_equal(a.points, b.points)
    assert a.min_separation >= 0.4


def test_fibonacci_points_are_unit():
    pts = fibonacci_sphere(500)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0)


def test_exp_log_inverse(rng):
    p = rng.normal(size=3)
    p /= np.linalg.norm(p)
    v = rng.normal(size=3)
    v -= (v @ p) * p
    v *= 0.7 / np.linalg.norm(v)
    q = exp_map(p, v)[0]
    np.testing.assert_allclose(log_map(p, q)[0], v, atol=1e-12)
    assert geodesic_distance(p, q) == pytest.approx(0.7)


def test_stereo_chart_at_north_pole():
    chart = stereo_chart((0.0, 0.0, 1.0))
    np.testing.assert_allclose(chart.e1, [1.0, 0.0, 0.0])
    np.testing.assert_allclose(chart.e2, [0.0, 1.0, 0.0])
    assert abs(chart((0.0, 0.0, 1.0))[0]) == pytest.approx(0.0)
    t = 0.3
    z = chart((np.sin(t), 0.0, np.cos(t)))[0]
    assert z == pytest.approx(2.0 * np.tan(t / 2.0))


def test_stereo_chart_inverse(rng):
    chart = stereo_chart(rng.normal(size=3))
    z = np.array([0.1 + 0.2j, -0.5j, 1.3 - 0.4j])
    np.testing.assert_allclose(chart(chart.inverse(z)), z, atol=1e-12)


def test_rotated_chart_multiplies_coordinate():
    chart = stereo_chart((0.2, -0.4, 0.9))
    beta = 0.8
    x = exp_map(chart.base, 0.2 * chart.e1 + 0.1 * chart.e2)
    np.testing.assert_allclose(chart.rotated(beta)(x), np.exp(1j * beta) * chart(x), atol=1e-12)


def test_merge_direction_moves_points_together():
    config = pair_configuration(1.0)
    nu = merge_direction(config)
    np.testing.assert_allclose(np.sum(nu.vectors * config.points, axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(nu.vectors, axis=1), 1.0)
    moved = displace_configuration(config, nu, 0.1)
    assert moved.min_separation == pytest.approx(0.8)


def test_merge_direction_for_antipodal_pair_meets_on_the_equator():
    config = antipodal_configuration()
    nu = merge_direction(config)
    np.testing.assert_allclose(nu.vectors, [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    moved = displace_configuration(config, nu, 0.2)
    assert moved.min_separation == pytest.approx(np.pi - 0.4)


def test_config_tangent_validation():
    config = antipodal_configuration()
    with pytest.raises(ValueError):
        make_config_tangent(config, [(0, 0, 1), (1, 0, 0)])
    nu = make_config_tangent(config, [(1, 0, 1), (0, 1, 1)], project=True)
    np.testing.assert_allclose(nu.vectors, [(1, 0, 0), (0, 1, 0)])


def test_cutoff_profile():
    chi, dchi = cutoff(np.array([0.0, 0.25, 0.5, 0.75, 1.0]))
    np.testing.assert_allclose(chi, [1.0, 1.0, 0.5, 0.0, 0.0])
    assert dchi[2] < 0
    assert dchi[0] == 0.0 and dchi[-1] == 0.0


def test_log_cutoff_limits():
    eps = 1e-4
    inner = (100 * eps) ** (7 / 8)
    outer = (100 * eps) ** (5 / 8)
    np.testing.assert_allclose(log_cutoff(np.array([0.5 * inner, 2.0 * outer]), eps), [0.0, 1.0])


def test_matching_field_values_and_divergence(rng):
    config = random_configuration(4, seed=2, min_separation=0.6)
    nu = random_tangent(config, rng)
    field = matching_field(config, nu)
    np.testing.assert_allclose(field(config.points), np.sin(field.radius) * nu.vectors, atol=1e-12)
    x = rng.normal(size=(200, 3))
    x /= np.linalg.norm(x, axis=1)[:, None]
    np.testing.assert_allclose(field.divergence(x), 0.0, atol=1e-10)


def test_rotation_field_is_tangent_and_divergence_free(rng):
    x = rng.normal(size=(50, 3))
    x /= np.linalg.norm(x, axis=1)[:, None]
    field = rotation_vector_field(2)
    np.testing.assert_allclose(np.sum(field(x) * x, axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(field.divergence(x), 0.0, atol=1e-12)


def test_configuration_file_round_trip(tmp_path):
    config = platonic_configuration("octahedron")
    path = str(tmp_path / "octa.json")
    save_configuration(config, path)
    np.testing.assert_allclose(load_configuration(path).points, config.points)


def test_rotation_generators_at_a_point(rng):
    p = rng.normal(size=3)
    p /= np.linalg.norm(p)
    gens = rotation_fields(p)
    assert gens.shape == (3, 3)
    np.testing.assert_allclose(gens @ p, 0.0, atol=1e-12)
    np.testing.assert_allclose(gens[2], np.cross([0.0, 0.0, 1.0], p))
    assert rotation_fields(np.vstack([p, -p])).shape == (3, 2, 3)


def test_bump_field_band(rng):
    q = np.array([0.0, 0.0, 1.0])
    bump = bump_field(q, r=0.2, a=0.2, s=2.0)
    on_band = np.array([[np.sqrt(1.0 - 0.04), 0.0, 0.2]])
    np.testing.assert_allclose(bump(on_band), 2.0 * np.cross(q, on_band), atol=1e-12)
    far = np.array([[np.sqrt(1.0 - 0.81), 0.0, 0.9], [0.0, np.sqrt(1.0 - 0.25), -0.5]])
    np.testing.assert_allclose(bump(far), 0.0)
    assert not bump.support_mask(far).any()
    x = rng.normal(size=(30, 3))
    x /= np.linalg.norm(x, axis=1)[:, None]
    np.testing.assert_allclose(np.sum(bump(x) * x, axis=1), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        bump_field(q, r=0.2, a=0.0, s=1.0)


def test_chart_tangent_complex_round_trip(rng):
    chart = stereo_chart(rng.normal(size=3))
    w = np.array([0.3 - 1.2j, 2.0 + 0.5j])
    v = chart.complex_to_tangent(w)
    np.testing.assert_allclose(v @ chart.base, 0.0, atol=1e-12)
    np.testing.assert_allclose(chart.tangent_to_complex(v), w, atol=1e-12)
