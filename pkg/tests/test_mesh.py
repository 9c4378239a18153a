import numpy as np
import pytest

from conftest import SMALL_PARAMS
from db.mesh_cache import MeshCache
from services.eigen_service import dense_eigenpairs
from services.geometry_service import (
    antipodal_configuration,
    empty_configuration,
    exp_map,
    fibonacci_sphere,
    make_configuration,
    platonic_configuration,
)
from services.mesh_service import (
    EMPTY_CUT,
    MeshParams,
    ZeroSection,
    build_cut_system,
    build_mesh,
    build_operators,
    crossing_parity,
    export_mesh,
    gauge_flip,
    hilbert_norm,
    import_mesh,
    interpolate_section,
    morph_mesh,
    pin_vertices,
    rayleigh,
    twisted_stiffness,
    untwisted_stiffness,
    vertex_holonomy,
)


def test_mesh_params_validation():
    with pytest.raises(ValueError):
        MeshParams(background_count=100)
    with pytest.raises(ValueError):
        MeshParams(grade_depth=-1)
    with pytest.raises(ValueError):
        MeshParams(grade_radius=0.0)


def test_mesh_is_a_sphere_with_flagged_points_first(small_antipodal):
    config, ops = small_antipodal
    mesh = ops.mesh
    assert mesh.euler_characteristic == 2
    assert mesh.min_angle >= 5.0
    assert mesh.n_flagged == 2
    np.testing.assert_allclose(mesh.vertices[:2], config.points)
    assert mesh.vertex_areas.sum() == pytest.approx(4.0 * np.pi, rel=1e-9)


def test_holonomy_is_minus_one_exactly_at_branch_vertices(small_antipodal):
    _, ops = small_antipodal
    hol = vertex_holonomy(ops.mesh, ops.signs.sigma)
    assert sorted(np.flatnonzero(hol < 0).tolist()) == [0, 1]
    assert ops.pinned[[0, 1]].all()
    assert ops.n_free == ops.mesh.n_vertices - 2


def test_two_cut_curves_give_four_branch_vertices(tetrahedron):
    config, ops = tetrahedron
    hol = vertex_holonomy(ops.mesh, ops.signs.sigma)
    assert sorted(np.flatnonzero(hol < 0).tolist()) == [0, 1, 2, 3]
    assert len(ops.cut.pairs) == 2
    assert ops.mesh.euler_characteristic == 2


def test_stiffness_is_symmetric_positive_semidefinite(small_antipodal):
    _, ops = small_antipodal
    full = twisted_stiffness(ops.mesh, ops.signs.sigma)
    assert abs(full - full.T).max() < 1e-12
    w = np.linalg.eigvalsh(ops.stiffness.toarray())
    assert w.min() > -1e-9


def test_untwisted_stiffness_annihilates_constants(small_antipodal):
    _, ops = small_antipodal
    ones = np.ones(ops.mesh.n_vertices)
    np.testing.assert_allclose(untwisted_stiffness(ops.mesh) @ ones, 0.0, atol=1e-10)


def test_empty_configuration_has_no_cut():
    config = empty_configuration()
    mesh = build_mesh(config, SMALL_PARAMS)
    assert mesh.n_flagged == 0
    assert build_cut_system(config, mesh) is EMPTY_CUT


def test_gauge_flip_preserves_spectrum(small_antipodal, rng):
    _, ops = small_antipodal
    mask = rng.random(ops.mesh.n_vertices) < 0.5
    flipped = gauge_flip(ops, mask)
    a = [p.eigenvalue for p in dense_eigenpairs(ops, 4)]
    b = [p.eigenvalue for p in dense_eigenpairs(flipped, 4)]
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_spectrum_does_not_depend_on_the_cut_system(tetrahedron):
    config, ops = tetrahedron
    other = build_operators(config, pairing=[(0, 2), (1, 3)], mesh=ops.mesh)
    again = build_operators(config, pairing=[(0, 3), (1, 2)], mesh=ops.mesh)
    assert set(other.cut.pairs) != set(again.cut.pairs)
    np.testing.assert_array_equal(other.free, again.free)
    a = [p.eigenvalue for p in dense_eigenpairs(other, 6)]
    b = [p.eigenvalue for p in dense_eigenpairs(again, 6)]
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_spectrum_is_rotation_equivariant(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    R = q * np.sign(np.diag(r))
    if np.linalg.det(R) < 0:
        R[:, 0] = -R[:, 0]
    config = platonic_configuration("tetrahedron")
    rotated = make_configuration(config.points @ R.T)
    background = fibonacci_sphere(SMALL_PARAMS.background_count)
    ops = build_operators(config, mesh=build_mesh(config, SMALL_PARAMS, background=background))
    ops_rot = build_operators(rotated, mesh=build_mesh(rotated, SMALL_PARAMS, background=background @ R.T))
    assert ops_rot.mesh.n_vertices == ops.mesh.n_vertices
    a = [p.eigenvalue for p in dense_eigenpairs(ops, 4)]
    b = [p.eigenvalue for p in dense_eigenpairs(ops_rot, 4)]
    np.testing.assert_allclose(a, b, rtol=1e-8)


def test_crossing_parity_separates_inside_from_outside():
    phi = np.linspace(0.0, 2.0 * np.pi, 201)
    loop = np.column_stack([np.sin(0.3) * np.cos(phi), np.sin(0.3) * np.sin(phi), np.full_like(phi, np.cos(0.3))])
    halves = [loop[:101], loop[100:]]

    def at(colatitude, azimuth):
        return np.array([np.sin(colatitude) * np.cos(azimuth), np.sin(colatitude) * np.sin(azimuth), np.cos(colatitude)])

    a = np.array([at(0.6, 0.5), at(0.6, 2.0), at(0.6, 4.0)])
    b = np.array([at(0.1, 0.5), at(0.45, 2.0), at(0.2, 4.0)])
    np.testing.assert_array_equal(crossing_parity(a, b, halves), [True, False, True])
    np.testing.assert_array_equal(crossing_parity(b[[0]], b[[2]], halves), [False])


def test_pinning_raises_the_ground_eigenvalue(small_antipodal):
    _, ops = small_antipodal
    ground = dense_eigenpairs(ops, 1)[0]
    peak = int(ops.free[np.argmax(np.abs(ground.section))])
    pinned = pin_vertices(ops, [peak])
    assert pinned.n_free == ops.n_free - 1
    assert dense_eigenpairs(pinned, 1)[0].eigenvalue > ground.eigenvalue


def test_rayleigh_of_zero_section_raises(small_antipodal):
    _, ops = small_antipodal
    with pytest.raises(ZeroSection):
        rayleigh(np.zeros(ops.n_free), ops)


def test_hilbert_norm_of_a_normalized_section(small_antipodal, rng):
    _, ops = small_antipodal
    f = rng.normal(size=ops.n_free)
    f /= np.sqrt(float(f @ (ops.mass @ f)))
    assert hilbert_norm(f, ops) == pytest.approx(rayleigh(f, ops) + 1.0)


def test_export_import_round_trip(small_antipodal, tmp_path):
    _, ops = small_antipodal
    path = str(tmp_path / "mesh.off")
    sidecar = export_mesh(ops, path)
    assert sidecar == path + ".json"
    loaded = import_mesh(path)
    assert loaded.n_free == ops.n_free
    np.testing.assert_array_equal(loaded.free, ops.free)
    np.testing.assert_array_equal(loaded.signs.sigma, ops.signs.sigma)
    assert abs(loaded.stiffness - ops.stiffness).max() < 1e-9


def test_interpolation_reproduces_vertex_values(small_antipodal):
    _, ops = small_antipodal
    ground = dense_eigenpairs(ops, 1)[0]
    f_full = ops.expand(ground.section)
    idx = ops.free[::37]
    values, grads = interpolate_section(ops, f_full, ops.mesh.vertices[idx])
    np.testing.assert_allclose(np.abs(values), np.abs(f_full[idx]), atol=1e-8)
    x = ops.mesh.vertices[idx]
    np.testing.assert_allclose(np.sum(grads * x, axis=1), 0.0, atol=1e-10)


def test_morph_moves_flagged_vertices(small_antipodal):
    _, ops = small_antipodal
    target = ops.mesh.vertices[:2].copy()
    target[0] = exp_map(target[0], np.array([0.05, 0.0, 0.0]))[0]
    moved = morph_mesh(ops.mesh, target)
    np.testing.assert_allclose(moved.vertices[:2], target, atol=1e-12)
    np.testing.assert_array_equal(moved.triangles, ops.mesh.triangles)


def test_mesh_cache_returns_the_same_mesh(tmp_path):
    cache = MeshCache(str(tmp_path))
    config = antipodal_configuration()
    first = build_mesh(config, SMALL_PARAMS, cache=cache)
    assert cache.get(config, SMALL_PARAMS) is not None
    fresh = MeshCache(str(tmp_path))
    second = build_mesh(config, SMALL_PARAMS, cache=fresh)
    np.testing.assert_array_equal(first.vertices, second.vertices)
    assert fresh.clear() == 1
