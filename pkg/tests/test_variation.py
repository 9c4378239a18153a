import numpy as np
import pytest

from conftest import TEST_PARAMS
from services.asymptotics_service import BranchData, classify_vanishing
from services.geometry_service import (
    make_config_tangent,
    matching_field,
    merge_direction,
    rotation_vector_field,
    stereo_chart,
    zero_tangent,
)
from services.variation_service import (
    DegenerateCluster,
    divergence_identity_residual,
    eigenvalue_gradient,
    fd_eigenvalue_slope,
    ground_state_gradient,
    gradient_check_trial,
    pair_identity_residual,
    separation_direction,
    splitting_form,
    stress_energy,
    weak_divergence,
)


def _branch(a: complex, n: int = 0, beta: float = 0.0) -> BranchData:
    chart = stereo_chart((0.0, 0.0, 1.0)).rotated(beta)
    return BranchData(
        vertex=0, point=chart.base, chart=chart, a=a, n=n,
        fit_residual=0.0, coefficients=np.array([a, 0, 0, 0], dtype=complex), samples=100,
    )


def test_gradient_is_chart_independent():
    a = 0.3 - 0.4j
    beta = 1.1
    g = eigenvalue_gradient([_branch(a)], 2).vectors
    g_rot = eigenvalue_gradient([_branch(a * np.exp(-0.5j * beta), beta=beta)], 2).vectors
    np.testing.assert_allclose(g, g_rot, atol=1e-12)
    a2 = a * a
    np.testing.assert_allclose(g[0], 0.5 * np.pi * np.array([a2.real, -a2.imag, 0.0]), atol=1e-12)
    np.testing.assert_allclose(g[1], 0.0)


def test_higher_order_points_do_not_move_the_eigenvalue():
    g = eigenvalue_gradient([_branch(0.5 + 0.5j, n=1)], 2)
    assert g.norm() == 0.0


def test_gradient_of_a_multiple_eigenvalue_is_refused():
    with pytest.raises(DegenerateCluster):
        eigenvalue_gradient([_branch(1.0)], 2, multiplicity=2)


def test_rotations_do_not_change_the_eigenvalue(close_pair):
    config, ops, pairs = close_pair
    data = classify_vanishing(pairs[0].section, ops)["data"]
    gradient = eigenvalue_gradient(data, config.n_points)
    scale = gradient.norm()
    assert scale > 0
    for axis in range(3):
        field = rotation_vector_field(axis)
        nu = make_config_tangent(config, field(config.points))
        assert abs(gradient.pair(nu)) <= 0.1 * scale


def test_separating_the_pair_raises_the_ground_eigenvalue(close_pair):
    config, ops, _ = close_pair
    _, _, gradient = ground_state_gradient(ops)
    assert gradient.pair(separation_direction(config)) > 0


def test_doublet_splits_symmetrically_when_points_merge(antipodal):
    config, ops, pairs = antipodal
    form = splitting_form(pairs[:2], merge_direction(config), ops)
    eta = form.eta
    assert eta[0] < 0 < eta[1]
    assert abs(eta[0] + eta[1]) <= 0.1 * (eta[1] - eta[0])
    zero = splitting_form(pairs[:2], zero_tangent(config), ops)
    np.testing.assert_array_equal(zero.eta, [0.0, 0.0])


def test_splitting_form_conjugation_preserves_eigenvalues(antipodal):
    config, ops, pairs = antipodal
    form = splitting_form(pairs[:2], merge_direction(config), ops)
    c, s = np.cos(0.7), np.sin(0.7)
    rotated = form.conjugated(np.array([[c, -s], [s, c]]))
    np.testing.assert_allclose(rotated.eta, form.eta, atol=1e-12)
    np.testing.assert_allclose(form.predicted(0.75, 0.1), 0.75 + 0.1 * form.eta)


def test_divergence_identity_with_matching_field(close_pair):
    config, ops, pairs = close_pair
    data = classify_vanishing(pairs[0].section, ops)["data"]
    nu = separation_direction(config)
    result = divergence_identity_residual(
        pairs[0].section, pairs[0].eigenvalue, matching_field(config, nu), ops, data
    )
    assert result["residual"] <= 0.2
    assert np.sign(result["lhs"]) == np.sign(result["rhs"])


def test_fd_step_is_validated(close_pair):
    config, ops, _ = close_pair
    with pytest.raises(ValueError):
        fd_eigenvalue_slope(config, merge_direction(config), h=0.5, ops=ops)


def test_formula_matches_finite_differences(close_pair):
    config, ops, _ = close_pair
    nu = separation_direction(config)
    _, _, gradient = ground_state_gradient(ops)
    fd = fd_eigenvalue_slope(config, nu, h=1e-3, ops=ops)
    assert min(fd.overlaps) >= 0.7
    assert gradient.pair(nu) == pytest.approx(fd.central, rel=0.15)


def test_threaded_differences_match_serial(close_pair):
    config, ops, _ = close_pair
    nu = separation_direction(config)
    serial = fd_eigenvalue_slope(config, nu, h=1e-3, ops=ops)
    threaded = fd_eigenvalue_slope(config, nu, h=1e-3, ops=ops, threads=2)
    assert threaded.central == pytest.approx(serial.central, rel=1e-9, abs=1e-12)
    assert threaded.overlaps == pytest.approx(serial.overlaps, rel=1e-9)


def test_gradient_check_trial_row(close_pair):
    config, _, _ = close_pair
    row = gradient_check_trial(config, seed=5, params=TEST_PARAMS, config_id="pair")
    assert row["config_id"] == "pair"
    assert row["direction_id"] == 5
    assert {"formula_slope", "fd_slope", "forward", "backward", "relative_error"} <= set(row)
    assert np.isfinite(row["relative_error"])
    threaded = gradient_check_trial(config, seed=5, params=TEST_PARAMS, config_id="pair", threads=2)
    assert threaded["fd_slope"] == pytest.approx(row["fd_slope"], rel=1e-9, abs=1e-12)


def test_stress_tensor_is_symmetric_and_tangential(antipodal):
    _, ops, pairs = antipodal
    T = stress_energy(pairs[0].section, pairs[0].eigenvalue, ops)
    x = ops.mesh.vertices[ops.mesh.triangles].mean(axis=1)
    x /= np.linalg.norm(x, axis=1)[:, None]
    np.testing.assert_allclose(T, np.transpose(T, (0, 2, 1)), atol=1e-12)
    scale = np.abs(T).max()
    np.testing.assert_allclose(np.einsum("fij,fj->fi", T, x), 0.0, atol=1e-10 * scale)


def test_pair_identity_with_equal_sections_doubles_the_single_identity(close_pair):
    config, ops, pairs = close_pair
    f, lam = pairs[0].section, pairs[0].eigenvalue
    data = classify_vanishing(f, ops)["data"]
    field = matching_field(config, separation_direction(config))
    single = divergence_identity_residual(f, lam, field, ops, data)
    paired = pair_identity_residual(f, f, lam, lam, field, ops, data, data)
    assert paired["flux_term"] == pytest.approx(0.0, abs=1e-12)
    assert paired["lhs"] == pytest.approx(2.0 * single["lhs"], rel=1e-9)
    assert paired["rhs"] == pytest.approx(2.0 * single["rhs"], rel=1e-9)


def test_weak_divergence_vanishes_for_rotations(untwisted):
    _, ops, pairs = untwisted
    f = pairs[1].section
    for axis in range(3):
        field = rotation_vector_field(axis)
        # Cauchy-Schwarz bound: |grad f| in L2 times |e x x| in L2
        bound = np.sqrt(float(f @ (ops.stiffness @ f)) * 8.0 * np.pi / 3.0)
        assert abs(weak_divergence(field, ops, f)) <= 5e-2 * bound
