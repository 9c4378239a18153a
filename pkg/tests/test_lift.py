import numpy as np
import pytest

from services.lift_service import (
    ClosedFormEvaluator,
    LinearEvaluator,
    NegativeEigenvalue,
    OnBranchRay,
    ShellGrid,
    closed_coclosed_residuals,
    evaluate_lift,
    holder_exponent_fit,
    homogeneity_check,
    homogeneity_exponent,
    lift_from_pair,
    lift_sample_points,
    make_lift,
    sample_lift,
)

SMALL_GRID = ShellGrid(n_radii=2, n_polar=12, n_azimuth=24)


@pytest.mark.parametrize("lam,mu", [(0.0, 1.0), (0.75, 1.5), (2.0, 2.0), (3.75, 2.5)])
def test_homogeneity_exponent(lam, mu):
    assert homogeneity_exponent(lam) == pytest.approx(mu)


def test_negative_eigenvalue_is_rejected():
    with pytest.raises(NegativeEigenvalue):
        homogeneity_exponent(-0.1)
    with pytest.raises(NegativeEigenvalue):
        make_lift(-1.0, ClosedFormEvaluator(1))


def test_unknown_convention_is_rejected():
    with pytest.raises(ValueError):
        make_lift(0.75, ClosedFormEvaluator(1), convention="weighted")


def test_conventions_differ_by_one_in_radial_power():
    stated = make_lift(0.75, ClosedFormEvaluator(1))
    harmonic = make_lift(0.75, ClosedFormEvaluator(1), convention="harmonic")
    assert stated.radial_power == pytest.approx(1.5)
    assert harmonic.radial_power == pytest.approx(0.5)
    assert harmonic.radial_power * (harmonic.radial_power + 1.0) == pytest.approx(0.75)


def test_closed_form_lift_is_homogeneous():
    lift = make_lift(0.75, ClosedFormEvaluator(1, alpha=0.3))
    assert homogeneity_check(lift, lift_sample_points(50, radius=1.3, seed=1)) <= 1e-6


def test_mesh_lift_is_homogeneous(antipodal):
    _, ops, pairs = antipodal
    lift = lift_from_pair(pairs[0], ops)
    assert lift.mu == pytest.approx(1.5, rel=0.03)
    assert homogeneity_check(lift, lift_sample_points(40, seed=2)) <= 1e-6


def test_branch_rays_and_origin_are_excluded():
    lift = make_lift(0.75, ClosedFormEvaluator(1))
    with pytest.raises(OnBranchRay):
        evaluate_lift(lift, [(0.0, 0.0, 2.0)])
    with pytest.raises(OnBranchRay):
        evaluate_lift(lift, [(0.0, 0.0, -0.5)])
    with pytest.raises(OnBranchRay):
        evaluate_lift(lift, [(0.0, 0.0, 0.0)])


def test_radial_component_vanishes_on_the_nodal_meridian():
    lift = make_lift(0.75, ClosedFormEvaluator(1, alpha=np.pi))
    theta = np.linspace(0.2, 2.9, 15)
    x = 1.5 * np.column_stack([-np.sin(theta), np.zeros_like(theta), np.cos(theta)])
    nu = evaluate_lift(lift, x)
    radial = np.sum(nu * x, axis=1) / np.linalg.norm(x, axis=1)
    np.testing.assert_allclose(radial, 0.0, atol=1e-10)
    assert np.all(np.linalg.norm(nu, axis=1) > 0.01)


def test_untwisted_stated_lift_is_closed():
    lift = make_lift(2.0, LinearEvaluator([0.3, -0.5, 0.8]))
    result = closed_coclosed_residuals(lift, SMALL_GRID)
    assert result["d_residual"] <= 1e-4
    assert result["d_order"] >= 1.0


def test_untwisted_harmonic_lift_is_constant():
    c = np.array([0.3, -0.5, 0.8])
    lift = make_lift(2.0, LinearEvaluator(c), convention="harmonic")
    np.testing.assert_allclose(evaluate_lift(lift, lift_sample_points(10, radius=1.7)), np.tile(c, (10, 1)), atol=1e-12)
    result = closed_coclosed_residuals(lift, SMALL_GRID)
    assert result["d_residual"] <= 1e-10
    assert result["delta_residual"] <= 1e-10


def test_harmonic_lift_residuals_converge():
    lift = make_lift(0.75, ClosedFormEvaluator(1), convention="harmonic")
    result = closed_coclosed_residuals(lift, SMALL_GRID, threads=2)
    assert result["samples"] > 0
    assert result["d_residual"] < result["d_residual_coarse"]
    assert result["delta_residual"] < result["delta_residual_coarse"]
    assert result["d_order"] >= 1.0
    assert result["delta_order"] >= 1.0


def test_stated_lift_is_closed_but_not_coclosed():
    stated = closed_coclosed_residuals(make_lift(0.75, ClosedFormEvaluator(1)), SMALL_GRID)
    assert stated["d_order"] >= 1.0
    assert stated["delta_residual"] > 10.0 * stated["d_residual"]


def test_wrong_eigenvalue_breaks_coclosedness():
    lift = make_lift(0.75, ClosedFormEvaluator(1), convention="harmonic")
    true = closed_coclosed_residuals(lift, SMALL_GRID)
    corrupted = closed_coclosed_residuals(lift.with_eigenvalue(0.95), SMALL_GRID)
    assert corrupted["delta_residual"] >= 5.0 * true["delta_residual"]


def test_holder_exponents_near_branch_rays():
    low = holder_exponent_fit(make_lift(0.75, ClosedFormEvaluator(1)), 0)
    assert -0.55 < low["beta"] < -0.4
    high = holder_exponent_fit(make_lift(3.75, ClosedFormEvaluator(2)), 1)
    assert 0.4 < high["beta"] < 0.7
    with pytest.raises(ValueError):
        holder_exponent_fit(make_lift(0.75, ClosedFormEvaluator(1)), 2)


def test_sample_lift_skips_ray_points():
    lift = make_lift(0.75, ClosedFormEvaluator(1))
    points = np.vstack([lift_sample_points(5, seed=4), [(0.0, 0.0, 1.0)]])
    rows = sample_lift(lift, points)
    assert len(rows) == 5
    assert set(rows[0]) == {"x", "y", "z", "nu1", "nu2", "nu3", "norm"}
    assert all(r["norm"] >= 0 for r in rows)
