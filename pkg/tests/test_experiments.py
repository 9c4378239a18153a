import numpy as np
import pytest

from conftest import TEST_PARAMS
from services.geometry_service import antipodal_configuration, exp_map, pair_configuration
from services.mesh_service import rayleigh
from services.experiment_service import (
    c2_antipodal_spectrum,
    c2_branch_coefficient,
    c2_coincident_spectrum,
    c2_eigensection,
    c2_norm_constant,
    c2_section_gradient,
    c2_section_on_mesh,
    coalesce_study,
    flow_ascent,
    packing_config,
    packing_eigenvalue_study,
    packing_mesh_params,
    pair_identity_check,
    platonic_criticality,
    spectral_flow_c2,
)


def test_exact_spectra():
    assert c2_antipodal_spectrum(3).expanded() == [0.75] * 2 + [3.75] * 4 + [8.75] * 6
    assert c2_antipodal_spectrum(2).multiplicities() == [2, 4]
    assert c2_coincident_spectrum(2).expanded() == [0.0] + [2.0] * 3 + [6.0] * 5
    with pytest.raises(ValueError):
        c2_antipodal_spectrum(0)


def test_norm_constant():
    assert c2_norm_constant(1) == pytest.approx(np.sqrt(2.0) / np.pi)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_closed_form_sections_are_normalized(m):
    n_theta, n_phi = 400, 400
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    x = np.column_stack([(np.sin(T) * np.cos(P)).ravel(), (np.sin(T) * np.sin(P)).ravel(), np.cos(T).ravel()])
    f = c2_eigensection(m, 0.7, x)
    weight = (np.sin(T).ravel()) * (np.pi / n_theta) * (2.0 * np.pi / n_phi)
    assert float(np.sum(f * f * weight)) == pytest.approx(1.0, rel=2e-3)


@pytest.mark.parametrize("m", [1, 2])
def test_closed_form_gradient_matches_differences(m, rng):
    theta = rng.uniform(0.4, 2.7, 20)
    phi = rng.uniform(0.5, 5.8, 20)
    x = np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    grad = c2_section_gradient(m, 0.3, x)
    np.testing.assert_allclose(np.sum(grad * x, axis=1), 0.0, atol=1e-12)
    h = 1e-5
    for t in (np.cross(x, [0.0, 0.0, 1.0]), np.cross(x, [1.0, 0.0, 0.0])):
        t = t / np.linalg.norm(t, axis=1)[:, None]
        plus = c2_eigensection(m, 0.3, exp_map(x, h * t))
        minus = c2_eigensection(m, 0.3, exp_map(x, -h * t))
        np.testing.assert_allclose((plus - minus) / (2.0 * h), np.sum(grad * t, axis=1), atol=1e-6)


def test_branch_coefficients():
    n = c2_norm_constant(1)
    assert abs(c2_branch_coefficient(1, 0.5, "north")) == pytest.approx(n)
    assert abs(c2_branch_coefficient(1, 0.5, "south")) == pytest.approx(n)
    with pytest.raises(ValueError):
        c2_branch_coefficient(1, 0.0, "east")


def test_closed_form_section_on_mesh(antipodal):
    _, ops, _ = antipodal
    f = c2_section_on_mesh(ops, 1, 0.0)
    assert float(f @ (ops.mass @ f)) == pytest.approx(1.0)
    assert rayleigh(f, ops) == pytest.approx(0.75, rel=0.05)


def test_packing_configuration():
    R = 0.7
    config = packing_config(R)
    assert config.n_points % 2 == 0
    assert config.n_points >= 2 * int(4.0 / R**2)
    assert config.min_separation == pytest.approx(R / 8.0, rel=1e-6)
    assert packing_mesh_params(R).grade_radius == pytest.approx(R / 4.0)
    with pytest.raises(ValueError):
        packing_config(2.0)


def test_spectral_flow_validates_separations():
    with pytest.raises(ValueError):
        spectral_flow_c2([1.0, 2.0])
    with pytest.raises(ValueError):
        spectral_flow_c2([4.0, 3.0])


def test_spectral_flow_short_run():
    flow = spectral_flow_c2([2.8, 2.7], n_eigs=3, params=TEST_PARAMS)
    assert flow.branches.shape == (2, 3)
    assert len(flow.min_overlaps) == 2
    report = flow.endpoint_report()
    assert set(report) == {"start", "end", "start_vs_antipodal", "end_vs_coincident"}
    assert report["start"][0] < report["start"][1]


def test_flow_ascent_does_not_decrease_the_ground_eigenvalue():
    trajectory = flow_ascent(pair_configuration(1.0), max_iters=1, params=TEST_PARAMS)
    assert trajectory.reason == "max_iters"
    assert len(trajectory.steps) == 2
    lowest = trajectory.lowest()
    assert lowest[1] >= lowest[0] - 1e-8
    assert trajectory.steps[0].step > 0


def test_coalescing_pair_lifts_the_eigenvalue():
    rows = coalesce_study(antipodal_configuration(), [0.2], x=np.array([1.0, 0.0, 0.0]), params=TEST_PARAMS)
    row = rows[0]
    assert row["E_p"] > row["E_q"]
    assert row["transfer_rayleigh"] >= row["E_p"] * (1.0 - 1e-9)
    assert row["gap"] > 0


def test_platonic_survey_rows():
    rows = platonic_criticality(("tetrahedron",), n_eigs=8, params=TEST_PARAMS)
    assert rows
    for row in rows:
        assert row["kind"] == "tetrahedron"
        assert 0.0 <= row["relative_minimum"] <= 1.0 + 1e-12


def test_packing_rows_do_not_depend_on_thread_count():
    serial = packing_eigenvalue_study([1.2, 1.0], threads=1)
    threaded = packing_eigenvalue_study([1.2, 1.0], threads=2)
    assert [r["R"] for r in threaded] == [1.2, 1.0]
    for a, b in zip(serial, threaded):
        assert b == pytest.approx(a, rel=1e-9)
        assert a["n_points"] % 2 == 0
        assert a["E"] > 0
        assert a["E_R2"] == pytest.approx(a["E"] * a["R"] ** 2)


def test_threaded_flow_takes_the_serial_step():
    serial = flow_ascent(pair_configuration(1.0), max_iters=1, params=TEST_PARAMS)
    threaded = flow_ascent(pair_configuration(1.0), max_iters=1, params=TEST_PARAMS, threads=3)
    assert threaded.reason == serial.reason
    assert threaded.steps[0].step == serial.steps[0].step
    np.testing.assert_allclose(threaded.steps[1].points, serial.steps[1].points, atol=1e-12)
    assert threaded.lowest() == pytest.approx(serial.lowest(), rel=1e-9)


def test_threaded_coalescence_keeps_row_order():
    x = np.array([1.0, 0.0, 0.0])
    serial = coalesce_study(antipodal_configuration(), [0.4, 0.2], x=x, params=TEST_PARAMS)
    threaded = coalesce_study(antipodal_configuration(), [0.4, 0.2], x=x, params=TEST_PARAMS, threads=2)
    assert [r["separation"] for r in threaded] == [0.4, 0.2]
    for a, b in zip(serial, threaded):
        assert b["E_p"] == pytest.approx(a["E_p"], rel=1e-9)
        assert b["transfer_rayleigh"] == pytest.approx(a["transfer_rayleigh"], rel=1e-9)


def test_pair_identity_sides_agree():
    result = pair_identity_check(antipodal_configuration(), 0.2, x=np.array([1.0, 0.0, 0.0]), params=TEST_PARAMS)
    assert result["E_p"] > result["E_q"]
    # f_p with the enclosed region flipped stays close to f_q
    assert result["integral"] > 0.5
    assert result["arc_length"] >= 0.2 * (1.0 - 1e-6)
    assert result["signs_agree"]
    assert result["residual"] < 0.3
