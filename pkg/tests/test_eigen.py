from dataclasses import replace

import numpy as np
import pytest

from conftest import TEST_PARAMS
from services.eigen_service import (
    NoConvergence,
    apriori_report,
    cluster_multiplicities,
    lowest_eigenpairs,
    spectrum_summary,
)
from services.geometry_service import antipodal_configuration, empty_configuration
from services.mesh_service import MeshParams, build_operators, hardy_ratio


def test_antipodal_spectrum_clusters(antipodal):
    _, _, pairs = antipodal
    values = [p.eigenvalue for p in pairs]
    clusters = cluster_multiplicities(values[:6])
    assert [c.multiplicity for c in clusters] == [2, 4]
    assert clusters[0].value == pytest.approx(0.75, rel=0.05)
    assert clusters[1].value == pytest.approx(3.75, rel=0.07)
    assert values[6] == pytest.approx(8.75, rel=0.1)


def test_untwisted_control_matches_sphere_harmonics(untwisted):
    _, ops, pairs = untwisted
    assert ops.n_free == ops.mesh.n_vertices
    values = [p.eigenvalue for p in pairs]
    assert abs(values[0]) < 1e-6
    np.testing.assert_allclose(values[1:4], 2.0, rtol=0.02)
    assert [c.multiplicity for c in cluster_multiplicities(values[:4])] == [1, 3]


def test_sections_are_mass_orthonormal(antipodal):
    _, ops, pairs = antipodal
    F = np.column_stack([p.section for p in pairs])
    gram = F.T @ (ops.mass @ F)
    np.testing.assert_allclose(gram, np.eye(len(pairs)), atol=1e-6)
    assert max(p.residual for p in pairs) < 1e-5


def test_dense_and_sparse_solvers_agree(small_antipodal):
    _, ops = small_antipodal
    dense = lowest_eigenpairs(ops, 4, dense=True)
    sparse = lowest_eigenpairs(ops, 4, dense=False)
    np.testing.assert_allclose(
        [p.eigenvalue for p in dense], [p.eigenvalue for p in sparse], rtol=1e-6
    )


def test_eigenpair_count_is_validated(small_antipodal):
    _, ops = small_antipodal
    with pytest.raises(ValueError):
        lowest_eigenpairs(ops, 0)
    with pytest.raises(ValueError):
        lowest_eigenpairs(ops, ops.n_free)


def test_cluster_multiplicities():
    clusters = cluster_multiplicities([0.75, 0.76, 3.7, 3.75, 3.8])
    assert [c.multiplicity for c in clusters] == [2, 3]
    assert clusters[1].members == (2, 3, 4)
    assert [c.multiplicity for c in cluster_multiplicities([1.0, 1.05, 1.1], gap_tol=0.01)] == [1, 1, 1]
    assert cluster_multiplicities([]) == []
    with pytest.raises(ValueError):
        cluster_multiplicities([2.0, 1.0])


def test_spectrum_summary_shape(antipodal):
    _, _, pairs = antipodal
    summary = spectrum_summary(pairs, cluster_multiplicities([p.eigenvalue for p in pairs]))
    assert len(summary["eigenvalues"]) == len(pairs)
    assert sum(c["multiplicity"] for c in summary["clusters"]) == len(pairs)


def test_apriori_report(antipodal):
    _, ops, pairs = antipodal
    rows = apriori_report(ops, pairs)
    assert len(rows) == len(pairs)
    for row in rows:
        assert row["identity_error"] <= 0.02
        assert row["hardy_ratio"] > 0
        assert np.isfinite(row["sup_ratio"])


def test_negative_spectrum_is_rejected(small_antipodal):
    _, ops = small_antipodal
    shifted = replace(ops, stiffness=(ops.stiffness - 2.0 * ops.mass).tocsr())
    with pytest.raises(NoConvergence):
        lowest_eigenpairs(shifted, 2, dense=True)


def test_hardy_ratio_is_stable_under_refinement(antipodal):
    _, ops, pairs = antipodal
    coarse = hardy_ratio(ops, pairs[0].section)
    finer = MeshParams(
        background_count=TEST_PARAMS.background_count,
        grade_depth=TEST_PARAMS.grade_depth + 1,
        grade_radius=TEST_PARAMS.grade_radius,
    )
    refined_ops = build_operators(antipodal_configuration(), finer)
    refined = hardy_ratio(refined_ops, lowest_eigenpairs(refined_ops, 1, seed=0)[0].section)
    assert refined_ops.mesh.n_vertices > ops.mesh.n_vertices
    assert refined == pytest.approx(coarse, rel=0.2)


def test_untwisted_error_shrinks_with_mesh_size():
    errors = []
    for count in (600, 2400):
        ops = build_operators(empty_configuration(), MeshParams(background_count=count))
        values = [p.eigenvalue for p in lowest_eigenpairs(ops, 4, seed=0)]
        errors.append(abs(np.mean(values[1:4]) - 2.0))
    # four times the points halves the mesh size
    assert errors[1] <= 0.6 * errors[0]
