from types import SimpleNamespace

import numpy as np
import pytest

from services.mesh_service import ZeroSection
from services.nodal_service import (
    GraphNode,
    NoConnectingArc,
    ZeroGraph,
    branch_degrees,
    connecting_arc,
    euler_characteristic,
    extract_zero_graph,
    order_mismatches,
    vanishing_census,
)


@pytest.fixture(scope="module")
def ground_graph(antipodal):
    _, ops, pairs = antipodal
    return extract_zero_graph(pairs[0].section, ops)


def _hand_graph() -> ZeroGraph:
    # one branch point of degree 1, one of degree 3 carrying a loop
    nodes = [
        GraphNode(label=0, position=np.array([0.0, 0.0, 1.0]), kind="branch", degree=1, vertex=0),
        GraphNode(label=1, position=np.array([0.0, 0.0, -1.0]), kind="branch", degree=3, vertex=1),
    ]
    return ZeroGraph(
        nodes=nodes, arcs=[], n_vertices=2, n_edges=2, components=1, cycles=1,
        n_pairs=1, eps_z=1e-6, radius_factor=3.0,
    )


def test_ground_state_zero_set_is_one_meridian_arc(ground_graph):
    assert not ground_graph.unresolved
    assert sorted(n.degree for n in ground_graph.branch_nodes()) == [1, 1]
    assert ground_graph.critical_nodes() == []
    assert ground_graph.cycles == 0
    assert ground_graph.components == 1


def test_ground_state_passes_the_vanishing_census(ground_graph):
    census = vanishing_census(ground_graph, k=1)
    assert census["count"] == 2
    assert census["bound"] == 2
    assert census["passed"]


def test_ground_state_euler_characteristic(ground_graph):
    chi = euler_characteristic(ground_graph)
    assert chi["combinatorial"] == 1
    assert chi["closed_form"] == pytest.approx(1.0)
    assert chi["agree"]


def test_connecting_arc_joins_the_poles(ground_graph):
    arc = connecting_arc(ground_graph, 0, 1)
    np.testing.assert_allclose(arc[0], [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(arc[-1], [0.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(arc, axis=1), 1.0)
    with pytest.raises(NoConnectingArc):
        connecting_arc(ground_graph, 0, 7)


def test_graph_serializes(ground_graph):
    record = ground_graph.to_dict()
    assert record["summary"]["chi"] == 1
    assert len(record["nodes"]) >= 2
    assert all(len(e["polyline"]) >= 2 for e in record["edges"])


def test_zero_section_is_rejected(antipodal):
    _, ops, _ = antipodal
    with pytest.raises(ZeroSection):
        extract_zero_graph(np.zeros(ops.n_free), ops)


def test_hand_built_graph_arithmetic():
    graph = _hand_graph()
    chi = euler_characteristic(graph)
    assert chi["combinatorial"] == 0
    assert chi["closed_form"] == pytest.approx(0.0)
    assert chi["agree"]
    assert graph.node(1).order == 1
    with pytest.raises(KeyError):
        graph.node(5)


def test_hand_built_graph_census():
    graph = _hand_graph()
    first = vanishing_census(graph, k=1)
    assert first["count"] == 1 and first["bound"] == 2 and not first["passed"]
    assert vanishing_census(graph, k=2)["passed"]


def test_degrees_against_fitted_orders():
    graph = _hand_graph()
    assert branch_degrees(graph) == [
        {"vertex": 0, "degree": 1, "n_p": 0},
        {"vertex": 1, "degree": 3, "n_p": 1},
    ]
    fitted = [SimpleNamespace(vertex=0, n=0), SimpleNamespace(vertex=1, n=0)]
    mismatches = order_mismatches(graph, fitted)
    assert [m["vertex"] for m in mismatches] == [1]
    assert mismatches[0]["fitted"] == 0


def test_critical_node_order():
    node = GraphNode(label=3, position=np.array([1.0, 0.0, 0.0]), kind="critical", degree=4)
    assert node.order == 2
    assert node.to_dict()["vertex"] == -1
