import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metareflect import action, dynamics as dy, fields, quasipotential as qp
from metareflect.errors import InconsistentMatrix

FAST = qp.OptimizerOptions(n_nodes=60, max_iter=600)


@pytest.fixture(scope="module")
def locs(six_eq_points):
    return {e.index: e.location for e in six_eq_points}


def test_gradient_field_uphill_and_downhill():
    # b = -grad U with a = I: V(x, y) = 2 (U(y) - U(x)) uphill from the minimum, 0 downhill
    f = fields.quadratic_gradient((1.0, 1.0))
    up, path = qp.minimize_action([0.0, 0.0], [0.4, 0.3], f, FAST)
    assert up == pytest.approx(0.25, rel=1e-6)
    assert action.action_bbar(path, f) == pytest.approx(up, rel=1e-6)
    down, _ = qp.minimize_action([0.4, 0.3], [0.0, 0.0], f, FAST)
    assert down < 1e-6


def test_constant_field_closed_form():
    f = fields.constant_field([1.0, 0.5])
    x, y = np.array([0.3, 0.2]), np.array([-0.4, -0.1])
    e = y - x
    exact = np.linalg.norm(e) * math.hypot(1.0, 0.5) - e @ [1.0, 0.5]
    got, _ = qp.minimize_action(x, y, f, FAST)
    assert got == pytest.approx(exact, rel=1e-5)
    assert qp.oracle_dijkstra(x, y, f, 120) == pytest.approx(exact, rel=0.02)


def test_boundary_crossing_matches_barrier(six_eq, locs):
    val, path = qp.minimize_action(locs[1], locs[3], six_eq, FAST)
    assert val == pytest.approx(1.0, rel=2e-3)
    assert np.all(six_eq.domain.sd(path.points) <= 1e-9)
    np.testing.assert_array_equal(path.points[0], locs[1])
    np.testing.assert_array_equal(path.points[-1], locs[3])


def test_avoiding_route_goes_the_long_way(six_eq, six_eq_points):
    stable = [e for e in six_eq_points if e.stable]
    val, path = qp.minimize_action_avoiding(1, 5, six_eq, stable, 0.25, FAST, return_path=True)
    # direct crossing 1 -> 5 costs 6; the plain value 5 would pass through O_3
    assert val == pytest.approx(6.0, rel=2e-3)
    assert qp.clearance(path.points, [stable[1].location]) >= 0.125


def test_avoiding_without_others_is_plain():
    f = fields.quadratic_gradient((1.0, 1.0))
    two = [dy.Equilibrium(1, np.array([0.0, 0.0]), True), dy.Equilibrium(2, np.array([0.4, 0.3]), True)]
    assert qp.minimize_action_avoiding(1, 2, f, two, 0.25, FAST) == pytest.approx(
        qp.minimize_action(two[0].location, two[1].location, f, FAST)[0])
    with pytest.raises(ValueError):
        qp.minimize_action_avoiding(1, 1, f, two, 0.25, FAST)


def test_trivial_pair_and_history():
    f = fields.quadratic_gradient()
    val, path = qp.minimize_action([0.1, 0.1], [0.1, 0.1], f)
    assert val == 0.0 and len(path) == 1
    res = qp.minimize_action_full([0.0, 0.0], [0.3, -0.2], f, FAST)
    assert res.history[-1] <= res.history[0]
    with pytest.raises(ValueError):
        qp.minimize_action([0.0, 0.0], [2.0, 0.0], f)


def test_oracle_matrix_on_six_points(six_eq, six_eq_points):
    m = qp.oracle_matrix(six_eq, six_eq_points, grid_resolution=150)
    assert m.labels == [1, 3, 5]
    expect = np.array([[0, 1, 5], [2, 0, 4], [5, 3, 0]], dtype=float)
    np.testing.assert_allclose(m.values, expect, rtol=0.03, atol=1e-9)
    m.check()


def test_grid_graph_ring_is_connected(six_eq):
    g = qp.build_grid_graph(six_eq, 60)
    assert np.all(np.abs(six_eq.domain.sd(g.nodes[g.boundary_ids])) <= 1e-9)
    assert g.matrix.shape[0] == len(g.nodes)
    assert g.matrix.data.min() >= 0


def test_matrix_validation():
    good = qp.example_matrix()
    good.check()
    assert good.get(5, 1) == 7.0 and good.variant == qp.AVOIDING
    with pytest.raises(InconsistentMatrix):
        qp.QuasipotentialMatrix(np.array([[1.0, 1.0], [1.0, 0.0]]), qp.PLAIN, [1, 2]).check()
    with pytest.raises(InconsistentMatrix):
        qp.QuasipotentialMatrix(np.array([[0.0, -1.0], [1.0, 0.0]]), qp.PLAIN, [1, 2]).check()
    with pytest.raises(InconsistentMatrix):
        qp.QuasipotentialMatrix(np.zeros((2, 2)), qp.PLAIN, [1, 2]).check()
    bad_triangle = qp.QuasipotentialMatrix(np.array([[0, 1, 5], [1, 0, 1], [1, 1, 0.0]]), qp.PLAIN, [1, 2, 3])
    with pytest.raises(InconsistentMatrix):
        bad_triangle.check()
    with pytest.raises(ValueError):
        qp.QuasipotentialMatrix(np.zeros((2, 3)), qp.PLAIN, [1, 2])


def test_json_round_trip():
    m = qp.example_matrix()
    back = qp.QuasipotentialMatrix.from_json(json.dumps(m.to_json()))
    np.testing.assert_array_equal(back.values, m.values)
    assert back.labels == m.labels and back.variant == m.variant and back.provenance == "user_supplied"
    assert qp.QuasipotentialMatrix.from_json({"labels": [1, 2], "values": [[0, 1], [1, 0]]}).provenance \
        == "user_supplied"


@settings(max_examples=40, deadline=None)
@given(arrays(float, (4, 4), elements=st.floats(0.1, 10.0)))
def test_closure_is_triangle_consistent(raw):
    np.fill_diagonal(raw, 0.0)
    f = fields.zero_field()
    paths = {(a, b): action.time_parameterize(f, np.array([[0.0, 0.0], [0.1 * a, 0.1 * b]]))
             for a in range(4) for b in range(4) if a != b}
    v, _ = qp._concatenation_closure(f, raw, paths)
    assert np.all(v <= raw)
    assert np.all(v <= np.min(v[:, :, None] + v[None, :, :], axis=1) + 1e-12)
    qp.QuasipotentialMatrix(v, qp.PLAIN, [1, 2, 3, 4]).check()


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.floats(-0.6, 0.6))
def test_oracle_never_undercuts_exact_value(x1, x2, y1, y2):
    # graph paths are admissible curves, so the oracle cannot undercut the exact value
    f = fields.constant_field([0.4, -0.8])
    x, y = np.array([x1, x2]), np.array([y1, y2])
    e = y - x
    exact = np.linalg.norm(e) * np.linalg.norm([0.4, -0.8]) - e @ [0.4, -0.8]
    graph = _constant_graph()
    got = qp.oracle_dijkstra(x, y, f, graph=graph)
    # snapping to the nearest nodes moves the endpoints by at most half a diagonal
    slack = 2 * 2 * math.sqrt(2) / 40 * 2 * np.linalg.norm([0.4, -0.8])
    assert got >= exact - slack


_GRAPH = {}


def _constant_graph():
    if "g" not in _GRAPH:
        _GRAPH["g"] = qp.build_grid_graph(fields.constant_field([0.4, -0.8]), 40)
    return _GRAPH["g"]
