import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import brute_minimize_1d
from pdmm.problem import (EdgeConstraint, GraphProblem, GraphTopology, HingeFunction,
                          QuadraticFunction, ZeroFunction, averaging_problem_from_dict,
                          averaging_problem_to_dict, build_averaging_problem,
                          build_hinge_pair_problem, grid_topology, load_averaging_problem,
                          path_topology, ring_topology, validate_problem)
from pdmm.diagnostics import averaging_certificate


def test_grid_has_expected_edge_count():
    topo = grid_topology(10, 10)
    assert topo.node_count == 100
    assert len(topo.edges) == 180
    assert all(i < j for i, j in topo.edges)


def test_neighbors_match_edges():
    topo = grid_topology(3, 4)
    for i in range(topo.node_count):
        for j in range(topo.node_count):
            assert (j in topo.neighbors[i]) == ((min(i, j), max(i, j)) in topo.edges)


def test_ring_and_path():
    assert len(ring_topology(5).edges) == 5
    assert path_topology(4).edges == ((0, 1), (1, 2), (2, 3))
    with pytest.raises(ValueError):
        ring_topology(2)


def test_two_node_averaging_is_valid():
    p = build_averaging_problem([1.0, 2.0], path_topology(2))
    assert validate_problem(p).ok


def test_self_loop_reported():
    topo = GraphTopology(2, ((0, 0),))
    p = GraphProblem(topo, (EdgeConstraint((0, 0), [[1.0]], [[-1.0]], [0.0]),),
                     (QuadraticFunction([0.0]), QuadraticFunction([0.0])))
    report = validate_problem(p)
    assert not report.ok
    assert any("self-loop" in v for v in report.violations)


def test_row_mismatch_reported():
    topo = GraphTopology(2, ((0, 1),))
    bad = EdgeConstraint((0, 1), [[1.0], [1.0]], [[-1.0]], [0.0])
    p = GraphProblem(topo, (bad,), (QuadraticFunction([0.0]), QuadraticFunction([0.0])))
    report = validate_problem(p)
    assert not report.ok
    assert any("shape" in v for v in report.violations)


def test_duplicate_and_out_of_range_edges_reported():
    topo = GraphTopology(3, ((0, 1), (0, 1), (1, 5)))
    cons = tuple(EdgeConstraint(e, [[1.0]], [[-1.0]], [0.0]) for e in topo.edges)
    p = GraphProblem(topo, cons, tuple(QuadraticFunction([0.0]) for _ in range(3)))
    text = " ".join(validate_problem(p).violations)
    assert "duplicate" in text and "outside" in text


def test_builders_validate():
    assert validate_problem(build_hinge_pair_problem()).ok
    assert validate_problem(build_averaging_problem(np.arange(12.0), grid_topology(3, 4))).ok


@pytest.mark.parametrize("t, topo, expected", [
    ([3.0, 3.0], path_topology(2), [3.0, 3.0]),
    ([0.0, 1.0, 2.0], path_topology(3), [1.0, 1.0, 1.0]),
    ([0.0, 4.0], GraphTopology(2, ()), [0.0, 4.0]),
])
def test_averaging_optimum(t, topo, expected):
    cert = averaging_certificate(build_averaging_problem(t, topo))
    assert np.allclose(np.concatenate(cert.x_star), expected)


def test_hinge_pair_objective_zero_on_segment():
    p = build_hinge_pair_problem()
    for s in np.linspace(-1, 1, 11):
        assert p.objective([[s], [s]]) == 0.0
    assert p.functions[0].value([2.0]) == 1.0
    assert p.objective([[1.5], [1.5]]) > 0


def test_hinge_local_solve_oracle():
    f1 = HingeFunction(1.0)
    ref = brute_minimize_1d(lambda x: max(x - 1, 0) + 0.5 * x * x)
    assert f1.local_quadratic_solve([[1.0]], [0.0])[0] == pytest.approx(0.0, abs=1e-12)
    assert ref == pytest.approx(0.0, abs=1e-6)


@given(q=st.floats(0.05, 20), b=st.floats(-30, 30), direction=st.sampled_from([1.0, -1.0]))
def test_hinge_solve_matches_brute_force(q, b, direction):
    f = HingeFunction(direction)
    x = f.local_quadratic_solve([[q]], [b])[0]
    phi = lambda v: max(direction * v - 1, 0) + 0.5 * q * v * v - b * v
    ref = brute_minimize_1d(phi, lo=-700, hi=700, n=20001)
    # the grid search is limited by floating-point flatness, so compare objective values
    assert phi(x) <= phi(ref) + 1e-9 * (1 + abs(phi(ref)))
    assert x == pytest.approx(ref, abs=1e-3)
    # first-order condition: b - q x is a subgradient
    assert f.in_subdifferential([x], [b - q * x], tol=1e-10)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.floats(0.1, 5))
def test_quadratic_solve_first_order(target, b, scale):
    f = QuadraticFunction(target)
    Q = scale * np.array([[2.0, 0.5], [0.5, 1.0]])
    x = f.local_quadratic_solve(Q, b)
    assert np.allclose(x, np.linalg.solve(np.eye(2) + Q, np.add(b, target)))
    assert f.in_subdifferential(x, np.asarray(b) - Q @ x, tol=1e-10)


def test_hinge_conjugate_domains():
    f1, f2 = HingeFunction(1.0), HingeFunction(-1.0)
    assert f1.conjugate([0.3]) == pytest.approx(0.3)
    assert f1.conjugate([1.2]) == np.inf
    assert f2.conjugate([-0.4]) == pytest.approx(0.4)
    assert f2.conjugate([0.1]) == np.inf


@given(st.floats(-0.99, 0.99), st.sampled_from([1.0, -1.0]))
def test_hinge_conjugate_matches_sup(y, direction):
    f = HingeFunction(direction)
    lo, hi = f.conjugate_domain
    if not lo <= y <= hi:
        assert f.conjugate([y]) == np.inf
        return
    xs = np.linspace(-50, 50, 100001)
    sup = np.max(y * xs - np.maximum(direction * xs - 1, 0))
    assert f.conjugate([y]) == pytest.approx(sup, abs=1e-6)


def test_zero_function():
    f = ZeroFunction(1)
    assert f.conjugate([0.0]) == 0.0 and f.conjugate([0.1]) == np.inf
    assert f.local_quadratic_solve([[2.0]], [4.0])[0] == 2.0


def test_json_round_trip(tmp_path):
    p = build_averaging_problem([0.5, 0.25, 1.0], path_topology(3))
    data = averaging_problem_to_dict(p)
    assert data["edges"][0] == {"i": 1, "j": 2}
    path = tmp_path / "p.json"
    path.write_text(json.dumps(data))
    q = load_averaging_problem(path)
    assert q.topology == p.topology
    assert np.array_equal(q.meta["t"], p.meta["t"])


def test_json_rejects_bad_edges():
    with pytest.raises(ValueError, match="self-loop"):
        averaging_problem_from_dict({"nodes": [{"id": 1, "t": 0}, {"id": 2, "t": 1}],
                                     "edges": [{"i": 1, "j": 1}]})
    with pytest.raises(ValueError):
        averaging_problem_from_dict({"nodes": [{"id": 2, "t": 0}], "edges": []})
