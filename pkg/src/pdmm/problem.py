"""Graph topology, edge constraints and local objective oracles.

A problem is a collection of per-node convex functions ``f_i`` coupled by one
linear constraint per undirected edge::

    minimize    sum_i f_i(x_i)
    subject to  A_ij x_i + A_ji x_j = c_ij      for every edge (i, j), i < j

Node indices are 0-based throughout the Python API.  The JSON problem format
(see :func:`load_averaging_problem`) uses 1-based indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix


@dataclass(frozen=True)
class GraphTopology:
    """Undirected simple graph on nodes ``0 .. node_count - 1``.

    Edges are stored as ``(i, j)`` with ``i < j``.  Construction does not
    reject malformed edges so that :func:`validate_problem` can report them.
    """

    node_count: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[set[int]] = [set() for _ in range(self.node_count)]
        for i, j in self.edges:
            if 0 <= i < self.node_count and 0 <= j < self.node_count and i != j:
                adj[i].add(j)
                adj[j].add(i)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.edges)}

    @property
    def directed_edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.node_count) for j in self.neighbors[i]]

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def find_edge(self, i: int, j: int) -> int:
        """Index of the undirected edge joining ``i`` and ``j``."""
        return self.edge_index[(min(i, j), max(i, j))]

    def is_connected(self) -> bool:
        return self.component_labels().max(initial=0) == 0

    def component_labels(self) -> np.ndarray:
        if self.node_count == 0:
            return np.zeros(0, dtype=int)
        rows = [i for i, _ in self.edges]
        cols = [j for _, j in self.edges]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.node_count,) * 2)
        _, labels = connected_components(adj, directed=False)
        return labels


def grid_topology(rows: int, cols: int) -> GraphTopology:
    """Rectangular ``rows x cols`` lattice, nodes numbered row-major."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return GraphTopology(rows * cols, tuple(sorted(edges)))


def path_topology(m: int) -> GraphTopology:
    return GraphTopology(m, tuple((i, i + 1) for i in range(m - 1)))


def ring_topology(m: int) -> GraphTopology:
    if m < 3:
        raise ValueError("a ring needs at least 3 nodes")
    return GraphTopology(m, tuple(sorted([(i, i + 1) for i in range(m - 1)] + [(0, m - 1)])))


def _as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError("constraint blocks must be 2-D")
    return arr


@dataclass(frozen=True)
class EdgeConstraint:
    """Linear coupling ``A_ij x_i + A_ji x_j = c`` on edge ``(i, j)``, ``i < j``."""

    edge: tuple[int, int]
    A_ij: np.ndarray
    A_ji: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "edge", (int(self.edge[0]), int(self.edge[1])))
        object.__setattr__(self, "A_ij", _as_matrix(self.A_ij))
        object.__setattr__(self, "A_ji", _as_matrix(self.A_ji))
        object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, dtype=float)))

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    def block_for(self, node: int) -> np.ndarray:
        """Matrix multiplying ``x_node`` in this constraint."""
        i, j = self.edge
        if node == i:
            return self.A_ij
        if node == j:
            return self.A_ji
        raise KeyError(f"node {node} is not an endpoint of edge {self.edge}")

    def residual(self, x_i, x_j) -> np.ndarray:
        return self.A_ij @ x_i + self.A_ji @ x_j - self.c


# --------------------------------------------------------------------------
# local objective oracles


class NodeFunction:
    """Convex local objective with the two operations the solver needs.

    Subclasses implement

    * ``value(x)``
    * ``local_quadratic_solve(Q, b)``: ``argmin_x f(x) + 0.5 x'Qx - b'x``
    * ``conjugate(y)``: Fenchel conjugate, ``inf`` outside its domain
    * ``subgradient(x)``: any element of the subdifferential
    * ``in_subdifferential(x, g, tol)``
    """

    dim: int = 1
    # closed interval containing dom f* (1-D functions only)
    conjugate_domain: tuple[float, float] = (-np.inf, np.inf)

    def value(self, x) -> float:
        raise NotImplementedError

    def __call__(self, x) -> float:
        return self.value(x)

    def local_quadratic_solve(self, Q, b) -> np.ndarray:
        raise NotImplementedError

    def conjugate(self, y) -> float:
        raise NotImplementedError

    def subgradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def in_subdifferential(self, x, g, tol: float = 1e-9) -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class QuadraticFunction(NodeFunction):
    """``f(x) = 0.5 * ||x - target||^2``."""

    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=float)))

    @property
    def dim(self) -> int:
        return self.target.shape[0]

    def value(self, x) -> float:
        d = np.asarray(x, dtype=float) - self.target
        return 0.5 * float(d @ d)

    def local_quadratic_solve(self, Q, b) -> np.ndarray:
        Q = np.atleast_2d(Q)
        return np.linalg.solve(np.eye(self.dim) + Q, np.asarray(b, dtype=float) + self.target)

    def conjugate(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return 0.5 * float(y @ y) + float(self.target @ y)

    def subgradient(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) - self.target

    def in_subdifferential(self, x, g, tol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.subgradient(x) - g)) <= tol)


@dataclass(frozen=True)
class HingeFunction(NodeFunction):
    """Scalar ``f(x) = max(direction * x - 1, 0)`` with ``direction = +-1``."""

    direction: float = 1.0

    def __post_init__(self):
        if self.direction not in (1.0, -1.0):
            raise ValueError("direction must be +1 or -1")

    dim = 1

    @property
    def conjugate_domain(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.direction > 0 else (-1.0, 0.0)

    def value(self, x) -> float:
        return max(self.direction * float(np.asarray(x).ravel()[0]) - 1.0, 0.0)

    def local_quadratic_solve(self, Q, b) -> np.ndarray:
        q = float(np.asarray(Q).ravel()[0])
        b = float(np.asarray(b).ravel()[0])
        s = self.direction
        if q <= 0:
            raise ValueError("hinge local solve needs Q > 0")
        flat = b / q  # candidate on the flat piece s*x <= 1
        if s * flat <= 1.0:
            return np.array([flat])
        sloped = (b - s) / q
        if s * sloped >= 1.0:
            return np.array([sloped])
        return np.array([s])  # kink

    def conjugate(self, y) -> float:
        y = float(np.asarray(y).ravel()[0])
        lo, hi = self.conjugate_domain
        if lo <= y <= hi:
            return self.direction * y
        return np.inf

    def subgradient(self, x) -> np.ndarray:
        v = self.direction * float(np.asarray(x).ravel()[0])
        return np.array([self.direction if v > 1.0 else 0.0])

    def in_subdifferential(self, x, g, tol: float = 1e-9) -> bool:
        v = self.direction * float(np.asarray(x).ravel()[0])
        g = self.direction * float(np.asarray(g).ravel()[0])
        if v > 1.0 + tol:
            return abs(g - 1.0) <= tol
        if v < 1.0 - tol:
            return abs(g) <= tol
        return -tol <= g <= 1.0 + tol


@dataclass(frozen=True)
class ZeroFunction(NodeFunction):
    """``f = 0``; its conjugate is the indicator of ``{0}``."""

    dim: int = 1

    @property
    def conjugate_domain(self) -> tuple[float, float]:
        return (0.0, 0.0)

    def value(self, x) -> float:
        return 0.0

    def local_quadratic_solve(self, Q, b) -> np.ndarray:
        return np.linalg.solve(np.atleast_2d(Q), np.atleast_1d(np.asarray(b, dtype=float)))

    def conjugate(self, y) -> float:
        return 0.0 if not np.any(np.asarray(y)) else np.inf

    def subgradient(self, x) -> np.ndarray:
        return np.zeros(self.dim)

    def in_subdifferential(self, x, g, tol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(g)) <= tol)


# --------------------------------------------------------------------------
# problem container


@dataclass(frozen=True)
class GraphProblem:
    topology: GraphTopology
    constraints: tuple[EdgeConstraint, ...]
    functions: tuple[NodeFunction, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        object.__setattr__(self, "functions", tuple(self.functions))

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.topology.neighbors[i]

    def constraint(self, i: int, j: int) -> EdgeConstraint:
        return self.constraints[self.topology.find_edge(i, j)]

    @cached_property
    def _blocks(self) -> dict:
        out = {}
        for con in self.constraints:
            i, j = con.edge
            out[(i, j)] = (con.A_ij, con.A_ji, con.c)
            out[(j, i)] = (con.A_ji, con.A_ij, con.c)
        return out

    def blocks(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(A_ij, A_ji, c_ij)`` seen from node ``i`` looking at neighbour ``j``."""
        try:
            return self._blocks[(i, j)]
        except KeyError:
            raise KeyError(f"nodes {i} and {j} are not neighbours") from None

    def node_dim(self, i: int) -> int:
        return self.functions[i].dim

    def objective(self, x) -> float:
        return sum(f.value(xi) for f, xi in zip(self.functions, x))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...]

    def __bool__(self):
        return self.ok


def validate_problem(p: GraphProblem) -> ValidationReport:
    """Structural checks: indices, orientation, duplicates and block shapes."""
    issues: list[str] = []
    topo = p.topology
    m = topo.node_count
    seen = set()
    for i, j in topo.edges:
        if i == j:
            issues.append(f"self-loop at node {i}")
            continue
        if not (0 <= i < m and 0 <= j < m):
            issues.append(f"edge ({i}, {j}) references a node outside 0..{m - 1}")
            continue
        if i > j:
            issues.append(f"edge ({i}, {j}) is not stored with i < j")
        key = (min(i, j), max(i, j))
        if key in seen:
            issues.append(f"duplicate edge {key}")
        seen.add(key)

    if len(p.functions) != m:
        issues.append(f"expected {m} node functions, got {len(p.functions)}")
    if len(p.constraints) != len(topo.edges):
        issues.append(f"expected {len(topo.edges)} edge constraints, got {len(p.constraints)}")

    for e, con in zip(topo.edges, p.constraints):
        if con.edge != e:
            issues.append(f"constraint for {con.edge} listed at edge {e}")
            continue
        i, j = e
        if not (0 <= i < m and 0 <= j < m) or i == j or i >= len(p.functions) or j >= len(p.functions):
            continue
        n = con.dim
        ni, nj = p.functions[i].dim, p.functions[j].dim
        if con.A_ij.shape != (n, ni):
            issues.append(f"A_ij on edge {e} has shape {con.A_ij.shape}, expected {(n, ni)}")
        if con.A_ji.shape != (n, nj):
            issues.append(f"A_ji on edge {e} has shape {con.A_ji.shape}, expected {(n, nj)}")
    return ValidationReport(not issues, tuple(issues))


def build_averaging_problem(t: Sequence[float], topology: GraphTopology) -> GraphProblem:
    """Distributed averaging: ``f_i = 0.5 (x_i - t_i)^2`` and ``x_i - x_j = 0``."""
    t = np.asarray(t, dtype=float).ravel()
    if t.shape[0] != topology.node_count:
        raise ValueError("need one measurement per node")
    cons = tuple(
        EdgeConstraint((i, j), [[1.0]], [[-1.0]], [0.0]) for i, j in topology.edges
    )
    funcs = tuple(QuadraticFunction([ti]) for ti in t)
    return GraphProblem(topology, cons, funcs, meta={"kind": "averaging", "t": t})


def build_hinge_pair_problem() -> GraphProblem:
    """Two hinge losses ``max(x1 - 1, 0)`` and ``max(-x2 - 1, 0)`` with ``x1 = x2``.

    The minimizers form the segment ``x1 = x2`` in ``[-1, 1]``.
    """
    topo = GraphTopology(2, ((0, 1),))
    cons = (EdgeConstraint((0, 1), [[1.0]], [[-1.0]], [0.0]),)
    return GraphProblem(topo, cons, (HingeFunction(1.0), HingeFunction(-1.0)), meta={"kind": "hinge"})


def averaging_targets(p: GraphProblem) -> np.ndarray:
    if p.meta.get("kind") != "averaging":
        raise ValueError("not an averaging problem")
    return p.meta["t"]


def draw_measurements(m: int, seed: int) -> np.ndarray:
    """I.i.d. uniform [0, 1] node values."""
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=m)


# --------------------------------------------------------------------------
# JSON problem files (1-based)


def load_averaging_problem(path) -> GraphProblem:
    data = json.loads(Path(path).read_text())
    return averaging_problem_from_dict(data)


def averaging_problem_from_dict(data: dict) -> GraphProblem:
    try:
        nodes = sorted(data["nodes"], key=lambda n: int(n["id"]))
        ids = [int(n["id"]) for n in nodes]
        t = [float(n["t"]) for n in nodes]
        raw_edges = [(int(e["i"]), int(e["j"])) for e in data["edges"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed problem file: {exc}") from exc
    if ids != list(range(1, len(ids) + 1)):
        raise ValueError("node ids must be 1..m without gaps")
    topo = GraphTopology(len(ids), tuple((i - 1, j - 1) for i, j in raw_edges))
    problem = GraphProblem(
        topo,
        tuple(EdgeConstraint(e, [[1.0]], [[-1.0]], [0.0]) for e in topo.edges),
        tuple(QuadraticFunction([v]) for v in t),
        meta={"kind": "averaging", "t": np.asarray(t)},
    )
    report = validate_problem(problem)
    if not report:
        raise ValueError("; ".join(report.violations))
    return problem


def averaging_problem_to_dict(p: GraphProblem) -> dict:
    t = averaging_targets(p)
    return {
        "nodes": [{"id": i + 1, "t": float(v)} for i, v in enumerate(t)],
        "edges": [{"i": i + 1, "j": j + 1} for i, j in p.topology.edges],
    }
