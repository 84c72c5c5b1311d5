"""Primal-dual method of multipliers on a graph.

Each node ``i`` owns its primal block ``x_i`` and one dual block per
neighbour, ``lam[(i, j)]``, which it sends to ``j``.  One activation of node
``i`` performs

1. ``x_i <- argmin f_i(x) + 0.5 x'Qx - b'x`` with the primal penalty,
2. the same local solve with the inverse dual penalty, giving ``w_i``,
3. ``lam[(i, j)] <- lam[(j, i)] + Pd^{-1} (c_ij - A_ji x_j - A_ij w_i)``.

Step 3 can alternatively use ``x_i`` directly (valid only when the dual
penalty is exactly the inverse of the primal penalty) or solve a small
problem in the convex conjugate of ``f_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .problem import GraphProblem, GraphTopology, QuadraticFunction

LAMBDA_RULES = ("w", "simplified", "conjugate")


# --------------------------------------------------------------------------
# penalties


def _spd_split(M: np.ndarray, name: str, allow_semidefinite: bool = False):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if not allow_semidefinite and vals.min() <= 0:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {vals.min():.3g})")
    return vals, vecs


def _fn(vals, vecs, fn):
    return (vecs * fn(vals)) @ vecs.T


@dataclass(frozen=True)
class PenaltyConfig:
    """Per-edge symmetric positive definite penalty matrices.

    ``primal[e]`` weights the constraint residual of edge ``e`` and ``dual[e]``
    weights the disagreement between the two dual blocks on that edge.
    Square roots and inverses are precomputed on construction.
    """

    primal: tuple[np.ndarray, ...]
    dual: tuple[np.ndarray, ...]
    primal_inv: tuple[np.ndarray, ...] = field(init=False, repr=False)
    dual_inv: tuple[np.ndarray, ...] = field(init=False, repr=False)
    primal_sqrt: tuple[np.ndarray, ...] = field(init=False, repr=False)
    primal_isqrt: tuple[np.ndarray, ...] = field(init=False, repr=False)
    excess: tuple[np.ndarray, ...] = field(init=False, repr=False)
    excess_sqrt: tuple[np.ndarray, ...] = field(init=False, repr=False)
    excess_min_eig: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.primal) != len(self.dual):
            raise ValueError("need one primal and one dual penalty per edge")
        derived = {k: [] for k in ("primal_inv", "dual_inv", "primal_sqrt", "primal_isqrt",
                                   "excess", "excess_sqrt", "excess_min_eig")}
        primal, dual = [], []
        for e, (Pp, Pd) in enumerate(zip(self.primal, self.dual)):
            Pp = np.atleast_2d(np.asarray(Pp, dtype=float))
            Pd = np.atleast_2d(np.asarray(Pd, dtype=float))
            if Pp.shape != Pd.shape:
                raise ValueError(f"penalty shapes differ on edge {e}")
            pv, pV = _spd_split(Pp, f"primal penalty on edge {e}")
            dv, dV = _spd_split(Pd, f"dual penalty on edge {e}")
            primal.append(Pp)
            dual.append(Pd)
            p_inv = _fn(pv, pV, lambda v: 1.0 / v)
            derived["primal_inv"].append(p_inv)
            derived["dual_inv"].append(_fn(dv, dV, lambda v: 1.0 / v))
            derived["primal_sqrt"].append(_fn(pv, pV, np.sqrt))
            derived["primal_isqrt"].append(_fn(pv, pV, lambda v: 1.0 / np.sqrt(v)))
            ex = Pd - p_inv
            ex = 0.5 * (ex + ex.T)
            ev, eV = np.linalg.eigh(ex)
            derived["excess"].append(ex)
            derived["excess_min_eig"].append(float(ev.min()))
            derived["excess_sqrt"].append(_fn(np.clip(ev, 0.0, None), eV, np.sqrt))
        object.__setattr__(self, "primal", tuple(primal))
        object.__setattr__(self, "dual", tuple(dual))
        for k, v in derived.items():
            object.__setattr__(self, k, tuple(v))

    @property
    def edge_count(self) -> int:
        return len(self.primal)


def scalar_penalty(gamma_p: float, gamma_d: float, p: GraphProblem) -> PenaltyConfig:
    """``gamma_p * I`` and ``gamma_d * I`` on every edge."""
    if not (gamma_p > 0 and gamma_d > 0):
        raise ValueError("penalty parameters must be positive")
    eyes = [np.eye(con.dim) for con in p.constraints]
    return PenaltyConfig(tuple(gamma_p * I for I in eyes), tuple(gamma_d * I for I in eyes))


@dataclass(frozen=True)
class ConditionReport:
    holds: bool
    min_eigenvalue: float
    # dual penalty equals the inverse primal penalty on every edge
    exact_inverse: bool


def check_condition(cfg: PenaltyConfig, tol: float = 1e-10) -> ConditionReport:
    """Is ``Pd - Pp^{-1}`` positive semidefinite on every edge?"""
    min_eig = min(cfg.excess_min_eig, default=0.0)
    exact = all(
        np.max(np.abs(ex)) <= 1e-12 * max(1.0, np.max(np.abs(Pd)))
        for ex, Pd in zip(cfg.excess, cfg.dual)
    )
    return ConditionReport(min_eig >= -tol, min_eig, exact)


# --------------------------------------------------------------------------
# iterate state


def _key_str(i: int, j: int) -> str:
    return f"{i + 1}|{j + 1}"


@dataclass(frozen=True)
class IterateState:
    """Primal blocks ``x[i]`` and directed dual blocks ``lam[(i, j)]``.

    Treated as a value: :func:`step` never mutates its input.
    """

    x: tuple[np.ndarray, ...]
    lam: Mapping[tuple[int, int], np.ndarray]
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in self.x))
        object.__setattr__(
            self, "lam", {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in self.lam.items()}
        )

    def to_json(self) -> dict:
        return {
            "x": [v.tolist() for v in self.x],
            "lambda": {_key_str(i, j): v.tolist() for (i, j), v in sorted(self.lam.items())},
            "iteration": self.iteration,
        }

    @classmethod
    def from_json(cls, data: dict) -> "IterateState":
        lam = {}
        for key, v in data["lambda"].items():
            a, b = key.split("|")
            lam[(int(a) - 1, int(b) - 1)] = v
        return cls(tuple(data["x"]), lam, int(data.get("iteration", 0)))

    def max_difference(self, other: "IterateState") -> float:
        dx = max((np.max(np.abs(a - b)) for a, b in zip(self.x, other.x)), default=0.0)
        dl = max((np.max(np.abs(v - other.lam[k])) for k, v in self.lam.items()), default=0.0)
        return float(max(dx, dl))

    def stacked_x(self) -> np.ndarray:
        return np.concatenate(self.x) if self.x else np.zeros(0)


def initial_state(p: GraphProblem, x0: Sequence | None = None, lam0: Mapping | None = None) -> IterateState:
    """Zero duals and the given (default zero) primal blocks."""
    m = p.node_count
    if x0 is None:
        x = tuple(np.zeros(p.node_dim(i)) for i in range(m))
    else:
        x = tuple(np.atleast_1d(np.asarray(v, dtype=float)).copy() for v in x0)
    lam = {}
    for i, j in p.topology.directed_edges:
        n = p.constraint(i, j).dim
        lam[(i, j)] = np.zeros(n) if lam0 is None else np.asarray(lam0[(i, j)], dtype=float).copy()
    return IterateState(x, lam, 0)


# --------------------------------------------------------------------------
# schedules


class ScheduleKind(str, Enum):
    SYNCHRONOUS = "synchronous"
    CYCLIC = "cyclic"
    RANDOM_NODE = "random-node"
    RANDOM_EDGE = "random-edge"


@dataclass(frozen=True)
class Schedule:
    """Which nodes update at each iteration.

    ``CYCLIC`` activates node ``k mod m``; ``RANDOM_EDGE`` activates both
    endpoints of a uniformly drawn edge, each using the other's
    pre-iteration values.
    """

    kind: ScheduleKind = ScheduleKind.SYNCHRONOUS
    seed: int = 0

    def activator(self, topology: GraphTopology) -> "Activator":
        return Activator(ScheduleKind(self.kind), topology, np.random.default_rng(self.seed))


class IndexStream:
    """Uniform integers in ``[0, high)`` drawn from ``rng`` in blocks."""

    def __init__(self, rng: np.random.Generator, high: int, block: int = 4096):
        self.rng, self.high, self.block = rng, high, block
        self._buf: list[int] = []
        self._pos = 0

    def next(self) -> int:
        if self._pos == len(self._buf):
            self._buf = self.rng.integers(0, self.high, size=self.block).tolist()
            self._pos = 0
        self._pos += 1
        return self._buf[self._pos - 1]


class Activator:
    def __init__(self, kind: ScheduleKind, topology: GraphTopology, rng: np.random.Generator):
        self.kind = kind
        self.topology = topology
        self.rng = rng
        high = topology.node_count if kind is ScheduleKind.RANDOM_NODE else len(topology.edges)
        self._draws = IndexStream(rng, high) if high > 0 else None
        self._last: tuple[int, tuple[int, ...]] | None = None

    def __call__(self, k: int) -> tuple[int, ...]:
        # random kinds consume a draw per new k; asking again for k is free
        if self._last is not None and self._last[0] == k:
            return self._last[1]
        out = self._select(k)
        self._last = (k, out)
        return out

    def _select(self, k: int) -> tuple[int, ...]:
        m = self.topology.node_count
        if self.kind is ScheduleKind.SYNCHRONOUS:
            return tuple(range(m))
        if self.kind is ScheduleKind.CYCLIC:
            return (k % m,)
        if self._draws is None:
            return ()
        if self.kind is ScheduleKind.RANDOM_NODE:
            return (self._draws.next(),)
        return self.topology.edges[self._draws.next()]


# --------------------------------------------------------------------------
# local updates


def _neighborhood(i, state, p, view):
    """Yield ``(j, edge, A_ij, A_ji, c, x_j, lam_ji)`` as node ``i`` sees them."""
    for j in p.neighbors(i):
        e = p.topology.find_edge(i, j)
        A_ij, A_ji, c = p.blocks(i, j)
        if view is None:
            xj, lji = state.x[j], state.lam[(j, i)]
        else:
            xj, lji = view.x[(i, j)], view.lam[(i, j)]
        yield j, e, A_ij, A_ji, c, xj, lji


def _local_solve(i, state, p, weights, view):
    n = p.node_dim(i)
    Q = np.zeros((n, n))
    b = np.zeros(n)
    for _, e, A_ij, A_ji, c, xj, lji in _neighborhood(i, state, p, view):
        W = weights[e]
        Q += A_ij.T @ W @ A_ij
        b += A_ij.T @ (W @ (c - A_ji @ xj) + lji)
    return p.functions[i].local_quadratic_solve(Q, b)


def x_update(i: int, state: IterateState, p: GraphProblem, cfg: PenaltyConfig, view=None) -> np.ndarray:
    """New primal block of node ``i``."""
    return _local_solve(i, state, p, cfg.primal, view)


def w_update(i: int, state: IterateState, p: GraphProblem, cfg: PenaltyConfig, view=None) -> np.ndarray:
    """Auxiliary block ``w_i``: the primal solve with ``Pd^{-1}`` as penalty."""
    return _local_solve(i, state, p, cfg.dual_inv, view)


def lambda_update_via_w(i, w, state, p, cfg, view=None) -> dict[int, np.ndarray]:
    out = {}
    for j, e, A_ij, A_ji, c, xj, lji in _neighborhood(i, state, p, view):
        out[j] = lji + cfg.dual_inv[e] @ (c - A_ji @ xj - A_ij @ w)
    return out


def lambda_update_simplified(i, x_new, state, p, cfg, view=None) -> dict[int, np.ndarray]:
    """Dual update from the fresh primal block; needs ``Pd = Pp^{-1}`` exactly."""
    if not check_condition(cfg).exact_inverse:
        raise ValueError("simplified dual update requires the dual penalty to equal the inverse primal penalty")
    out = {}
    for j, e, A_ij, A_ji, c, xj, lji in _neighborhood(i, state, p, view):
        out[j] = lji + cfg.primal[e] @ (c - A_ji @ xj - A_ij @ x_new)
    return out


def lambda_update_via_conjugate(i, state, p, cfg, view=None) -> dict[int, np.ndarray]:
    """Dual update written as a minimization involving ``f_i*``.

    Quadratic local functions are solved in closed form.  Other 1-D functions
    reduce to a scalar problem over ``s = sum_j A_ij' lam_ij`` that is solved
    numerically on the domain of the conjugate.
    """
    f = p.functions[i]
    nb = list(_neighborhood(i, state, p, view))
    if not nb:
        return {}
    if isinstance(f, QuadraticFunction):
        A = np.vstack([A_ij for _, _, A_ij, *_ in nb])
        sizes = [A_ij.shape[0] for _, _, A_ij, *_ in nb]
        n = sum(sizes)
        H = A @ A.T
        rhs = -A @ f.target
        off = 0
        for (_, e, _, A_ji, c, xj, lji), sz in zip(nb, sizes):
            sl = slice(off, off + sz)
            H[sl, sl] += cfg.dual[e]
            rhs[sl] += cfg.dual[e] @ lji - (A_ji @ xj - c)
            off += sz
        sol = np.linalg.solve(H, rhs) if n else np.zeros(0)
        out, off = {}, 0
        for (j, *_), sz in zip(nb, sizes):
            out[j] = sol[off:off + sz]
            off += sz
        return out

    if f.dim != 1:
        raise NotImplementedError("conjugate dual update is only available for 1-D or quadratic functions")
    base, direction = {}, {}
    s0 = alpha = 0.0
    for j, e, A_ij, A_ji, c, xj, lji in nb:
        a = A_ij[:, 0]
        base[j] = lji - cfg.dual_inv[e] @ (A_ji @ xj - c)
        direction[j] = cfg.dual_inv[e] @ a
        s0 += float(a @ base[j])
        alpha += float(a @ direction[j])
    if alpha <= 0:
        return base
    lo, hi = f.conjugate_domain

    def objective(s):
        return (s - s0) ** 2 / (2 * alpha) + f.conjugate([s])

    if lo == hi:
        s = lo
    elif np.isfinite(lo) and np.isfinite(hi):
        s = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13}).x
    else:
        s = minimize_scalar(objective, bracket=(s0 - 1.0, s0), method="brent", tol=1e-13).x
    nu = (s - s0) / alpha
    return {j: base[j] + nu * direction[j] for j in base}


# --------------------------------------------------------------------------
# one iteration


@dataclass
class NodeUpdate:
    node: int
    x: np.ndarray
    lam: dict[int, np.ndarray]
    w: np.ndarray | None = None


def node_update(i, state, p, cfg, view=None, rule="w", need_w=False) -> NodeUpdate:
    x_new = x_update(i, state, p, cfg, view)
    w = None
    if rule == "w":
        w = w_update(i, state, p, cfg, view)
        lam = lambda_update_via_w(i, w, state, p, cfg, view)
    elif rule == "simplified":
        lam = lambda_update_simplified(i, x_new, state, p, cfg, view)
        w = x_new
    elif rule == "conjugate":
        lam = lambda_update_via_conjugate(i, state, p, cfg, view)
        if need_w:
            w = w_update(i, state, p, cfg, view)
    else:
        raise ValueError(f"unknown dual update rule {rule!r}; expected one of {LAMBDA_RULES}")
    return NodeUpdate(i, x_new, lam, w)


def step(
    state: IterateState,
    p: GraphProblem,
    cfg: PenaltyConfig,
    activator: Callable[[int], Sequence[int]],
    channel=None,
    rule: str = "w",
) -> IterateState:
    """Advance one iteration.

    All nodes active at this iteration compute from the pre-iteration values
    (their own and, through ``channel``, their copies of the neighbours').
    Without a channel every node reads its neighbours' current values, which
    is the lossless point-to-point case.
    """
    active = activator(state.iteration)
    view = None if channel is None else channel.views
    need_w = channel is not None and getattr(channel, "needs_w", False)
    updates = [node_update(i, state, p, cfg, view, rule, need_w) for i in active]

    x = list(state.x)
    lam = dict(state.lam)
    for u in updates:
        x[u.node] = u.x
        for j, v in u.lam.items():
            lam[(u.node, j)] = v
    if channel is not None:
        for u in updates:
            channel.transmit(state.iteration, u, state, p, cfg)
    return IterateState(tuple(x), lam, state.iteration + 1)


def iterate(
    state: IterateState,
    p: GraphProblem,
    cfg: PenaltyConfig,
    schedule: Schedule,
    iterations: int,
    channel=None,
    rule: str = "w",
) -> Iterator[IterateState]:
    """Yield the states after each of ``iterations`` steps."""
    act = schedule.activator(p.topology)
    for _ in range(iterations):
        state = step(state, p, cfg, act, channel, rule)
        yield state


def run(state, p, cfg, schedule, iterations, channel=None, rule="w") -> list[IterateState]:
    """Trajectory including the initial state."""
    return [state, *iterate(state, p, cfg, schedule, iterations, channel, rule)]
