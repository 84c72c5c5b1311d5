"""Lagrangians, optimality certificates and convergence-inequality checks.

All functions take plain iterate states.  The inequality checks report a
*slack*, ``rhs - lhs``, which is non-negative whenever the inequality holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .engine import IterateState, PenaltyConfig, check_condition
from .problem import GraphProblem, averaging_targets


def _sq(v) -> float:
    return float(v @ v)


def conjugate_argument(p: GraphProblem, lam, i: int) -> np.ndarray:
    """``sum_j A_ij' lam_i|j``."""
    out = np.zeros(p.node_dim(i))
    for j in p.neighbors(i):
        A_ij, _, _ = p.blocks(i, j)
        out += A_ij.T @ lam[(i, j)]
    return out


# --------------------------------------------------------------------------
# Lagrangians


def eval_primal_lagrangian(x, delta, p: GraphProblem) -> float:
    """``sum_i f_i(x_i) + sum_e delta_e'(c_e - A_ij x_i - A_ji x_j)``; ``delta`` is per edge."""
    val = p.objective(x)
    for con, d in zip(p.constraints, delta):
        i, j = con.edge
        val -= float(np.asarray(d) @ con.residual(x[i], x[j]))
    return val


def eval_pd_lagrangian(x, lam, p: GraphProblem) -> float:
    val = 0.0
    for i, f in enumerate(p.functions):
        val += f.value(x[i])
        for j in p.neighbors(i):
            A_ij, _, c = p.blocks(i, j)
            val -= float(lam[(j, i)] @ (A_ij @ x[i] - c))
        val -= f.conjugate(conjugate_argument(p, lam, i))
    return val


def eval_augmented_pd_lagrangian(x, lam, p: GraphProblem, cfg: PenaltyConfig) -> float:
    """Primal-dual Lagrangian plus the primal penalty minus the dual penalty."""
    val = eval_pd_lagrangian(x, lam, p)
    for e, con in enumerate(p.constraints):
        i, j = con.edge
        r = con.residual(x[i], x[j])
        dl = lam[(i, j)] - lam[(j, i)]
        val += 0.5 * float(r @ cfg.primal[e] @ r) - 0.5 * float(dl @ cfg.dual[e] @ dl)
    return val


def eval_p_function(x, lam, p: GraphProblem) -> float:
    val = 0.0
    for i, f in enumerate(p.functions):
        val += f.value(x[i]) + f.conjugate(conjugate_argument(p, lam, i))
        for j in p.neighbors(i):
            val -= 0.5 * float(p.blocks(i, j)[2] @ lam[(i, j)])
    return val


# --------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class SaddleCertificate:
    """A primal solution with one edge multiplier per constraint."""

    x_star: tuple[np.ndarray, ...]
    delta_star: tuple[np.ndarray, ...]
    topology_edges: tuple[tuple[int, int], ...] = field(repr=False)

    @cached_property
    def lam_star(self) -> dict[tuple[int, int], np.ndarray]:
        out = {}
        for (i, j), d in zip(self.topology_edges, self.delta_star):
            out[(i, j)] = d
            out[(j, i)] = d
        return out

    def as_state(self, iteration: int = 0) -> IterateState:
        return IterateState(self.x_star, dict(self.lam_star), iteration)

    def violations(self, p: GraphProblem, tol: float = 1e-9) -> list[str]:
        """Stationarity and feasibility checks; empty when the certificate is valid."""
        out = []
        lam = self.lam_star
        for con in p.constraints:
            i, j = con.edge
            r = con.residual(self.x_star[i], self.x_star[j])
            if np.max(np.abs(r)) > tol:
                out.append(f"edge {con.edge} infeasible by {np.max(np.abs(r)):.3g}")
        for i, f in enumerate(p.functions):
            g = np.zeros(p.node_dim(i))
            for j in p.neighbors(i):
                g += p.blocks(i, j)[0].T @ lam[(j, i)]
            if not f.in_subdifferential(self.x_star[i], g, tol):
                out.append(f"node {i} not stationary")
        return out


def build_certificate(p: GraphProblem, x_star, subgradients=None) -> SaddleCertificate:
    """Edge multipliers solving ``sum_j A_ij' delta_ij = g_i`` in least squares.

    ``g_i`` defaults to the oracle's subgradient at ``x_star[i]``.
    """
    x_star = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in x_star)
    if subgradients is None:
        subgradients = [f.subgradient(xi) for f, xi in zip(p.functions, x_star)]
    row_off = np.cumsum([0] + [p.node_dim(i) for i in range(p.node_count)])
    col_off = np.cumsum([0] + [con.dim for con in p.constraints])
    M = np.zeros((row_off[-1], col_off[-1]))
    for e, con in enumerate(p.constraints):
        i, j = con.edge
        cols = slice(col_off[e], col_off[e + 1])
        M[row_off[i]:row_off[i + 1], cols] = con.A_ij.T
        M[row_off[j]:row_off[j + 1], cols] = con.A_ji.T
    g = np.concatenate([np.atleast_1d(v) for v in subgradients]) if len(subgradients) else np.zeros(0)
    sol = np.linalg.lstsq(M, g, rcond=None)[0] if M.size else np.zeros(col_off[-1])
    delta = tuple(sol[col_off[e]:col_off[e + 1]].copy() for e in range(len(p.constraints)))
    return SaddleCertificate(x_star, delta, p.topology.edges)


def averaging_certificate(p: GraphProblem) -> SaddleCertificate:
    """Componentwise mean of the targets with matching edge multipliers."""
    t = averaging_targets(p)
    labels = p.topology.component_labels()
    x = np.empty_like(t)
    for lab in np.unique(labels):
        x[labels == lab] = t[labels == lab].mean()
    return build_certificate(p, [[v] for v in x])


def hinge_certificate(p: GraphProblem, level: float = 0.0) -> SaddleCertificate:
    if abs(level) > 1:
        raise ValueError("minimizers of the hinge pair lie in [-1, 1]")
    return SaddleCertificate((np.array([level]), np.array([level])), (np.zeros(1),), p.topology.edges)


# --------------------------------------------------------------------------
# inequality checks


def lemma4_lhs(state: IterateState, cert: SaddleCertificate, p: GraphProblem) -> float:
    """Non-negative gap between ``state`` and the saddle point ``cert``."""
    x, lam = state.x, state.lam
    lam_s = cert.lam_star
    val = 0.0
    for i in range(p.node_count):
        for j in p.neighbors(i):
            A_ij, A_ji, c = p.blocks(i, j)
            val += float((lam[(i, j)] - lam_s[(i, j)]) @ (A_ji @ x[j] - 0.5 * c))
            val -= float((x[i] - cert.x_star[i]) @ (A_ij.T @ lam[(j, i)]))
    return val + eval_p_function(x, lam, p)


def _require_condition(cfg):
    rep = check_condition(cfg)
    if not rep.holds:
        raise ValueError(f"penalties violate Pd >= Pp^-1 (min eigenvalue {rep.min_eigenvalue:.3g})")


def _anchor(p, cfg, cert, state, i, j):
    """``Pp^1/2 A_ji (x_j - x_j*) + Pp^-1/2 (lam*_j|i - lam_j|i)`` for directed edge i<-j."""
    e = p.topology.find_edge(i, j)
    _, A_ji, _ = p.blocks(i, j)
    lam_s = cert.lam_star[(j, i)]
    return (cfg.primal_sqrt[e] @ (A_ji @ (state.x[j] - cert.x_star[j]))
            + cfg.primal_isqrt[e] @ (lam_s - state.lam[(j, i)]))


def lemma5_gap(prev: IterateState, cur: IterateState, cert: SaddleCertificate,
               p: GraphProblem, cfg: PenaltyConfig) -> float:
    """Slack of the per-iteration bound for one synchronous transition."""
    _require_condition(cfg)
    lam_s = cert.lam_star
    rhs = 0.0
    for i in range(p.node_count):
        for j in p.neighbors(i):
            e = p.topology.find_edge(i, j)
            A_ij, A_ji, c = p.blocks(i, j)
            Ps, Pis, Ds = cfg.primal_sqrt[e], cfg.primal_isqrt[e], cfg.excess_sqrt[e]
            mixed = (Ps @ (A_ij @ cur.x[i] + A_ji @ prev.x[j] - c)
                     + Pis @ (cur.lam[(i, j)] - prev.lam[(j, i)]))
            rhs += 0.5 * (
                _sq(_anchor(p, cfg, cert, prev, i, j))
                - _sq(_anchor(p, cfg, cert, cur, i, j))
                - _sq(mixed)
                + _sq(Ds @ (lam_s[(j, i)] - prev.lam[(j, i)]))
                - _sq(Ds @ (lam_s[(j, i)] - cur.lam[(j, i)]))
                - _sq(Ds @ (cur.lam[(i, j)] - prev.lam[(j, i)]))
            )
    return rhs - lemma4_lhs(cur, cert, p)


def lemma7_gap(seg_start: IterateState, seg_end: IterateState, cert: SaddleCertificate,
               p: GraphProblem, cfg: PenaltyConfig) -> float:
    """Slack of the per-segment bound for the cyclic schedule.

    ``seg_start`` and ``seg_end`` are the states ``m`` iterations apart at
    segment boundaries (iteration counts divisible by ``m``).
    """
    _require_condition(cfg)
    lam_s = cert.lam_star
    a, b = seg_start, seg_end
    rhs = 0.0
    for con_e, con in enumerate(p.constraints):
        u, v = con.edge
        A_uv, A_vu, c = con.A_ij, con.A_ji, con.c
        Ps, Pis, Ds = cfg.primal_sqrt[con_e], cfg.primal_isqrt[con_e], cfg.excess_sqrt[con_e]
        end_mixed = (Ps @ (A_uv @ b.x[u] + A_vu @ b.x[v] - c)
                     - Pis @ (b.lam[(u, v)] - b.lam[(v, u)]))
        cross_mixed = (Ps @ (A_uv @ b.x[u] + A_vu @ a.x[v] - c)
                       + Pis @ (b.lam[(u, v)] - a.lam[(v, u)]))
        rhs += 0.5 * (
            _sq(_anchor(p, cfg, cert, a, u, v))
            - _sq(_anchor(p, cfg, cert, b, u, v))
            - _sq(end_mixed)
            - _sq(cross_mixed)
            + _sq(Ds @ (lam_s[(u, v)] - a.lam[(v, u)]))
            - _sq(Ds @ (lam_s[(u, v)] - b.lam[(v, u)]))
            - _sq(Ds @ (b.lam[(u, v)] - a.lam[(v, u)]))
            - _sq(Ds @ (b.lam[(u, v)] - b.lam[(v, u)]))
        )
    return rhs - lemma4_lhs(b, cert, p)


def anchor_norms(state: IterateState, cert: SaddleCertificate, p: GraphProblem,
                 cfg: PenaltyConfig) -> dict[tuple[int, int], float]:
    """Squared anchor norm for every directed edge ``(i, j)`` (the ``x_j`` side)."""
    return {(i, j): _sq(_anchor(p, cfg, cert, state, i, j)) for i, j in p.topology.directed_edges}


def lemma6_bound_track(states: Sequence[IterateState], cert, p, cfg) -> np.ndarray:
    """Largest squared anchor norm over edges, per state."""
    return np.array([max(anchor_norms(s, cert, p, cfg).values(), default=0.0) for s in states])


def telescoped_constant(state0: IterateState, cert, p, cfg, segments: bool = False) -> float:
    """Right-hand side of the summed per-step bound, evaluated at the start.

    With ``segments=True`` the sum runs over undirected edges ``u < v`` as in
    the cyclic per-segment bound; otherwise over all directed edges.
    """
    _require_condition(cfg)
    lam_s = cert.lam_star
    pairs = p.topology.edges if segments else p.topology.directed_edges
    total = 0.0
    for i, j in pairs:
        e = p.topology.find_edge(i, j)
        total += 0.5 * (_sq(_anchor(p, cfg, cert, state0, i, j))
                        + _sq(cfg.excess_sqrt[e] @ (lam_s[(j, i)] - state0.lam[(j, i)])))
    return total


def average_states(states: Sequence[IterateState]) -> IterateState:
    k = len(states)
    x = tuple(sum(s.x[i] for s in states) / k for i in range(len(states[0].x)))
    lam = {key: sum(s.lam[key] for s in states) / k for key in states[0].lam}
    return IterateState(x, lam, states[-1].iteration)


def theorem2_feasibility_residual(avg: IterateState, p: GraphProblem,
                                  cfg: PenaltyConfig) -> dict[tuple[int, int], float]:
    """Norm of the combined primal/dual mismatch at an averaged state, per directed edge."""
    out = {}
    for i, j in p.topology.directed_edges:
        e = p.topology.find_edge(i, j)
        A_ij, A_ji, c = p.blocks(i, j)
        v = (cfg.primal_sqrt[e] @ (A_ij @ avg.x[i] + A_ji @ avg.x[j] - c)
             + cfg.primal_isqrt[e] @ (avg.lam[(i, j)] - avg.lam[(j, i)]))
        out[(i, j)] = float(np.sqrt(_sq(v)))
    return out


class RateLedger:
    """Running average of iterates with the ergodic-rate check.

    ``push`` the states after iterations ``1, 2, ...`` (or segment ends);
    ``ratio()`` is ``K * lhs(average) / constant`` and should stay at or
    below one.
    """

    def __init__(self, state0, cert, p, cfg, segments=False):
        self.cert, self.p, self.cfg = cert, p, cfg
        self.constant = telescoped_constant(state0, cert, p, cfg, segments)
        self.count = 0
        self._sx = [np.zeros_like(v) for v in state0.x]
        self._sl = {k: np.zeros_like(v) for k, v in state0.lam.items()}

    def push(self, state: IterateState) -> None:
        self.count += 1
        for acc, v in zip(self._sx, state.x):
            acc += v
        for k, v in state.lam.items():
            self._sl[k] += v

    def average(self) -> IterateState:
        k = self.count
        return IterateState(tuple(v / k for v in self._sx), {q: v / k for q, v in self._sl.items()}, k)

    def scaled_gap(self) -> float:
        return self.count * lemma4_lhs(self.average(), self.cert, self.p)

    def holds(self, tol: float = 1e-10) -> bool:
        return self.scaled_gap() <= self.constant + tol


@dataclass(frozen=True)
class GapReport:
    """Summary of a slack series."""

    slacks: np.ndarray
    tol: float

    @property
    def min_slack(self) -> float:
        return float(np.min(self.slacks)) if self.slacks.size else np.inf

    @property
    def ok(self) -> bool:
        return self.min_slack >= -self.tol

    @property
    def worst_index(self) -> int:
        return int(np.argmin(self.slacks))


def sync_gap_report(states: Sequence[IterateState], cert, p, cfg, tol=1e-8) -> GapReport:
    s = np.array([lemma5_gap(a, b, cert, p, cfg) for a, b in zip(states[:-1], states[1:])])
    return GapReport(s, tol)


def cyclic_gap_report(states: Sequence[IterateState], cert, p, cfg, tol=1e-8) -> GapReport:
    m = p.node_count
    ends = [s for s in states if s.iteration % m == 0]
    s = np.array([lemma7_gap(a, b, cert, p, cfg) for a, b in zip(ends[:-1], ends[1:])])
    return GapReport(s, tol)


# --------------------------------------------------------------------------
# simple metrics


def mse(x, t_ave: float) -> float:
    x = np.concatenate([np.atleast_1d(v) for v in x]) if not isinstance(x, np.ndarray) else x
    return float(np.mean((x - t_ave) ** 2))


def primal_residual(state: IterateState, p: GraphProblem) -> float:
    """Largest constraint violation over edges."""
    return max((float(np.max(np.abs(c.residual(state.x[c.edge[0]], state.x[c.edge[1]]))))
                for c in p.constraints), default=0.0)


def dual_residual(state: IterateState, p: GraphProblem) -> float:
    """Largest disagreement ``|lam_i|j - lam_j|i|`` over edges."""
    return max((float(np.max(np.abs(state.lam[(i, j)] - state.lam[(j, i)])))
                for i, j in p.topology.edges), default=0.0)
