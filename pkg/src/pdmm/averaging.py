"""Distributed averaging: closed-form updates and fast simulators.

For ``f_i(x) = 0.5 (x - t_i)^2`` with scalar constraints ``x_i - x_j = 0``
(``A_ij = +1`` when ``i < j``, ``-1`` otherwise) the local solves reduce to
scalar formulas.  This module implements those and three baselines
(randomized gossip, broadcast gossip, edge-based consensus ADMM) on flat
arrays indexed by directed edge, so that many seeds can be simulated
quickly.  The general engine reproduces the same trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import IterateState, Schedule, ScheduleKind
from .netsim import UniformStream
from .problem import GraphTopology

PDMM_METHODS = {
    "pdmm-sync": ScheduleKind.SYNCHRONOUS,
    "pdmm-async-cyclic": ScheduleKind.CYCLIC,
    "pdmm-one-node": ScheduleKind.RANDOM_NODE,
    "pdmm-two-node": ScheduleKind.RANDOM_EDGE,
}
BASELINE_METHODS = ("admm-sync", "admm-async", "gossip", "broadcast")
METHODS = tuple(PDMM_METHODS) + BASELINE_METHODS


class DirectedIndex:
    """Flat indexing of directed edges ``e = (src, dst)``, sorted by ``(src, dst)``."""

    def __init__(self, topology: GraphTopology):
        self.topology = topology
        self.m = topology.node_count
        pairs = topology.directed_edges
        self.src = np.array([i for i, _ in pairs], dtype=int)
        self.dst = np.array([j for _, j in pairs], dtype=int)
        pos = {pr: e for e, pr in enumerate(pairs)}
        self.rev = np.array([pos[(j, i)] for i, j in pairs], dtype=int)
        self.sign = np.where(self.src < self.dst, 1.0, -1.0)
        self.undirected = np.array([topology.find_edge(i, j) for i, j in pairs], dtype=int)
        self.deg = np.bincount(self.src, minlength=self.m).astype(float)
        ptr = np.concatenate([[0], np.cumsum(self.deg.astype(int))])
        self.out = [list(range(ptr[i], ptr[i + 1])) for i in range(self.m)]
        # python copies for scalar loops
        self.dst_l = self.dst.tolist()
        self.rev_l = self.rev.tolist()
        self.sign_l = self.sign.tolist()
        self.und_l = self.undirected.tolist()
        self.deg_l = self.deg.tolist()

    @property
    def count(self) -> int:
        return self.src.size

    def node_sum(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.src, weights=values, minlength=self.m)


# --------------------------------------------------------------------------
# closed-form PDMM recursions


@dataclass
class AveragingState:
    """Scalar PDMM state for averaging.

    ``lam[e]`` is the dual owned by ``src[e]`` and addressed to ``dst[e]``.
    ``x_copy[e]`` / ``lam_copy[e]`` are node ``src[e]``'s copies of
    ``x[dst[e]]`` and ``lam[rev[e]]``.
    """

    x: np.ndarray
    lam: np.ndarray
    x_copy: np.ndarray
    lam_copy: np.ndarray

    @classmethod
    def start(cls, index: DirectedIndex, x0, lam0=None) -> "AveragingState":
        x = np.array(x0, dtype=float)
        lam = np.zeros(index.count) if lam0 is None else np.array(lam0, dtype=float)
        return cls(x, lam, x[index.dst].copy(), lam[index.rev].copy())

    def copy(self) -> "AveragingState":
        return AveragingState(self.x.copy(), self.lam.copy(), self.x_copy.copy(), self.lam_copy.copy())


def pdmm_avg_x(i: int, state: AveragingState, t, gamma_p: float, index: DirectedIndex) -> float:
    s = t[i]
    for e in index.out[i]:
        s += gamma_p * state.x_copy[e] + index.sign_l[e] * state.lam_copy[e]
    return s / (1.0 + index.deg_l[i] * gamma_p)


def pdmm_avg_w(i: int, state: AveragingState, t, gamma_d: float, index: DirectedIndex) -> float:
    s = 0.0
    for e in index.out[i]:
        s += state.x_copy[e] + gamma_d * index.sign_l[e] * state.lam_copy[e]
    return (s + gamma_d * t[i]) / (index.deg_l[i] + gamma_d)


def pdmm_avg_lambda(i: int, w: float, state: AveragingState, gamma_d: float,
                    index: DirectedIndex) -> dict[int, float]:
    """New duals of node ``i`` keyed by directed-edge index."""
    return {
        e: state.lam_copy[e] - index.sign_l[e] * (w - state.x_copy[e]) / gamma_d
        for e in index.out[i]
    }


def pdmm_avg_sync_round(state: AveragingState, t, gamma_p, gamma_d, index: DirectedIndex):
    """All nodes at once; returns ``(x_new, w, lam_new)`` without transmitting."""
    xc, lc, sg = state.x_copy, state.lam_copy, index.sign
    x_new = (t + index.node_sum(gamma_p * xc + sg * lc)) / (1.0 + index.deg * gamma_p)
    w = (index.node_sum(xc + gamma_d * sg * lc) + gamma_d * t) / (index.deg + gamma_d)
    lam_new = lc - sg * (w[index.src] - xc) / gamma_d
    return x_new, w, lam_new


# --------------------------------------------------------------------------
# baselines


def gossip_step(x: np.ndarray, edge: tuple[int, int]) -> np.ndarray:
    """Both endpoints move to their midpoint."""
    i, j = edge
    out = x.copy()
    out[i] = out[j] = 0.5 * (x[i] + x[j])
    return out


def broadcast_step(x: np.ndarray, i: int, gamma_b: float, topology: GraphTopology) -> np.ndarray:
    """Neighbours of ``i`` mix ``x_i`` in with weight ``1 - gamma_b``; ``x_i`` is unchanged."""
    if not 0.0 < gamma_b < 1.0:
        raise ValueError("broadcast mixing weight must lie strictly between 0 and 1")
    out = x.copy()
    for j in topology.neighbors[i]:
        out[j] = gamma_b * x[j] + (1.0 - gamma_b) * x[i]
    return out


@dataclass
class ADMMState:
    """Edge-split consensus ADMM: ``z[edge]`` and scaled duals ``u[directed edge]``."""

    x: np.ndarray
    z: np.ndarray
    u: np.ndarray

    @classmethod
    def start(cls, index: DirectedIndex, x0) -> "ADMMState":
        x = np.array(x0, dtype=float)
        edges = index.topology.edges
        z = np.array([0.5 * (x[i] + x[j]) for i, j in edges])
        return cls(x, z, np.zeros(index.count))

    def copy(self) -> "ADMMState":
        return ADMMState(self.x.copy(), self.z.copy(), self.u.copy())


def admm_avg_step(state: ADMMState, rho: float, t, index: DirectedIndex,
                  edge: int | None = None) -> ADMMState:
    """One ADMM pass: all edges, or only undirected edge ``edge`` and its endpoints."""
    if not rho > 0:
        raise ValueError("ADMM penalty must be positive")
    s = state.copy()
    if edge is None:
        s.x = (t + rho * index.node_sum(s.z[index.undirected] - s.u)) / (1.0 + rho * index.deg)
        s.z = 0.5 * np.bincount(index.undirected, weights=s.x[index.src] + s.u,
                                minlength=s.z.size)
        s.u = s.u + s.x[index.src] - s.z[index.undirected]
        return s
    a, b = index.topology.edges[edge]
    for i in (a, b):
        acc = 0.0
        for e in index.out[i]:
            acc += state.z[index.und_l[e]] - state.u[e]
        s.x[i] = (t[i] + rho * acc) / (1.0 + rho * index.deg_l[i])
    ea = next(e for e in index.out[a] if index.dst_l[e] == b)
    eb = index.rev_l[ea]
    s.z[edge] = 0.5 * (s.x[a] + s.u[ea] + s.x[b] + s.u[eb])
    s.u[ea] += s.x[a] - s.z[edge]
    s.u[eb] += s.x[b] - s.z[edge]
    return s


# --------------------------------------------------------------------------
# simulators


class _Simulator:
    """Common bookkeeping: iteration count, transmissions, running squared error."""

    x: np.ndarray
    transmissions: int = 0

    def __init__(self, index: DirectedIndex, t, t_ave: float | None = None):
        self.index = index
        self.t = np.asarray(t, dtype=float)
        self.t_ave = float(self.t.mean()) if t_ave is None else t_ave
        self.iteration = 0
        self.transmissions = 0

    def _init_error(self):
        self._sse = float(np.sum((self.x - self.t_ave) ** 2))

    def _moved(self, i: int, old: float) -> None:
        a = self.t_ave
        self._sse += (self.x[i] - a) ** 2 - (old - a) ** 2

    def mse(self) -> float:
        return max(self._sse, 0.0) / self.index.m

    def exact_mse(self) -> float:
        self._init_error()
        return self.mse()

    def primal_residual(self) -> float:
        ix = self.index
        return float(np.max(np.abs(self.x[ix.src] - self.x[ix.dst]), initial=0.0))

    def dual_residual(self) -> float | None:
        return None

    def error_floor(self) -> float:
        """Lower bound on the mean squared error at every later iteration."""
        return 0.0

    def advance(self) -> None:
        raise NotImplementedError


class PDMMAveraging(_Simulator):
    """PDMM for averaging under a schedule and lossy point-to-point links."""

    def __init__(self, index, t, gamma_p, gamma_d, schedule: Schedule, x0=None,
                 loss: float = 0.0, loss_seed: int = 0, t_ave=None, broadcast: bool = False):
        super().__init__(index, t, t_ave)
        if not (gamma_p > 0 and gamma_d > 0):
            raise ValueError("penalty parameters must be positive")
        if not 0.0 <= loss <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        if broadcast and loss:
            raise ValueError("broadcast transport cannot model loss; use p2p")
        # lossless broadcast gives the same iterates; only the radio count differs
        self.broadcast = broadcast
        self.gamma_p, self.gamma_d = float(gamma_p), float(gamma_d)
        self.kind = ScheduleKind(schedule.kind)
        self.activate = schedule.activator(index.topology)
        self.loss = float(loss)
        self.draws = UniformStream(loss_seed)
        self.state = AveragingState.start(index, self.t if x0 is None else x0)
        self._init_error()

    @property
    def x(self):
        return self.state.x

    def iterate_state(self):
        """The current iterate in the general engine's representation."""
        ix = self.index
        lam = {(i, j): np.array([v]) for i, j, v in zip(ix.src.tolist(), ix.dst.tolist(), self.state.lam)}
        return IterateState(tuple(np.array([v]) for v in self.state.x), lam, self.iteration)

    def dual_residual(self) -> float:
        lam = self.state.lam
        return float(np.max(np.abs(lam - lam[self.index.rev]), initial=0.0))

    def error_floor(self) -> float:
        # with every message lost the iterates freeze once each node has updated
        if self.loss >= 1.0 and (
            (self.kind is ScheduleKind.SYNCHRONOUS and self.iteration > 0)
            or (self.kind is ScheduleKind.CYCLIC and self.iteration >= self.index.m)
        ):
            return self.mse()
        return 0.0

    def _deliver(self, edges, values_x, values_lam):
        ix, st = self.index, self.state
        ok = self.draws.take(len(edges)) >= self.loss
        for e, xv, lv, good in zip(edges, values_x, values_lam, ok):
            if good:
                r = ix.rev_l[e]
                st.x_copy[r] = xv
                st.lam_copy[r] = lv
        self.transmissions += 1 if self.broadcast else len(edges)

    def advance(self) -> None:
        ix, st = self.index, self.state
        active = self.activate(self.iteration)
        if self.kind is ScheduleKind.SYNCHRONOUS:
            x_new, _, lam_new = pdmm_avg_sync_round(st, self.t, self.gamma_p, self.gamma_d, ix)
            st.x, st.lam = x_new, lam_new
            ok = self.draws.take(ix.count) >= self.loss
            st.x_copy[ix.rev[ok]] = x_new[ix.src[ok]]
            st.lam_copy[ix.rev[ok]] = lam_new[ok]
            self.transmissions += ix.m if self.broadcast else ix.count
            self._init_error()
        else:
            updates = []
            for i in active:
                xi = pdmm_avg_x(i, st, self.t, self.gamma_p, ix)
                wi = pdmm_avg_w(i, st, self.t, self.gamma_d, ix)
                updates.append((i, xi, pdmm_avg_lambda(i, wi, st, self.gamma_d, ix)))
            for i, xi, lam_i in updates:
                old = st.x[i]
                st.x[i] = xi
                for e, v in lam_i.items():
                    st.lam[e] = v
                self._moved(i, old)
            for i, xi, lam_i in updates:
                self._deliver(ix.out[i], [xi] * len(lam_i), list(lam_i.values()))
        self.iteration += 1


class ADMMAveraging(_Simulator):
    def __init__(self, index, t, rho=1.0, asynchronous=False, seed=0, x0=None, t_ave=None):
        super().__init__(index, t, t_ave)
        if not rho > 0:
            raise ValueError("ADMM penalty must be positive")
        self.rho = float(rho)
        self.asynchronous = asynchronous
        self.state = ADMMState.start(index, self.t if x0 is None else x0)
        self.activate = Schedule(ScheduleKind.RANDOM_EDGE, seed).activator(index.topology)
        self._init_error()

    @property
    def x(self):
        return self.state.x

    def advance(self) -> None:
        ix = self.index
        if self.asynchronous:
            a, b = self.activate(self.iteration)
            old = (self.state.x[a], self.state.x[b])
            self.state = admm_avg_step(self.state, self.rho, self.t, ix, ix.topology.find_edge(a, b))
            self._moved(a, old[0])
            self._moved(b, old[1])
            self.transmissions += 2
        else:
            self.state = admm_avg_step(self.state, self.rho, self.t, ix)
            self._init_error()
            self.transmissions += ix.count
        self.iteration += 1


class GossipAveraging(_Simulator):
    def __init__(self, index, t, seed=0, x0=None, t_ave=None):
        super().__init__(index, t, t_ave)
        self._x = np.array(self.t if x0 is None else x0, dtype=float)
        self.activate = Schedule(ScheduleKind.RANDOM_EDGE, seed).activator(index.topology)
        self._init_error()

    @property
    def x(self):
        return self._x

    def advance(self) -> None:
        i, j = self.activate(self.iteration)
        oi, oj = self._x[i], self._x[j]
        self._x[i] = self._x[j] = 0.5 * (oi + oj)
        self._moved(i, oi)
        self._moved(j, oj)
        self.transmissions += 2
        self.iteration += 1


class BroadcastGossipAveraging(_Simulator):
    def __init__(self, index, t, gamma_b=0.5, seed=0, x0=None, t_ave=None):
        super().__init__(index, t, t_ave)
        if not 0.0 < gamma_b < 1.0:
            raise ValueError("broadcast mixing weight must lie strictly between 0 and 1")
        self.gamma_b = gamma_b
        self._x = np.array(self.t if x0 is None else x0, dtype=float)
        self.activate = Schedule(ScheduleKind.RANDOM_NODE, seed).activator(index.topology)
        self._init_error()

    @property
    def x(self):
        return self._x

    def error_floor(self) -> float:
        # updates are convex combinations, so estimates never leave [lo, hi]
        lo, hi = float(self._x.min()), float(self._x.max())
        gap = max(lo - self.t_ave, self.t_ave - hi, 0.0)
        return gap * gap

    def advance(self) -> None:
        i = self.activate(self.iteration)[0]
        g = self.gamma_b
        xi = self._x[i]
        for j in self.index.topology.neighbors[i]:
            old = self._x[j]
            self._x[j] = g * old + (1.0 - g) * xi
            self._moved(j, old)
        self.transmissions += 1
        self.iteration += 1


def make_simulator(method: str, topology: GraphTopology, t, *, gamma_p=1.0, gamma_d=1.0,
                   seed=0, loss=0.0, x0=None, rho=1.0, gamma_b=0.5, index=None,
                   transport: str = "p2p") -> _Simulator:
    """Build the simulator for one of :data:`METHODS`.

    ``seed`` drives the activation schedule; packet loss uses an independent
    stream derived from it.
    """
    index = index or DirectedIndex(topology)
    if transport not in ("p2p", "broadcast"):
        raise ValueError(f"unknown transport {transport!r}")
    if method in PDMM_METHODS:
        return PDMMAveraging(index, t, gamma_p, gamma_d, Schedule(PDMM_METHODS[method], seed),
                             x0=x0, loss=loss, loss_seed=loss_stream_seed(seed),
                             broadcast=transport == "broadcast")
    if loss:
        raise ValueError(f"packet loss is only simulated for PDMM methods, not {method!r}")
    if method == "admm-sync":
        return ADMMAveraging(index, t, rho, False, seed, x0)
    if method == "admm-async":
        return ADMMAveraging(index, t, rho, True, seed, x0)
    if method == "gossip":
        return GossipAveraging(index, t, seed, x0)
    if method == "broadcast":
        return BroadcastGossipAveraging(index, t, gamma_b, seed, x0)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def loss_stream_seed(seed: int) -> int:
    """Seed of the loss stream paired with schedule seed ``seed``."""
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


@dataclass
class RunResult:
    converged: bool
    iterations: int | None
    final_mse: float
    diverged: bool = False
    stalled: bool = False
    transmissions: int = 0
    history: list = field(default_factory=list)


def run_to_tolerance(sim: _Simulator, tol: float = 1e-4, max_iter: int = 10_000,
                     divergence: float = 1e8, callback=None) -> RunResult:
    """Advance until ``mse <= tol``, divergence, a stall, or ``max_iter`` iterations.

    ``callback(sim)`` is invoked after every iteration (and once at the start).
    Divergence means the mean squared error exceeds ``divergence`` times its
    initial value (or becomes non-finite).
    """
    start = sim.exact_mse()
    ceiling = divergence * max(start, 1e-300)
    if callback:
        callback(sim)
    if start <= tol:
        return RunResult(True, 0, start, transmissions=sim.transmissions)
    m = max(sim.index.m, 1)
    while sim.iteration < max_iter:
        sim.advance()
        if callback:
            callback(sim)
        err = sim.mse()
        if err <= tol and sim.exact_mse() <= tol:
            return RunResult(True, sim.iteration, sim.mse(), transmissions=sim.transmissions)
        if not np.isfinite(err) or err > ceiling:
            return RunResult(False, None, err, diverged=True, transmissions=sim.transmissions)
        if sim.iteration % m == 0:
            sim.exact_mse()
            if sim.error_floor() > tol:
                return RunResult(False, None, sim.mse(), stalled=True, transmissions=sim.transmissions)
    return RunResult(False, None, sim.exact_mse(), transmissions=sim.transmissions)


def averaged_curve_crossing(sims: list[_Simulator], tol: float, max_iter: int) -> int | None:
    """First iteration at which the seed-averaged MSE curve is at or below ``tol``.

    All simulators are advanced in lockstep from their current (initial)
    state.  Returns ``None`` when the budget runs out or the averaged error
    provably cannot reach ``tol``.
    """
    if not sims:
        return None
    m = max(sims[0].index.m, 1)
    errs = [s.exact_mse() for s in sims]
    k = 0
    while True:
        if np.mean(errs) <= tol:
            if np.mean([s.exact_mse() for s in sims]) <= tol:
                return k
        if k >= max_iter or not np.all(np.isfinite(errs)):
            return None
        if k % m == 0 and k and np.mean([s.error_floor() for s in sims]) > tol:
            return None
        for s in sims:
            s.advance()
        k += 1
        errs = [s.mse() for s in sims]


def initial_values(t, mode: str) -> np.ndarray:
    """``"t"`` starts every node at its own measurement, ``"zeros"`` at the origin."""
    t = np.asarray(t, dtype=float)
    if mode == "t":
        return t.copy()
    if mode == "zeros":
        return np.zeros_like(t)
    raise ValueError(f"unknown initialization {mode!r}; use 't' or 'zeros'")
