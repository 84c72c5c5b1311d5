"""Message passing between nodes, with optional packet loss.

Every node keeps a copy of each neighbour's latest primal block and of the
dual block addressed to it.  Updates read those copies.  A lost message
leaves the receiver's copy unchanged.

Two transports:

``p2p``
    node ``i`` sends ``(x_i, lam_i|j)`` to each neighbour ``j`` separately.
    Each directed transmission is dropped independently with the configured
    probability.
``broadcast``
    node ``i`` sends ``(x_i, w_i)`` once; each receiver rebuilds
    ``lam_i|j`` from its own pre-iteration values.  Lossless only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRANSPORT_MODES = ("p2p", "broadcast")


@dataclass(frozen=True)
class TransportModel:
    mode: str = "p2p"
    loss_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRANSPORT_MODES:
            raise ValueError(f"unknown transport mode {self.mode!r}")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        if self.mode == "broadcast" and self.loss_probability != 0.0:
            raise ValueError("broadcast transport cannot model loss; use p2p")


@dataclass
class NeighborView:
    """``x[(i, j)]``: node i's copy of x_j.  ``lam[(i, j)]``: node i's copy of lam_j|i."""

    x: dict = field(default_factory=dict)
    lam: dict = field(default_factory=dict)

    @classmethod
    def from_state(cls, state, topology) -> "NeighborView":
        v = cls()
        for i, j in topology.directed_edges:
            v.x[(i, j)] = state.x[j].copy()
            v.lam[(i, j)] = state.lam[(j, i)].copy()
        return v

    def staleness(self, state) -> float:
        """Largest gap between any copy and the value it mirrors."""
        gap = 0.0
        for (i, j), xj in self.x.items():
            gap = max(gap, float(np.max(np.abs(xj - state.x[j]))))
            gap = max(gap, float(np.max(np.abs(self.lam[(i, j)] - state.lam[(j, i)]))))
        return gap


@dataclass(frozen=True)
class Delivery:
    iteration: int
    sender: int
    receiver: int
    delivered: bool

    def to_json(self) -> dict:
        return {"iter": self.iteration, "sender": self.sender + 1,
                "receiver": self.receiver + 1, "delivered": self.delivered}


@dataclass
class DeliveryLog:
    mode: str
    entries: list[Delivery] = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with Path(path).open("w") as fh:
            for d in self.entries:
                fh.write(json.dumps(d.to_json()) + "\n")

    def delivery_rate(self) -> float:
        if not self.entries:
            return 1.0
        return sum(d.delivered for d in self.entries) / len(self.entries)


def count_transmissions(log: DeliveryLog) -> int:
    """Radio uses: one per directed link for p2p, one per sender for broadcast."""
    if log.mode == "broadcast":
        return len({(d.iteration, d.sender) for d in log.entries})
    return len(log.entries)


class UniformStream:
    """Uniform [0, 1) draws from a seeded generator, consumed in order."""

    def __init__(self, seed: int, block: int = 4096):
        self.rng = np.random.default_rng(seed)
        self.block = block
        self._buf = np.empty(0)
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self._pos == self._buf.size:
                self._buf = self.rng.random(self.block)
                self._pos = 0
            k = min(n, self._buf.size - self._pos)
            out.append(self._buf[self._pos:self._pos + k])
            self._pos += k
            n -= k
        return np.concatenate(out) if len(out) != 1 else out[0]


class Channel:
    """Transport state for one run: neighbour copies, loss RNG and log.

    The loss RNG is seeded from the transport model and is not shared with
    the activation schedule.
    """

    def __init__(self, transport: TransportModel, initial_state, problem):
        self.transport = transport
        self.draws = UniformStream(transport.seed)
        self.views = NeighborView.from_state(initial_state, problem.topology)
        self.log = DeliveryLog(transport.mode)
        self._topology = problem.topology

    @property
    def needs_w(self) -> bool:
        return self.transport.mode == "broadcast"

    def transmit(self, iteration, update, pre_state, problem, cfg) -> list[Delivery]:
        """Deliver node ``update.node``'s new values to its neighbours."""
        i = update.node
        nbrs = problem.neighbors(i)
        sent = []
        if self.transport.mode == "p2p":
            draws = self.draws.take(len(nbrs))
            for j, u in zip(nbrs, draws):
                ok = bool(u >= self.transport.loss_probability)
                if ok:
                    self.views.x[(j, i)] = update.x.copy()
                    self.views.lam[(j, i)] = update.lam[j].copy()
                sent.append(Delivery(iteration, i, j, ok))
        else:
            if update.w is None:
                raise ValueError("broadcast transport needs the auxiliary block w")
            for j in nbrs:
                e = problem.topology.find_edge(i, j)
                A_ij, A_ji, c = problem.blocks(i, j)
                rebuilt = pre_state.lam[(j, i)] + cfg.dual_inv[e] @ (c - A_ji @ pre_state.x[j] - A_ij @ update.w)
                self.views.x[(j, i)] = update.x.copy()
                self.views.lam[(j, i)] = rebuilt
                sent.append(Delivery(iteration, i, j, True))
        self.log.entries.extend(sent)
        return sent


def transmit(sender_update, pre_state, problem, cfg, channel: Channel, iteration: int):
    """Functional alias of :meth:`Channel.transmit`; returns ``(views, deliveries)``."""
    deliveries = channel.transmit(iteration, sender_update, pre_state, problem, cfg)
    return channel.views, deliveries
