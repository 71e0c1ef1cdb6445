"""Feasibility of masked transport via max-flow and subset inequalities.

Exact marginal matching is possible iff every client subset I satisfies

    sum of q over events contained in I  <=  sum of p over I
                                         <=  sum of q over events touching I.

The two families are complementary (a lower violation for I is an upper
violation for its complement), so a single max-flow computation on the
bipartite supply/demand network decides feasibility: route mass from a source
through clients (capacity p_i) into events (capacity q_j) and check whether
one unit gets through.  The brute-force checker enumerates all subsets and is
guarded to small client counts; it serves as an independent oracle for the
flow-based verdict.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .transport import TransportProblem, ValidationError

FEASIBILITY_TOL = 1e-9
HALL_MAX_CLIENTS = 20
_RESIDUAL_EPS = 1e-15
_CHUNK_BITS = 16


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    """Source -> clients -> events -> sink network for one transport problem.

    Node ids: source 0, client i at ``1 + i``, event j at ``1 + n_clients + j``,
    sink last.  Middle arcs carry capacity 1 (the total mass) in place of an
    infinite bound.
    """

    n_clients: int
    n_events: int
    tails: np.ndarray
    heads: np.ndarray
    capacities: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_clients + self.n_events + 2

    @property
    def source(self) -> int:
        return 0

    @property
    def sink(self) -> int:
        return self.n_clients + self.n_events + 1


@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    max_flow_value: float
    violating_subset: Optional[tuple[int, ...]] = None
    violated_side: Optional[str] = None  # "lower" or "upper"


def build_flow_network(problem: TransportProblem) -> FlowNetwork:
    """Arcs: one per client (capacity p_i), one per mask pair, one per event (capacity q_j)."""
    n, m = problem.n_clients, problem.n_events
    client_nodes = 1 + np.arange(n, dtype=np.int64)
    event_nodes = 1 + n + np.arange(m, dtype=np.int64)
    tails = np.concatenate(
        [np.zeros(n, dtype=np.int64), 1 + problem.row_index, event_nodes]
    )
    heads = np.concatenate(
        [client_nodes, 1 + n + problem.col_index, np.full(m, 1 + n + m, dtype=np.int64)]
    )
    capacities = np.concatenate(
        [problem.importance, np.ones(problem.mask_size), problem.availability]
    )
    capacities = capacities.copy()
    capacities.flags.writeable = False
    return FlowNetwork(n_clients=n, n_events=m, tails=tails, heads=heads, capacities=capacities)


class _Dinic:
    """Dinic's blocking-flow algorithm on float capacities.

    Arcs are inserted in network order, so level graphs and augmentations are
    deterministic for a fixed input.  Residuals below ``_RESIDUAL_EPS`` are
    treated as saturated to keep float round-off from stalling termination.
    """

    def __init__(self, network: FlowNetwork):
        self.n = network.n_nodes
        self.adj: list[list[int]] = [[] for _ in range(self.n)]
        self.to: list[int] = []
        self.cap: list[float] = []
        for tail, head, capacity in zip(network.tails, network.heads, network.capacities):
            self.adj[int(tail)].append(len(self.to))
            self.to.append(int(head))
            self.cap.append(float(capacity))
            self.adj[int(head)].append(len(self.to))
            self.to.append(int(tail))
            self.cap.append(0.0)

    def _bfs(self, source: int, sink: int) -> bool:
        self.level = [-1] * self.n
        self.level[source] = 0
        queue = deque([source])
        while queue:
            node = queue.popleft()
            for arc in self.adj[node]:
                if self.cap[arc] > _RESIDUAL_EPS and self.level[self.to[arc]] < 0:
                    self.level[self.to[arc]] = self.level[node] + 1
                    queue.append(self.to[arc])
        return self.level[sink] >= 0

    def _dfs(self, node: int, sink: int, pushed: float) -> float:
        if node == sink:
            return pushed
        while self.iter[node] < len(self.adj[node]):
            arc = self.adj[node][self.iter[node]]
            nxt = self.to[arc]
            if self.cap[arc] > _RESIDUAL_EPS and self.level[nxt] == self.level[node] + 1:
                flow = self._dfs(nxt, sink, min(pushed, self.cap[arc]))
                if flow > 0.0:
                    self.cap[arc] -= flow
                    self.cap[arc ^ 1] += flow
                    return flow
            self.iter[node] += 1
        return 0.0

    def run(self, source: int, sink: int) -> float:
        total = 0.0
        while self._bfs(source, sink):
            self.iter = [0] * self.n
            while True:
                pushed = self._dfs(source, sink, float("inf"))
                if pushed <= 0.0:
                    break
                total += pushed
        return total

    def source_side(self, source: int) -> list[int]:
        """Nodes reachable from the source in the residual graph (min cut)."""
        seen = [False] * self.n
        seen[source] = True
        queue = deque([source])
        while queue:
            node = queue.popleft()
            for arc in self.adj[node]:
                if self.cap[arc] > _RESIDUAL_EPS and not seen[self.to[arc]]:
                    seen[self.to[arc]] = True
                    queue.append(self.to[arc])
        return [v for v in range(self.n) if seen[v]]


def max_flow(network: FlowNetwork) -> float:
    """Maximum source-to-sink flow value."""
    return _Dinic(network).run(network.source, network.sink)


def subset_inequalities(problem: TransportProblem, subset) -> tuple[float, float, float]:
    """Evaluate (contained availability mass, importance mass, touching availability mass) for a subset."""
    members = frozenset(int(i) for i in subset)
    p_mass = float(sum(problem.importance[i] for i in members))
    q_contained = 0.0
    q_touching = 0.0
    for prob, event in zip(problem.availability, problem.events):
        hit = any(i in members for i in event)
        if hit:
            q_touching += float(prob)
            if all(i in members for i in event):
                q_contained += float(prob)
    return q_contained, p_mass, q_touching


def check_feasible_maxflow(problem: TransportProblem) -> FeasibilityVerdict:
    """Max-flow feasibility check with a min-cut violation witness.

    When infeasible, the clients on the source side of the min cut form a
    subset whose importance mass exceeds the availability mass of the events
    touching it (upper-side violation).
    """
    network = build_flow_network(problem)
    solver = _Dinic(network)
    value = solver.run(network.source, network.sink)
    if value >= 1.0 - FEASIBILITY_TOL:
        return FeasibilityVerdict(feasible=True, max_flow_value=value)
    side = solver.source_side(network.source)
    subset = tuple(sorted(v - 1 for v in side if 1 <= v <= problem.n_clients))
    return FeasibilityVerdict(
        feasible=False,
        max_flow_value=value,
        violating_subset=subset,
        violated_side="upper",
    )


def _subset_lex_key(mask: int, n_clients: int) -> tuple[int, ...]:
    return tuple(i for i in range(n_clients) if mask >> i & 1)


def check_feasible_hall(problem: TransportProblem) -> FeasibilityVerdict:
    """Brute-force check of every subset inequality (guarded to small N).

    Returns the lexicographically first violating subset; the implied
    max-flow value is one minus the largest upper-side violation, which keeps
    the verdict interchangeable with the flow-based checker.
    """
    n = problem.n_clients
    if n > HALL_MAX_CLIENTS:
        raise ValidationError(
            f"brute-force enumeration is guarded to N <= {HALL_MAX_CLIENTS} "
            f"(got N = {n}); use the max-flow checker instead"
        )
    p = problem.importance
    q = problem.availability
    event_masks = np.array(
        [sum(1 << i for i in event) for event in problem.events], dtype=np.int64
    )
    client_bits = np.arange(n, dtype=np.int64)

    best_key: Optional[tuple[int, ...]] = None
    best_side = None
    worst_upper = 0.0
    total_masks = 1 << n
    chunk = 1 << min(_CHUNK_BITS, n)
    for start in range(0, total_masks, chunk):
        masks = np.arange(start, min(start + chunk, total_masks), dtype=np.int64)
        membership = (masks[:, None] >> client_bits[None, :]) & 1
        p_mass = membership @ p
        if event_masks.size:
            contained = (event_masks[None, :] & ~masks[:, None]) == 0
            touching = (event_masks[None, :] & masks[:, None]) != 0
            q_contained = contained @ q
            q_touching = touching @ q
        else:
            q_contained = np.zeros(masks.size)
            q_touching = np.zeros(masks.size)
        lower_violation = q_contained - p_mass
        upper_violation = p_mass - q_touching
        worst_upper = max(worst_upper, float(upper_violation.max(initial=0.0)))
        bad = (lower_violation > FEASIBILITY_TOL) | (upper_violation > FEASIBILITY_TOL)
        for idx in np.flatnonzero(bad):
            mask = int(masks[idx])
            key = _subset_lex_key(mask, n)
            if best_key is None or key < best_key:
                best_key = key
                best_side = "lower" if lower_violation[idx] > FEASIBILITY_TOL else "upper"

    flow_value = 1.0 - max(0.0, worst_upper)
    if best_key is None:
        return FeasibilityVerdict(feasible=True, max_flow_value=flow_value)
    return FeasibilityVerdict(
        feasible=False,
        max_flow_value=flow_value,
        violating_subset=best_key,
        violated_side=best_side,
    )


def verdict_to_dict(verdict: FeasibilityVerdict) -> dict:
    doc: dict = {
        "feasible": verdict.feasible,
        "max_flow_value": verdict.max_flow_value,
    }
    if verdict.violating_subset is not None:
        doc["violating_subset"] = list(verdict.violating_subset)
        doc["violated_side"] = verdict.violated_side
    return doc
