"""Centralised task assignment: simulated annealing over destroy/repair moves.

Routes are kept sorted by line priority ``mu``. That respects in-line
precedence and, because upstream tasks always have a strictly smaller
``mu``, rules out cross-AGV waiting cycles during execution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .factory import (
    UNREACHABLE,
    Agv,
    Assignment,
    FactoryGraph,
    FactoryError,
    TransportTask,
    route_from_sequence,
)


class InfeasibleInstance(FactoryError):
    pass


class NoFeasibleInsertion(InfeasibleInstance):
    pass


@dataclass(frozen=True)
class SaParams:
    t_init: float | None = None  # None: half the initial estimate
    t_stop: float = 1e-3
    alpha: float = 0.995
    destroy_size: int | None = None  # None: max(2, ceil(0.2 * M)), capped at M
    removal_bias: float = 1.0
    max_iterations: int = 10_000
    repair_noise: float = 0.5  # jitter on insertion scores, cooled with T

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.t_init is not None and self.t_init <= self.t_stop:
            # a cold start is allowed: it just skips the annealing loop
            pass
        if self.destroy_size is not None and self.destroy_size < 1:
            raise ValueError("destroy_size must be >= 1")
        if not 0.0 <= self.repair_noise < 1.0:
            raise ValueError("repair_noise must lie in [0, 1)")


@dataclass
class EstimatedCost:
    per_agv: dict[int, int]
    total: int


@dataclass
class AgvStart:
    """Where an AGV becomes free for new work: cell, slot offset, payload."""
    cell: int
    offset: int = 0
    payload: int = 20


def _starts(agvs: Sequence[Agv], starts: Mapping[int, AgvStart] | None) -> dict[int, AgvStart]:
    out = {a.id: AgvStart(a.location, 0, a.payload) for a in agvs}
    if starts:
        out.update(starts)
    return out


def route_travel(graph: FactoryGraph, route, start: int, offset: int = 0) -> int:
    t, cur = offset, start
    for e in route:
        d, cur = graph.travel(cur, e.node)
        if d >= UNREACHABLE:
            raise FactoryError(f"node {e.node} unreachable from {start}")
        t += d
    return t


def estimated_completion(assignment: Assignment, graph: FactoryGraph,
                         agvs: Sequence[Agv],
                         starts: Mapping[int, AgvStart] | None = None) -> EstimatedCost:
    """Shortest-path completion estimate per AGV, ignoring waits and traffic."""
    st = _starts(agvs, starts)
    per = {}
    for a in agvs:
        s = st[a.id]
        per[a.id] = route_travel(graph, assignment.routes.get(a.id, []), s.cell, s.offset)
    return EstimatedCost(per, max(per.values(), default=0))


def accept_probability(delta: float, temperature: float) -> float:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if delta <= 0:
        return 1.0
    return math.exp(-delta / temperature)


def default_destroy_size(n_tasks: int) -> int:
    # removing a single task only relocates it; two lets tasks trade places
    return max(min(2, n_tasks), math.ceil(0.2 * n_tasks))


def destroy(assignment: Assignment, tasks: Sequence[TransportTask], destroy_size: int,
            rng: np.random.Generator, removal_bias: float = 1.0,
            pinned: frozenset[int] = frozenset()) -> tuple[Assignment, list[int]]:
    """Remove tasks sampled without replacement, weight ``mu ** bias``."""
    if destroy_size < 1:
        raise ValueError("destroy_size must be >= 1")
    mu = {t.id: t.priority for t in tasks}
    cand = [m for k in sorted(assignment.routes) for m in assignment.tasks_of(k)
            if m not in pinned]
    if destroy_size > len(cand):
        raise ValueError("destroy_size exceeds removable tasks")
    w = np.array([float(mu[m]) ** removal_bias for m in cand])
    removed = []
    for _ in range(destroy_size):
        i = int(rng.choice(len(cand), p=w / w.sum()))
        removed.append(cand[i])
        w[i] = 0.0
    gone = set(removed)
    out = Assignment(
        {m: k for m, k in assignment.matrix.items() if m not in gone},
        {k: [e for e in r if e.task not in gone] for k, r in assignment.routes.items()},
    )
    return out, removed


def repair(partial: Assignment, removed: Sequence[int], tasks: Sequence[TransportTask],
           graph: FactoryGraph, agvs: Sequence[Agv],
           starts: Mapping[int, AgvStart] | None = None) -> Assignment:
    """Greedy reinsertion in ascending (mu, id) order.

    Each task goes to the (AGV, position) with the smallest resulting
    estimated makespan; ties go to the smaller own completion estimate, then
    the lower AGV id, then the earlier position.
    """
    by_id = {t.id: t for t in tasks}
    if set(removed) & set(partial.matrix):
        raise ValueError("removed tasks overlap the partial assignment")
    st = _starts(agvs, starts)
    cap = {a.id: a.capacity for a in agvs}
    seqs = {a.id: partial.tasks_of(a.id) for a in agvs}

    def cost(k: int, seq: list[int]) -> int:
        s = st[k]
        try:
            r = route_from_sequence(graph, by_id, seq, s.cell, s.payload, cap[k])
        except FactoryError:
            return UNREACHABLE
        return route_travel(graph, r, s.cell, s.offset)

    costs = {k: cost(k, seqs[k]) for k in seqs}
    for m in sorted(removed, key=lambda m: by_id[m].priority):
        mu = by_id[m].priority
        best = None
        for k in sorted(seqs):
            others = max((c for j, c in costs.items() if j != k), default=0)
            seq = seqs[k]
            lo = sum(1 for x in seq if by_id[x].priority < mu)
            hi = sum(1 for x in seq if by_id[x].priority <= mu)
            for j in range(lo, hi + 1):
                own = cost(k, seq[:j] + [m] + seq[j:])
                if own >= UNREACHABLE:
                    continue
                key = (max(own, others), own, k, j)
                if best is None or key < best:
                    best = key
        if best is None:
            raise NoFeasibleInsertion(f"task {m} cannot be inserted")
        _, own, k, j = best
        seqs[k].insert(j, m)
        costs[k] = own
    return assignment_from_sequences(seqs, by_id, graph, agvs, starts)


def assignment_from_sequences(seqs: Mapping[int, Sequence[int]],
                              tasks: Mapping[int, TransportTask], graph: FactoryGraph,
                              agvs: Sequence[Agv],
                              starts: Mapping[int, AgvStart] | None = None) -> Assignment:
    st = _starts(agvs, starts)
    cap = {a.id: a.capacity for a in agvs}
    routes, matrix = {}, {}
    for k, seq in seqs.items():
        s = st[k]
        routes[k] = route_from_sequence(graph, tasks, seq, s.cell, s.payload, cap[k])
        for m in seq:
            matrix[m] = k
    return Assignment(matrix, routes)


@dataclass
class SaResult:
    assignment: Assignment
    cost: int
    initial_cost: int
    trace: np.ndarray = field(repr=False)
    iterations: int = 0


def _arrays(tasks: Sequence[TransportTask], graph: FactoryGraph):
    pickup = np.array([t.pickup for t in tasks], dtype=np.int64)
    delivery = np.array([t.delivery for t in tasks], dtype=np.int64)
    qty_in = np.array([t.qty_in for t in tasks], dtype=np.int64)
    mu = np.array([t.priority for t in tasks], dtype=np.int64)
    resupply = np.array(graph.resupply_nodes, dtype=np.int64)
    return pickup, delivery, qty_in, mu, resupply


def sa_solve(tasks: Sequence[TransportTask], agvs: Sequence[Agv], graph: FactoryGraph,
             params: SaParams, rng: np.random.Generator | int,
             starts: Mapping[int, AgvStart] | None = None) -> SaResult:
    """Anneal from the greedy insertion solution; return the best seen."""
    if not tasks:
        raise InfeasibleInstance("no tasks to assign")
    if not agvs:
        raise InfeasibleInstance("no AGVs")
    caps = {a.capacity for a in agvs}
    if len(caps) != 1:
        raise InfeasibleInstance("heterogeneous capacities are not supported")
    capacity = caps.pop()
    if any(t.qty_in > capacity or t.qty_out > capacity for t in tasks):
        raise InfeasibleInstance("task quantity exceeds AGV capacity")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    seed = int(rng.integers(2**31 - 1))

    st = _starts(agvs, starts)
    order = sorted(agvs, key=lambda a: a.id)
    K, M = len(order), len(tasks)
    pickup, delivery, qty_in, mu, resupply = _arrays(tasks, graph)
    starts_a = np.array([st[a.id].cell for a in order], dtype=np.int64)
    times_a = np.array([st[a.id].offset for a in order], dtype=np.int64)
    pays_a = np.array([st[a.id].payload for a in order], dtype=np.int64)
    nd = np.ascontiguousarray(graph.node_dist, dtype=np.int64)
    ne = np.ascontiguousarray(graph.node_end, dtype=np.int64)

    routes = np.zeros((K, M + 1), dtype=np.int64)
    lens = np.zeros(K, dtype=np.int64)
    costs = np.array([t for t in times_a], dtype=np.int64)
    ok = _kernels.repair_kernel(routes, lens, costs, np.arange(M, dtype=np.int64), mu,
                                starts_a, times_a, pays_a, capacity, nd, ne, pickup,
                                delivery, qty_in, resupply)
    if not ok:
        raise NoFeasibleInsertion("greedy construction failed")
    initial = int(costs.max())

    t_init = params.t_init if params.t_init is not None else initial / 2.0
    dsize = params.destroy_size or default_destroy_size(M)
    dsize = min(dsize, M)
    removable = np.ones(M, dtype=np.bool_)
    best, trace, iters = _kernels.sa_kernel(
        routes, lens, removable, mu, starts_a, times_a, pays_a, capacity, nd, ne,
        pickup, delivery, qty_in, resupply, float(t_init), float(params.t_stop),
        float(params.alpha), int(dsize), float(params.removal_bias),
        int(params.max_iterations), seed, float(params.repair_noise))

    by_id = {t.id: t for t in tasks}
    seqs = {a.id: [tasks[int(i)].id for i in routes[r, :lens[r]]] for r, a in enumerate(order)}
    assignment = assignment_from_sequences(seqs, by_id, graph, agvs, starts)
    return SaResult(assignment, int(min(best, initial)), initial, trace, int(iters))


def kernel_repair(partial: Assignment, removed: Sequence[int],
                  tasks: Sequence[TransportTask], graph: FactoryGraph,
                  agvs: Sequence[Agv],
                  starts: Mapping[int, AgvStart] | None = None) -> Assignment:
    """Compiled twin of :func:`repair`, used by the annealer."""
    st = _starts(agvs, starts)
    order = sorted(agvs, key=lambda a: a.id)
    index = {t.id: i for i, t in enumerate(tasks)}
    pickup, delivery, qty_in, mu, resupply = _arrays(tasks, graph)
    K, M = len(order), len(tasks)
    routes = np.zeros((K, M + 1), dtype=np.int64)
    lens = np.zeros(K, dtype=np.int64)
    for r, a in enumerate(order):
        seq = [index[m] for m in partial.tasks_of(a.id)]
        routes[r, :len(seq)] = seq
        lens[r] = len(seq)
    starts_a = np.array([st[a.id].cell for a in order], dtype=np.int64)
    times_a = np.array([st[a.id].offset for a in order], dtype=np.int64)
    pays_a = np.array([st[a.id].payload for a in order], dtype=np.int64)
    capacity = order[0].capacity
    nd = np.ascontiguousarray(graph.node_dist, dtype=np.int64)
    ne = np.ascontiguousarray(graph.node_end, dtype=np.int64)
    costs = _kernels._all_costs(routes, lens, starts_a, times_a, pays_a, capacity, nd, ne,
                                pickup, delivery, qty_in, resupply)
    ok = _kernels.repair_kernel(routes, lens, costs,
                                np.array([index[m] for m in removed], dtype=np.int64),
                                mu, starts_a, times_a, pays_a, capacity, nd, ne, pickup,
                                delivery, qty_in, resupply)
    if not ok:
        raise NoFeasibleInsertion("no feasible insertion")
    by_id = {t.id: t for t in tasks}
    seqs = {a.id: [tasks[int(i)].id for i in routes[r, :lens[r]]] for r, a in enumerate(order)}
    return assignment_from_sequences(seqs, by_id, graph, agvs, starts)
