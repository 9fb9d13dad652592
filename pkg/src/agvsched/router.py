"""Spatiotemporal A* over (cell, slot) states with a congestion-map penalty."""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .factory import FactoryGraph


class BudgetExhausted(RuntimeError):
    """The node budget ran out before the search finished."""


class CongestionMap:
    """Predicted AGV count per (vertex, absolute slot) over a finite horizon.

    Slots outside ``[origin_slot, origin_slot + horizon)`` read as zero.
    """

    __slots__ = ("origin_slot", "counts")

    def __init__(self, n_vertices: int, horizon: int, origin_slot: int = 0,
                 counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((horizon, n_vertices), dtype=np.int32)
        if counts.shape != (horizon, n_vertices):
            raise ValueError("counts shape mismatch")
        self.origin_slot = origin_slot
        self.counts = counts

    @property
    def horizon(self) -> int:
        return self.counts.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.counts.shape[1]

    def occupancy(self, v: int, t: int) -> int:
        d = t - self.origin_slot
        if 0 <= d < self.counts.shape[0]:
            return int(self.counts[d, v])
        return 0

    def add_path(self, slot0: int, cells: Sequence[int], amount: int = 1) -> None:
        """Add ``amount`` at ``cells[i]`` for absolute slot ``slot0 + i``."""
        H = self.counts.shape[0]
        for i, v in enumerate(cells):
            d = slot0 + i - self.origin_slot
            if d >= H:
                break
            if d >= 0:
                self.counts[d, v] += amount
        if amount < 0:
            np.maximum(self.counts, 0, out=self.counts)

    def copy(self) -> "CongestionMap":
        return CongestionMap(self.n_vertices, self.horizon, self.origin_slot, self.counts.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, CongestionMap):
            return NotImplemented
        a, b = _aligned(self, other)
        return np.array_equal(a.counts, b.counts)

    def nonzero(self) -> dict[tuple[int, int], int]:
        """``{(vertex, absolute slot): count}`` for every positive entry."""
        ds, vs = np.nonzero(self.counts)
        return {(int(v), int(d) + self.origin_slot): int(self.counts[d, v])
                for d, v in zip(ds, vs)}


def _aligned(a: CongestionMap, b: CongestionMap) -> tuple[CongestionMap, CongestionMap]:
    lo = min(a.origin_slot, b.origin_slot)
    hi = max(a.origin_slot + a.horizon, b.origin_slot + b.horizon)
    out = []
    for m in (a, b):
        c = np.zeros((hi - lo, m.n_vertices), dtype=np.int32)
        off = m.origin_slot - lo
        c[off:off + m.horizon] = m.counts
        out.append(CongestionMap(m.n_vertices, hi - lo, lo, c))
    return out[0], out[1]


def merge_maps(a: CongestionMap, b: CongestionMap) -> CongestionMap:
    """Element-wise maximum over the union of both time windows."""
    if a.n_vertices != b.n_vertices:
        raise ValueError("maps cover different graphs")
    if a.origin_slot == b.origin_slot and a.horizon == b.horizon:
        return CongestionMap(a.n_vertices, a.horizon, a.origin_slot,
                             np.maximum(a.counts, b.counts))
    x, y = _aligned(a, b)
    return CongestionMap(x.n_vertices, x.horizon, x.origin_slot, np.maximum(x.counts, y.counts))


@dataclass(frozen=True)
class RouterConfig:
    kappa: int = 3
    penalty: float = 50.0
    max_expansions: int = 20_000

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if self.penalty <= 0:
            raise ValueError("penalty must be positive")


@dataclass
class NavPath:
    """Cells visited at slots ``t0, t0 + 1, ..., arrival``."""
    t0: int
    cells: list[int]
    wait_at_goal: int = 0
    penalty: float = 0.0

    @property
    def arrival(self) -> int:
        return self.t0 + len(self.cells) - 1

    @property
    def steps(self) -> list[tuple[int, int]]:
        return [(self.t0 + i, v) for i, v in enumerate(self.cells)]


def heuristic(graph: FactoryGraph, v: int, goal: int) -> int:
    """Manhattan distance; one less when the goal is served from a neighbour."""
    h = graph.manhattan(v, goal)
    if not graph.traversable(goal):
        h = max(0, h - 1)
    return h


def congestion_penalty(cmap: CongestionMap | None, v: int, t: int, config: RouterConfig) -> float:
    if cmap is not None and cmap.occupancy(v, t) >= config.kappa:
        return config.penalty
    return 0.0


def reconstruct(parents: dict[tuple[int, int], tuple[int, int] | None],
                goal_state: tuple[int, int]) -> NavPath:
    cells = []
    s: tuple[int, int] | None = goal_state
    seen = 0
    while s is not None:
        cells.append(s[0])
        if s not in parents:
            raise AssertionError(f"broken parent chain at {s}")
        s = parents[s]
        seen += 1
        if seen > len(parents) + 1:
            raise AssertionError("cycle in parent chain")
    cells.reverse()
    return NavPath(t0=goal_state[1] - len(cells) + 1, cells=cells)


def plan_path(graph: FactoryGraph, start: int, goal: int, t0: int,
              cmap: CongestionMap | None = None, config: RouterConfig = RouterConfig(),
              deadline: int | None = None, soft_delay: int = 0,
              ready_slot: int | None = None) -> NavPath | None:
    """Cheapest spatiotemporal path from ``start`` at slot ``t0`` to ``goal``.

    Cost is elapsed slots plus the congestion penalty of every entered
    state. ``ready_slot`` is the pickup's preparation time if known; it sets
    ``wait_at_goal``. A goal state whose arrival misses ``deadline`` by more
    than ``soft_delay`` is skipped and the search goes on. Returns ``None``
    when no admissible path exists. States that can no longer make the
    deadline are pruned, so an infeasible deadline ends the search.
    """
    if not graph.traversable(start):
        raise ValueError(f"start {graph.coord(start)} is not traversable")
    goals = set(graph.goal_cells(goal))
    if not goals:
        return None

    def finish(path: NavPath, c: float) -> NavPath:
        path.penalty = c
        if ready_slot is not None:
            path.wait_at_goal = max(0, ready_slot - path.arrival)
        return path

    def deadline_ok(t: int) -> bool:
        return deadline is None or t - deadline <= soft_delay

    lower = min(int(graph.dist[start, g]) for g in goals)
    if lower >= graph.n:
        return None  # goal not reachable at all
    if deadline is not None and t0 + lower - deadline > soft_delay:
        return None

    h0 = heuristic(graph, start, goal)
    # heap entries: (phi, h, vertex, t, c); ties prefer lower h, vertex, t
    open_heap = [(float(h0), h0, start, t0, 0.0)]
    best_c: dict[tuple[int, int], float] = {(start, t0): 0.0}
    parents: dict[tuple[int, int], tuple[int, int] | None] = {(start, t0): None}
    closed: set[tuple[int, int]] = set()
    expansions = 0
    while open_heap:
        phi, h, v, t, c = heapq.heappop(open_heap)
        state = (v, t)
        if state in closed or c > best_c.get(state, float("inf")):
            continue
        if v in goals:
            if deadline_ok(t):
                return finish(reconstruct(parents, state), c)
            continue
        closed.add(state)
        expansions += 1
        if expansions > config.max_expansions:
            raise BudgetExhausted(f"exceeded {config.max_expansions} expansions")
        t2 = t + 1
        for w in graph.neighbors(v) + [v]:
            s2 = (w, t2)
            if s2 in closed:
                continue
            if deadline is not None and t2 + heuristic(graph, w, goal) - deadline > soft_delay:
                continue
            c2 = c + congestion_penalty(cmap, w, t2, config)
            if c2 < best_c.get(s2, float("inf")):
                best_c[s2] = c2
                parents[s2] = state
                h2 = heuristic(graph, w, goal)
                heapq.heappush(open_heap, (t2 - t0 + h2 + c2, h2, w, t2, c2))
    return None


def path_cost(path: NavPath, cmap: CongestionMap | None, config: RouterConfig) -> float:
    """Elapsed slots plus penalties of every entered state (start excluded)."""
    c = sum(congestion_penalty(cmap, v, path.t0 + i, config)
            for i, v in enumerate(path.cells) if i > 0)
    return (len(path.cells) - 1) + c


def path_is_valid(graph: FactoryGraph, cells: Iterable[int]) -> bool:
    cells = list(cells)
    for a, b in zip(cells, cells[1:]):
        if a != b and b not in graph.neighbors(a):
            return False
    return all(graph.traversable(v) for v in cells)
