"""Factory world model: grid, tasks, AGVs, timing recursions and validators.

Coordinates are ``(x, y)`` with ``y`` growing northward. A vertex index is
``y * width + x``. Production cells hold fixed robots and are not
traversable; AGVs service them from any traversable 4-neighbour.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

Vertex = tuple[int, int]

UNREACHABLE = 10**6


class FactoryError(ValueError):
    """Base class for world-model errors."""


class DisconnectedWorld(FactoryError):
    pass


class OverlappingRoles(FactoryError):
    pass


class InfeasibleQuantity(FactoryError):
    pass


class UnknownId(FactoryError):
    pass


class Role(str, Enum):
    AISLE = "aisle"
    PRODUCTION = "production"
    RESUPPLY = "resupply"


@dataclass(frozen=True)
class Layout:
    production: tuple[Vertex, ...] = ()
    resupply: tuple[Vertex, ...] = ()


def default_layout(width: int, height: int) -> Layout:
    """Production columns every other cell starting at x=2, rows 2..h-3,
    resupply stations in the four corners."""
    cols = list(range(2, width - 1, 2))
    rows = list(range(2, height - 2))
    production = tuple((x, y) for x in cols for y in rows)
    corners = {(0, 0), (width - 1, 0), (0, height - 1), (width - 1, height - 1)}
    resupply = tuple(sorted(c for c in corners if c not in production))
    return Layout(production=production, resupply=resupply)


@dataclass(frozen=True, eq=False)
class FactoryGraph:
    width: int
    height: int
    roles: tuple[Role, ...]
    edges: frozenset[tuple[int, int]]
    # all-pairs BFS over traversable cells; UNREACHABLE elsewhere
    dist: np.ndarray = field(repr=False)
    # node_dist[a, b]: slots from traversable cell a to service node b
    node_dist: np.ndarray = field(repr=False)
    node_end: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def vertices(self) -> list[Vertex]:
        return [self.coord(i) for i in range(self.n)]

    def index(self, v: Vertex) -> int:
        x, y = v
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise FactoryError(f"vertex {v} outside grid")
        return y * self.width + x

    def coord(self, i: int) -> Vertex:
        return (i % self.width, i // self.width)

    def role_of(self, v: Vertex | int) -> Role:
        i = v if isinstance(v, int) else self.index(v)
        return self.roles[i]

    @property
    def production_nodes(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r is Role.PRODUCTION]

    @property
    def resupply_nodes(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r is Role.RESUPPLY]

    def traversable(self, i: int) -> bool:
        return self.roles[i] is not Role.PRODUCTION

    def grid_neighbors(self, i: int) -> list[int]:
        x, y = self.coord(i)
        out = []
        for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < self.width and 0 <= ny < self.height:
                out.append(ny * self.width + nx)
        return out

    def neighbors(self, i: int) -> list[int]:
        """Traversable 4-neighbours."""
        return [j for j in self.grid_neighbors(i) if self.traversable(j)]

    def goal_cells(self, node: int) -> list[int]:
        """Cells at which an AGV counts as having reached ``node``."""
        if self.traversable(node):
            return [node]
        return sorted(self.neighbors(node))

    def manhattan(self, a: int, b: int) -> int:
        ax, ay = self.coord(a)
        bx, by = self.coord(b)
        return abs(ax - bx) + abs(ay - by)

    def travel(self, cell: int, node: int) -> tuple[int, int]:
        """Shortest travel time from ``cell`` to ``node`` and the cell reached."""
        return int(self.node_dist[cell, node]), int(self.node_end[cell, node])


def _bfs(n: int, adj: list[list[int]], src: int) -> np.ndarray:
    d = np.full(n, UNREACHABLE, dtype=np.int64)
    d[src] = 0
    q = deque([src])
    while q:
        u = q.popleft()
        for w in adj[u]:
            if d[w] == UNREACHABLE:
                d[w] = d[u] + 1
                q.append(w)
    return d


def build_grid(width: int, height: int, layout: Layout | None = None,
               validate: bool = True) -> FactoryGraph:
    """Build a grid factory.

    ``validate=False`` skips the traversable-connectivity check, which is
    useful for toy worlds whose production cells cut the aisle graph.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise FactoryError("grid needs at least two cells")
    layout = layout or Layout()
    roles = [Role.AISLE] * (width * height)

    def idx(v: Vertex) -> int:
        x, y = v
        if not (0 <= x < width and 0 <= y < height):
            raise FactoryError(f"layout vertex {v} outside {width}x{height} grid")
        return y * width + x

    prod = {idx(v) for v in layout.production}
    sup = {idx(v) for v in layout.resupply}
    if prod & sup:
        raise OverlappingRoles(f"cells both production and resupply: "
                               f"{sorted(prod & sup)}")
    for i in prod:
        roles[i] = Role.PRODUCTION
    for i in sup:
        roles[i] = Role.RESUPPLY

    edges = set()
    for i in range(width * height):
        x, y = i % width, i // width
        if x + 1 < width:
            edges.add((i, i + 1))
        if y + 1 < height:
            edges.add((i, i + width))

    n = width * height
    trav = [roles[i] is not Role.PRODUCTION for i in range(n)]
    adj = [[] for _ in range(n)]
    for a, b in edges:
        if trav[a] and trav[b]:
            adj[a].append(b)
            adj[b].append(a)
    for a in adj:
        a.sort()

    dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
    cells = [i for i in range(n) if trav[i]]
    for c in cells:
        dist[c] = _bfs(n, adj, c)
    if validate and cells:
        if np.any(dist[cells[0], cells] >= UNREACHABLE):
            raise DisconnectedWorld("traversable cells are not connected")
        for p in prod:
            x, y = p % width, p // width
            if not any(trav[j] for j in _grid_nbrs(x, y, width, height)):
                raise DisconnectedWorld(f"production cell {(x, y)} has no access cell")

    node_dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
    node_end = np.full((n, n), -1, dtype=np.int64)
    for b in range(n):
        if trav[b]:
            goals = [b]
        else:
            x, y = b % width, b // width
            goals = sorted(j for j in _grid_nbrs(x, y, width, height) if trav[j])
        if not goals:
            continue
        sub = dist[:, goals]
        arg = np.argmin(sub, axis=1)  # lowest index wins ties
        node_dist[:, b] = sub[np.arange(n), arg]
        node_end[:, b] = np.asarray(goals)[arg]
    for i in range(n):
        if not trav[i]:
            node_dist[i, :] = UNREACHABLE
            node_end[i, :] = -1

    return FactoryGraph(width, height, tuple(roles), frozenset(edges),
                        dist, node_dist, node_end)


def _grid_nbrs(x: int, y: int, w: int, h: int) -> list[int]:
    out = []
    for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nx, ny = x + dx, y + dy
        if 0 <= nx < w and 0 <= ny < h:
            out.append(ny * w + nx)
    return out


def node_to_node(graph: FactoryGraph, a: int, b: int) -> int:
    """Shortest travel between two service nodes (any access cell of ``a``)."""
    return int(min(graph.node_dist[c, b] for c in graph.goal_cells(a)))


# --------------------------------------------------------------------------
# tasks and AGVs


@dataclass(frozen=True)
class TransportTask:
    id: int
    pickup: int
    delivery: int
    qty_out: int
    qty_in: int
    deadline: int
    soft_delay: int
    priority: int
    line_id: int
    processing_time: int
    arrival_slot: int = 0


def generate_tasks(rng: np.random.Generator | int, lines: int, per_line: int,
                   qty_range: Sequence[int], proc_range: Sequence[int],
                   graph: FactoryGraph, *, capacity: int = 20,
                   slack_factor: float = 6.0, soft_delay: int = 20,
                   arrival_slot: int = 0, first_id: int = 0,
                   first_line: int = 0) -> list[TransportTask]:
    """Random production lines, each a chain of ``per_line`` transport tasks.

    Chain node ``j`` is drawn from production column ``j mod n_columns`` so
    material flows across the columns; the delivery node of priority ``mu``
    is the pickup node of priority ``mu + 1``.
    """
    if lines < 1 or per_line < 1:
        raise FactoryError("lines and per_line must be >= 1")
    lo, hi = int(qty_range[0]), int(qty_range[1])
    plo, phi = int(proc_range[0]), int(proc_range[1])
    if lo > hi or plo > phi or lo < 0 or plo < 0:
        raise FactoryError("bad range")
    if hi > capacity:
        raise InfeasibleQuantity(f"quantity up to {hi} exceeds AGV capacity {capacity}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))

    prod = graph.production_nodes
    if len(prod) < 2:
        raise FactoryError("need at least two production nodes")
    by_col: dict[int, list[int]] = {}
    for p in prod:
        by_col.setdefault(graph.coord(p)[0], []).append(p)
    columns = [sorted(by_col[x]) for x in sorted(by_col)]

    tasks = []
    tid = first_id
    for li in range(lines):
        chain: list[int] = []
        for j in range(per_line + 1):
            col = columns[j % len(columns)]
            choices = [c for c in col if not chain or c != chain[-1]]
            if not choices:
                choices = [c for c in prod if c != chain[-1]]
            chain.append(int(choices[rng.integers(len(choices))]))
        for mu in range(1, per_line + 1):
            p, d = chain[mu - 1], chain[mu]
            q_out = int(rng.integers(lo, hi + 1))
            q_in = int(rng.integers(lo, hi + 1))
            tp = int(rng.integers(plo, phi + 1))
            span = node_to_node(graph, p, d) + tp
            tasks.append(TransportTask(
                id=tid, pickup=p, delivery=d, qty_out=q_out, qty_in=q_in,
                deadline=int(arrival_slot + round(slack_factor * span)),
                soft_delay=soft_delay, priority=mu, line_id=first_line + li,
                processing_time=tp, arrival_slot=arrival_slot))
            tid += 1
    return tasks


class EntryKind(str, Enum):
    PICKUP = "pickup"
    DELIVERY = "delivery"
    RESUPPLY = "resupply"


@dataclass(frozen=True)
class RouteEntry:
    kind: EntryKind
    node: int
    task: int | None = None


@dataclass
class Agv:
    id: int
    location: int
    payload: int
    capacity: int = 20
    sensing_range: int = 2


@dataclass
class Assignment:
    """Task-to-AGV decision (sparse form of the binary matrix) plus routes."""
    matrix: dict[int, int]
    routes: dict[int, list[RouteEntry]]

    def tasks_of(self, k: int) -> list[int]:
        return [e.task for e in self.routes.get(k, []) if e.kind is EntryKind.PICKUP]

    def copy(self) -> "Assignment":
        return Assignment(dict(self.matrix), {k: list(r) for k, r in self.routes.items()})


def nearest_resupply(graph: FactoryGraph, cell: int, target: int) -> int:
    """Resupply node minimising the detour from ``cell`` to ``target``."""
    best, best_cost = -1, UNREACHABLE
    for u in graph.resupply_nodes:
        d1, end = graph.travel(cell, u)
        cost = d1 + graph.travel(end, target)[0]
        if cost < best_cost:
            best, best_cost = u, cost
    return best


def route_from_sequence(graph: FactoryGraph, tasks: Mapping[int, TransportTask],
                        seq: Iterable[int], start: int, payload: int,
                        capacity: int) -> list[RouteEntry]:
    """Expand an ordered task list into key nodes, inserting resupply visits
    whenever the raw-material payload cannot cover the next delivery."""
    out: list[RouteEntry] = []
    cur, pay = start, payload
    for m in seq:
        t = tasks[m]
        if pay < t.qty_in:
            u = nearest_resupply(graph, cur, t.pickup)
            if u < 0:
                raise InfeasibleQuantity(f"task {m} needs a resupply but none exists")
            out.append(RouteEntry(EntryKind.RESUPPLY, u))
            cur = graph.travel(cur, u)[1]
            pay = capacity
        out.append(RouteEntry(EntryKind.PICKUP, t.pickup, m))
        cur = graph.travel(cur, t.pickup)[1]
        out.append(RouteEntry(EntryKind.DELIVERY, t.delivery, m))
        cur = graph.travel(cur, t.delivery)[1]
        pay -= t.qty_in
    return out


# --------------------------------------------------------------------------
# timing


def arrival_update(prev_arrival: int, prev_wait: int, travel: int) -> int:
    return prev_arrival + prev_wait + travel


def preparation_time(prev_task_prep: int, upstream_delivery: int, processing: int) -> int:
    return max(prev_task_prep, upstream_delivery) + processing


def tardiness(delivery_arrival: int, deadline: int) -> int:
    return max(0, delivery_arrival - deadline)


@dataclass
class ScheduleTimeline:
    arrivals: dict[int, list[int]]
    waits: dict[int, list[int]]
    prep: dict[int, int]
    tardiness: dict[int, int]
    makespan: int
    delivered_at: dict[int, int] = field(default_factory=dict)


def makespan(timeline: ScheduleTimeline, assignment: Assignment) -> int:
    if not assignment.matrix:
        return 0
    out = 0
    for m in assignment.matrix:
        if m not in timeline.delivered_at:
            raise KeyError(f"missing arrival for task {m}")
        out = max(out, timeline.delivered_at[m])
    return out


class RobotQueue:
    """Production robot at one node: prepares products in order of input
    readiness, one at a time."""

    def __init__(self) -> None:
        self.free_at = 0
        self.pending: list[tuple[int, int, int, int]] = []  # (ready, mu, id, t_p)

    def mark_ready(self, task: TransportTask, slot: int) -> None:
        self.pending.append((slot, task.priority, task.id, task.processing_time))
        self.pending.sort()

    def tick(self, slot: int, prep: dict[int, int]) -> None:
        while self.pending and self.free_at <= slot and self.pending[0][0] <= slot:
            ready, _, tid, tp = self.pending.pop(0)
            done = preparation_time(self.free_at, ready, tp)
            prep[tid] = done
            self.free_at = done


def line_heads_and_successors(tasks: Iterable[TransportTask]
                              ) -> tuple[list[TransportTask], dict[int, TransportTask]]:
    """Line-head tasks and a map task id -> downstream task of its line."""
    by_line: dict[int, dict[int, TransportTask]] = {}
    for t in tasks:
        by_line.setdefault(t.line_id, {})[t.priority] = t
    heads, succ = [], {}
    for chain in by_line.values():
        mus = sorted(chain)
        heads.append(chain[mus[0]])
        for a, b in zip(mus, mus[1:]):
            succ[chain[a].id] = chain[b]
    return heads, succ


def compute_timeline(assignment: Assignment, tasks: Sequence[TransportTask],
                     graph: FactoryGraph, agvs: Sequence[Agv], start_slot: int = 0,
                     slot_cap: int = 100_000) -> ScheduleTimeline:
    """Shortest-path timeline of an assignment under the arrival recursion
    and preparation-time coupling (collisions and congestion ignored)."""
    by_id = {t.id: t for t in tasks}
    agv_by = {a.id: a for a in agvs}
    robots: dict[int, RobotQueue] = {}
    prep: dict[int, int] = {}
    heads, succ = line_heads_and_successors(tasks)
    for h in heads:
        robots.setdefault(h.pickup, RobotQueue()).mark_ready(h, max(start_slot, h.arrival_slot))

    arrivals = {k: [] for k in assignment.routes}
    waits = {k: [] for k in assignment.routes}
    delivered: dict[int, int] = {}
    # per AGV: (entry index, cell, slot at which the current entry is reached)
    state = {}
    for k, route in assignment.routes.items():
        cell = agv_by[k].location
        if route:
            d, end = graph.travel(cell, route[0].node)
            state[k] = [0, end, start_slot + d]
    slot = start_slot
    while state and slot <= start_slot + slot_cap:
        for node, q in robots.items():
            q.tick(slot, prep)
        progressed = True
        while progressed:
            progressed = False
            for k in sorted(state):
                ei, cell, reach = state[k]
                route = assignment.routes[k]
                if ei >= len(route) or reach > slot:
                    continue
                e = route[ei]
                if len(arrivals[k]) == ei:
                    arrivals[k].append(reach)
                if e.kind is EntryKind.PICKUP:
                    pt = prep.get(e.task)
                    if pt is None or pt > slot:
                        continue
                    waits[k].append(max(0, pt - reach))
                    leave = max(reach, pt)
                else:
                    waits[k].append(0)
                    leave = reach
                    if e.kind is EntryKind.DELIVERY:
                        delivered[e.task] = reach
                        nxt = succ.get(e.task)
                        if nxt is not None:
                            robots.setdefault(nxt.pickup, RobotQueue()).mark_ready(nxt, reach)
                            robots[nxt.pickup].tick(slot, prep)
                if ei + 1 < len(route):
                    d, end = graph.travel(cell, route[ei + 1].node)
                    state[k] = [ei + 1, end, arrival_update(reach, leave - reach, d)]
                else:
                    del state[k]
                progressed = True
        slot += 1
    if state:
        raise RuntimeError("timeline did not settle (unschedulable dependencies)")
    tard = {m: tardiness(delivered[m], by_id[m].deadline) for m in delivered}
    ms = max(delivered.values(), default=0)
    return ScheduleTimeline(arrivals, waits, prep, tard, ms, delivered)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    constraint: str
    task: int | None
    detail: str = ""


def validate_assignment(assignment: Assignment, tasks: Sequence[TransportTask],
                        agvs: Sequence[Agv], graph: FactoryGraph | None = None,
                        start_slot: int = 0) -> list[Violation]:
    """Check uniqueness, tardiness, payload, capacity and binarity constraints.

    Tardiness needs ``graph`` to build the timeline; without it that check
    is skipped.
    """
    by_id = {t.id: t for t in tasks}
    agv_by = {a.id: a for a in agvs}
    for m in assignment.matrix:
        if m not in by_id:
            raise UnknownId(f"unknown task id {m}")
    for k in assignment.routes:
        if k not in agv_by:
            raise UnknownId(f"unknown AGV id {k}")
    out: list[Violation] = []

    for m, k in assignment.matrix.items():
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
            out.append(Violation("4e", m, f"non-binary entry {k!r}"))
        elif k not in agv_by:
            raise UnknownId(f"unknown AGV id {k}")

    holders: dict[int, list[int]] = {}
    for k, route in assignment.routes.items():
        for e in route:
            if e.kind is EntryKind.PICKUP:
                holders.setdefault(e.task, []).append(k)
    for t in tasks:
        h = holders.get(t.id, [])
        if len(h) != 1 or assignment.matrix.get(t.id) not in h:
            out.append(Violation("4a", t.id, f"held by {h}"))

    for k, route in assignment.routes.items():
        agv = agv_by[k]
        pay, carrying = agv.payload, None
        for e in route:
            if e.kind is EntryKind.RESUPPLY:
                pay = agv.capacity
            elif e.kind is EntryKind.PICKUP:
                t = by_id[e.task]
                if carrying is not None:
                    out.append(Violation("precedence", t.id, "pickup while carrying"))
                if agv.capacity < t.qty_out:
                    out.append(Violation("4d", t.id, "no room for product"))
                carrying = t.id
            else:
                t = by_id[e.task]
                if carrying != t.id:
                    out.append(Violation("precedence", t.id, "delivery before pickup"))
                if pay < t.qty_in:
                    out.append(Violation("4c", t.id, f"payload {pay} < {t.qty_in}"))
                pay -= t.qty_in
                carrying = None

    if graph is not None and not any(v.constraint == "4a" for v in out):
        tl = compute_timeline(assignment, tasks, graph, agvs, start_slot)
        for m, ta in sorted(tl.tardiness.items()):
            if ta > by_id[m].soft_delay:
                out.append(Violation("4b", m, f"tardiness {ta}"))
    return out
