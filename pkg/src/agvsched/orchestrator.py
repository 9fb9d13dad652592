"""Closed-loop fleet simulation: uplink reports, edge-side congestion maps,
broadcast, per-AGV planning, conflict resolution and task execution.

One call to :func:`step` advances the world by one slot. The four operating
modes share the execution model and differ in what each AGV knows:

* ``uncontrolled``: shortest paths, no coordination. Moves always execute;
  collisions are counted and stall the AGVs involved.
* ``local_only``: planning and yielding from local sensing only. An AGV that
  yields to another one waits an extra safety hold because it cannot see
  the other's intention, and it also stops short when a higher-ranked
  moving neighbour might cut into its next cell.
* ``comm_realistic``: reports go through the contention channel; the edge
  builds a congestion map from delivered routes and broadcasts it to the
  AGVs it heard from. Yielding AGVs skip the safety hold when their latest
  snapshot correctly predicts the other AGV's next cell.
* ``comm_ideal``: as above with every attempted report delivered.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .config import ConfigError
from .factory import (
    Agv,
    EntryKind,
    FactoryGraph,
    RobotQueue,
    RouteEntry,
    TransportTask,
    line_heads_and_successors,
    tardiness,
)
from .mrta import AgvStart, SaParams, sa_solve
from .netsim import ChannelConfig, Packet, PacketKind, broadcast_downlink, uplink_slot
from .router import (
    BudgetExhausted,
    CongestionMap,
    RouterConfig,
    merge_maps,
    plan_path,
)


class Mode(str, enum.Enum):
    UNCONTROLLED = "uncontrolled"
    LOCAL_ONLY = "local_only"
    COMM_IDEAL = "comm_ideal"
    COMM_REALISTIC = "comm_realistic"

    @property
    def uses_channel(self) -> bool:
        return self in (Mode.COMM_IDEAL, Mode.COMM_REALISTIC)


class Heading(str, enum.Enum):
    N = "N"
    S = "S"
    E = "E"
    W = "W"
    STAY = "stay"


PARK_LIMIT = 2  # idle AGVs per parking cell; one slot stays free for traffic

HEADING_RANK = {Heading.N: 0, Heading.S: 1, Heading.E: 2, Heading.W: 3, Heading.STAY: 4}


def heading_of(graph: FactoryGraph, u: int, v: int) -> Heading:
    if u == v:
        return Heading.STAY
    (x0, y0), (x1, y1) = graph.coord(u), graph.coord(v)
    if y1 > y0:
        return Heading.N
    if y1 < y0:
        return Heading.S
    return Heading.E if x1 > x0 else Heading.W


class Action(str, enum.Enum):
    PROCEED = "proceed"
    STAY = "stay"


@dataclass(frozen=True)
class LoopSettings:
    mode: Mode = Mode.COMM_IDEAL
    channel: ChannelConfig = ChannelConfig()
    router: RouterConfig = RouterConfig()
    horizon: int = 40
    sensing_range: int = 2
    patience: int = 10
    safety_hold: int = 2
    collision_stall: int = 10
    staleness_cap: int | None = None  # None: twice the horizon
    slot_cap: int = 5000
    sa: SaParams = SaParams()
    log_events: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def stale_after(self) -> int:
        return self.staleness_cap if self.staleness_cap is not None else 2 * self.horizon


# --------------------------------------------------------------------------
# observation and maps


@dataclass
class Observation:
    location: int
    neighbors: dict[int, tuple[int, Heading]]  # AGV id -> (cell, last heading)
    visible: list[int]


def cells_within(graph: FactoryGraph, cell: int, r: int) -> list[int]:
    x0, y0 = graph.coord(cell)
    out = []
    for dy in range(-r, r + 1):
        span = r - abs(dy)
        for dx in range(-span, span + 1):
            x, y = x0 + dx, y0 + dy
            if 0 <= x < graph.width and 0 <= y < graph.height:
                out.append(y * graph.width + x)
    return sorted(out)


def local_observation(world: "WorldState", k: int, r: int | None = None) -> Observation:
    """What AGV ``k`` senses: AGVs and vertices within Manhattan radius ``r``."""
    a = world.agvs[k]
    r = world.settings.sensing_range if r is None else r
    vis = cells_within(world.graph, a.cell, r)
    nb = {}
    for c in vis:
        for j in world.occupants.get(c, ()):
            if j != k:
                other = world.agvs[j]
                nb[j] = (other.cell, other.heading)
    return Observation(a.cell, nb, vis)


def extrapolate(graph: FactoryGraph, cell: int, heading: Heading) -> int:
    x, y = graph.coord(cell)
    dx, dy = {Heading.N: (0, 1), Heading.S: (0, -1), Heading.E: (1, 0),
              Heading.W: (-1, 0), Heading.STAY: (0, 0)}[heading]
    x, y = x + dx, y + dy
    if 0 <= x < graph.width and 0 <= y < graph.height:
        v = y * graph.width + x
        if graph.traversable(v):
            return v
    return cell


def local_map(graph: FactoryGraph, obs: Observation, slot: int, horizon: int = 2) -> CongestionMap:
    """Map from sensed neighbours.

    A moving neighbour occupies its cell now and, next slot, either that
    cell or the one ahead along its last heading. A standing neighbour is
    assumed to stay for the whole horizon; otherwise waiting one more slot
    would always look free and a planner facing a jam would never move.
    """
    m = CongestionMap(graph.n, max(2, horizon), slot)
    for j in sorted(obs.neighbors):
        cell, hd = obs.neighbors[j]
        if hd is Heading.STAY:
            m.counts[:, cell] += 1
            continue
        m.counts[0, cell] += 1
        nxt = extrapolate(graph, cell, hd)
        m.counts[1, nxt] += 1
        if nxt != cell:
            m.counts[1, cell] += 1
    return m


@dataclass(frozen=True)
class RegisteredRoute:
    reported_at: int
    t0: int
    cells: tuple[int, ...]

    def cell_at(self, t: int) -> int | None:
        i = t - self.t0
        if 0 <= i < len(self.cells):
            return self.cells[i]
        return None

    def predicts_move(self, u: int, v: int) -> bool:
        """Whether the announced route steps from ``u`` to ``v`` at some point."""
        c = self.cells
        for i in range(len(c) - 1):
            if c[i] == u:
                j = i + 1
                while j < len(c) and c[j] == u:
                    j += 1
                if j < len(c) and c[j] == v:
                    return True
        return False


def build_global_map(registry: Mapping[int, RegisteredRoute], slot: int, horizon: int,
                     n_vertices: int, staleness_cap: int | None = None) -> CongestionMap:
    """Count registered routes per (vertex, slot) for slots ``slot .. slot+horizon-1``."""
    m = CongestionMap(n_vertices, horizon, slot)
    for k in sorted(registry):
        r = registry[k]
        if staleness_cap is not None and slot - r.reported_at > staleness_cap:
            continue
        m.add_path(r.t0, r.cells)
    return m


@dataclass
class Snapshot:
    """A received global map plus the route registry it was built from."""
    slot: int
    cmap: CongestionMap
    routes: dict[int, RegisteredRoute]


# --------------------------------------------------------------------------
# conflicts


@dataclass(frozen=True)
class Conflict:
    kind: str  # "vertex" or "edge"
    agvs: tuple[int, ...]
    cell: int | None = None


def detect_conflicts(moves: Mapping[int, tuple[int, int]], kappa: int) -> list[Conflict]:
    """Vertex conflicts (several AGVs entering one cell, or entrants that
    would push it past ``kappa``) and edge swaps, from intended moves."""
    entrants: dict[int, list[int]] = {}
    staying: dict[int, int] = {}
    for k, (u, v) in moves.items():
        if u == v:
            staying[v] = staying.get(v, 0) + 1
        else:
            entrants.setdefault(v, []).append(k)
    out = []
    for cell in sorted(entrants):
        ks = sorted(entrants[cell])
        if len(ks) >= 2 or staying.get(cell, 0) + len(ks) > kappa:
            out.append(Conflict("vertex", tuple(ks), cell))
    by_edge = {}
    for k, (u, v) in moves.items():
        if u != v:
            by_edge.setdefault((u, v), []).append(k)
    for (u, v), ks in sorted(by_edge.items()):
        if u < v and (v, u) in by_edge:
            out.append(Conflict("edge", tuple(sorted(ks + by_edge[(v, u)]))))
    return out


def priority_key(k: int, headings: Mapping[int, Heading]) -> tuple[int, int]:
    return HEADING_RANK[Heading(headings[k])], k


def resolve_right_of_way(agvs: Iterable[int], headings: Mapping[int, Heading]) -> dict[int, Action]:
    """Only the top AGV under N > S > E > W (movers before stayers, then
    lower id) proceeds."""
    ks = sorted(agvs, key=lambda k: priority_key(k, headings))
    return {k: Action.PROCEED if i == 0 else Action.STAY for i, k in enumerate(ks)}


def settle_moves(moves: Mapping[int, tuple[int, int]], headings: Mapping[int, Heading],
                 kappa: int) -> tuple[dict[int, int], dict[int, int | None]]:
    """Demote moves to stays until no swap, no cell with several entrants
    and no cell above ``kappa`` remain.

    Returns the final target per AGV and, for each demoted AGV, the AGV it
    yielded to (``None`` when it was stopped by a full cell).
    """
    final = {k: v for k, (u, v) in moves.items()}
    origin = {k: u for k, (u, v) in moves.items()}
    yielded: dict[int, int | None] = {}
    changed = True
    while changed:
        changed = False
        by_edge = {}
        for k in sorted(final):
            if final[k] != origin[k]:
                by_edge.setdefault((origin[k], final[k]), []).append(k)
        for (u, v), ks in sorted(by_edge.items()):
            back = by_edge.get((v, u))
            if not back or u > v:
                continue
            group = [k for k in ks + back if final[k] != origin[k]]
            if len(group) < 2:
                continue
            verdict = resolve_right_of_way(group, headings)
            win = next(k for k, a in verdict.items() if a is Action.PROCEED)
            for k, a in verdict.items():
                if a is Action.STAY:
                    final[k] = origin[k]
                    yielded.setdefault(k, win)
                    changed = True
        entrants: dict[int, list[int]] = {}
        stay_count: dict[int, int] = {}
        for k in final:
            if final[k] == origin[k]:
                stay_count[final[k]] = stay_count.get(final[k], 0) + 1
            else:
                entrants.setdefault(final[k], []).append(k)
        for cell in sorted(entrants):
            ks = entrants[cell]
            win = None
            if len(ks) >= 2:
                verdict = resolve_right_of_way(ks, headings)
                win = next(k for k, a in verdict.items() if a is Action.PROCEED)
                for k, a in verdict.items():
                    if a is Action.STAY:
                        final[k] = origin[k]
                        yielded.setdefault(k, win)
                        changed = True
                ks = [win]
            if stay_count.get(cell, 0) + len(ks) > kappa:
                for k in ks:
                    final[k] = origin[k]
                    yielded.setdefault(k, None)
                    changed = True
    return final, yielded


# --------------------------------------------------------------------------
# world state


@dataclass
class AgvRuntime:
    id: int
    cell: int
    payload: int
    capacity: int
    route: list[RouteEntry] = field(default_factory=list)
    path: list[int] | None = None  # path[i] is the intended cell i slots from now
    carrying: int | None = None
    heading: Heading = Heading.STAY
    hold: int = 0
    stall: int = 0
    stuck: int = 0
    avoid: dict[int, int] = field(default_factory=dict)  # cell -> until slot
    park: int | None = None  # idle AGVs wait here
    nudged: bool = False  # parked in the way: step aside next slot
    staging: bool = False  # next pickup not in preparation yet
    snapshot: Snapshot | None = None
    fresh_map: bool = False
    reported: bool = False


@dataclass
class Wave:
    slot: int
    tasks: list[TransportTask]


@dataclass
class Counters:
    uplink_attempts: int = 0
    uplink_delivered: int = 0
    conflicts: int = 0
    yields: int = 0
    holds: int = 0
    holds_waived: int = 0
    caution_stops: int = 0
    collisions: int = 0
    swaps_executed: int = 0
    occupancy_violations: int = 0
    max_occupancy: int = 0
    fallback_slots: int = 0
    agv_slots: int = 0
    replans: int = 0
    patience_replans: int = 0
    budget_fallbacks: int = 0
    sa_runs: int = 0


@dataclass
class WorldState:
    slot: int
    graph: FactoryGraph
    settings: LoopSettings
    agvs: dict[int, AgvRuntime]
    waves: list[Wave]
    tasks: dict[int, TransportTask] = field(default_factory=dict)
    released: set[int] = field(default_factory=set)
    delivered_at: dict[int, int] = field(default_factory=dict)
    picked_at: dict[int, int] = field(default_factory=dict)
    prep: dict[int, int] = field(default_factory=dict)
    robots: dict[int, RobotQueue] = field(default_factory=dict)
    successor: dict[int, TransportTask] = field(default_factory=dict)
    assignment: dict[int, int] = field(default_factory=dict)
    registry: dict[int, RegisteredRoute] = field(default_factory=dict)
    occupants: dict[int, list[int]] = field(default_factory=dict)
    counters: Counters = field(default_factory=Counters)
    events: list[dict] = field(default_factory=list)
    rng_uplink: np.random.Generator | None = None
    rng_sa: np.random.Generator | None = None
    next_wave: int = 0
    pending_log: dict = field(default_factory=dict)
    park_spots: list[int] = field(default_factory=list)
    park_claims: dict[int, set[int]] = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.next_wave >= len(self.waves) and len(self.delivered_at) == len(self.tasks)


def make_world(graph: FactoryGraph, agvs: Sequence[Agv], waves: Sequence[Wave],
               settings: LoopSettings, seed: int) -> WorldState:
    ss = np.random.SeedSequence(seed).spawn(2)
    rt = {a.id: AgvRuntime(a.id, a.location, a.payload, a.capacity) for a in agvs}
    w = WorldState(0, graph, settings, rt, sorted(waves, key=lambda x: x.slot),
                   rng_uplink=np.random.default_rng(ss[0]),
                   rng_sa=np.random.default_rng(ss[1]))
    for a in rt.values():
        if not graph.traversable(a.cell):
            raise ValueError(f"AGV {a.id} starts on a non-traversable cell")
    w.park_spots = park_cells(graph)
    _reindex(w)
    if settings.mode is not Mode.UNCONTROLLED:
        worst = max((len(v) for v in w.occupants.values()), default=0)
        if worst > settings.router.kappa:
            raise ValueError("initial placement exceeds the cell capacity")
    _release_waves(w)
    _settle(w)
    return w


def _reindex(w: WorldState) -> None:
    occ: dict[int, list[int]] = {}
    for k in sorted(w.agvs):
        occ.setdefault(w.agvs[k].cell, []).append(k)
    w.occupants = occ


# --------------------------------------------------------------------------
# task flow


def _release_waves(w: WorldState) -> None:
    fresh = []
    while w.next_wave < len(w.waves) and w.waves[w.next_wave].slot <= w.slot:
        fresh.extend(w.waves[w.next_wave].tasks)
        w.next_wave += 1
    if not fresh:
        return
    for t in fresh:
        if t.id in w.tasks:
            raise ValueError(f"duplicate task id {t.id}")
        w.tasks[t.id] = t
    heads, succ = line_heads_and_successors(fresh)
    w.successor.update(succ)
    for h in heads:
        w.robots.setdefault(h.pickup, RobotQueue()).mark_ready(h, w.slot)
    _reassign(w)


def _reassign(w: WorldState) -> None:
    """Run the annealer over every task not yet picked up and push the new
    task routes to the fleet."""
    g = w.graph
    open_tasks = [w.tasks[m] for m in sorted(w.tasks)
                  if m not in w.picked_at and m not in w.delivered_at]
    starts, agvs = {}, []
    for k in sorted(w.agvs):
        a = w.agvs[k]
        agvs.append(Agv(k, a.cell, a.payload, a.capacity))
        if a.carrying is not None:
            t = w.tasks[a.carrying]
            d, end = g.travel(a.cell, t.delivery)
            starts[k] = AgvStart(end, d, a.payload - t.qty_in)
        else:
            starts[k] = AgvStart(a.cell, 0, a.payload)
    if not open_tasks:
        return
    res = sa_solve(open_tasks, agvs, g, w.settings.sa, w.rng_sa, starts)
    w.counters.sa_runs += 1
    pkt = Packet(PacketKind.TASK_ROUTE, -1, w.slot, payload=res.assignment.routes)
    for k in sorted(broadcast_downlink(pkt, w.agvs)):
        a = w.agvs[k]
        head = []
        if a.carrying is not None:
            head = [RouteEntry(EntryKind.DELIVERY, w.tasks[a.carrying].delivery, a.carrying)]
        a.route = head + list(res.assignment.routes.get(k, []))
        a.path = None
    for m, k in res.assignment.matrix.items():
        w.assignment[m] = k


def _settle(w: WorldState) -> None:
    """Apply every pickup, delivery and resupply possible at the current slot."""
    t = w.slot
    for node in sorted(w.robots):
        w.robots[node].tick(t, w.prep)
    progressed = True
    while progressed:
        progressed = False
        for k in sorted(w.agvs):
            a = w.agvs[k]
            if not a.route:
                continue
            e = a.route[0]
            if a.cell not in w.graph.goal_cells(e.node):
                continue
            if e.kind is EntryKind.PICKUP:
                pt = w.prep.get(e.task)
                if pt is None or pt > t:
                    continue
                a.carrying = e.task
                w.picked_at[e.task] = t
                _log(w, "pickups", e.task)
            elif e.kind is EntryKind.DELIVERY:
                task = w.tasks[e.task]
                a.payload -= task.qty_in
                if a.payload < 0:
                    raise AssertionError(f"AGV {k} delivered without enough material")
                a.carrying = None
                w.delivered_at[e.task] = t
                _log(w, "deliveries", e.task)
                nxt = w.successor.get(e.task)
                if nxt is not None:
                    w.robots.setdefault(nxt.pickup, RobotQueue()).mark_ready(nxt, t)
                    w.robots[nxt.pickup].tick(t, w.prep)
            else:
                a.payload = a.capacity
            a.route.pop(0)
            a.path = None
            progressed = True


def _log(w: WorldState, key: str, value) -> None:
    if w.settings.log_events:
        w.pending_log.setdefault(key, []).append(value)


# --------------------------------------------------------------------------
# planning


def shortest_cells(graph: FactoryGraph, start: int, goal: int) -> list[int]:
    """A shortest cell sequence to any access cell of ``goal`` (BFS table walk)."""
    goals = graph.goal_cells(goal)
    target = min(goals, key=lambda g: (graph.dist[start, g], g))
    cells = [start]
    cur = start
    while cur != target:
        cur = min((v for v in graph.neighbors(cur)
                   if graph.dist[v, target] == graph.dist[cur, target] - 1))
        cells.append(cur)
    return cells


def _planning_map(w: WorldState, a: AgvRuntime) -> CongestionMap | None:
    mode = w.settings.mode
    if mode is Mode.UNCONTROLLED:
        return None
    g = w.graph
    t = w.slot
    cmap = local_map(g, local_observation(w, a.id), t, w.settings.horizon)
    if mode.uses_channel and a.snapshot is not None:
        glob = a.snapshot.cmap.copy()
        own = a.snapshot.routes.get(a.id)
        if own is not None:
            glob.add_path(own.t0, own.cells, -1)
        cmap = merge_maps(glob, cmap)
    if a.avoid:
        extra = CongestionMap(g.n, w.settings.patience + 1, t)
        for cell, until in sorted(a.avoid.items()):
            for d in range(0, min(until - t, extra.horizon - 1) + 1):
                extra.counts[d, cell] = w.settings.router.kappa
        cmap = merge_maps(cmap, extra)
    return cmap


def _plan(w: WorldState, a: AgvRuntime) -> None:
    g = w.graph
    goal = _goal_of(a)
    w.counters.replans += 1
    if w.settings.mode is Mode.UNCONTROLLED:
        a.path = shortest_cells(g, a.cell, goal)
        return
    cmap = _planning_map(w, a)
    deadline = soft = None
    ready = None
    e = a.route[0] if a.route else None
    if e is not None and e.kind is EntryKind.DELIVERY:
        task = w.tasks[e.task]
        deadline, soft = task.deadline, task.soft_delay
    elif e is not None and e.kind is EntryKind.PICKUP:
        ready = w.prep.get(e.task)
    try:
        nav = None
        if deadline is not None:
            nav = plan_path(g, a.cell, goal, w.slot, cmap, w.settings.router,
                            deadline=deadline, soft_delay=soft)
        if nav is None:
            nav = plan_path(g, a.cell, goal, w.slot, cmap, w.settings.router,
                            ready_slot=ready)
    except BudgetExhausted:
        nav = None
    if nav is None:
        w.counters.budget_fallbacks += 1
        a.path = shortest_cells(g, a.cell, goal)
    else:
        a.path = list(nav.cells)


def _path_blocked(cmap: CongestionMap | None, path: list[int], slot: int, kappa: int,
                  lookahead: int) -> bool:
    if cmap is None:
        return False
    for i in range(1, min(len(path), lookahead + 1)):
        if cmap.occupancy(path[i], slot + i) >= kappa:
            return True
    return False


# --------------------------------------------------------------------------
# the slot loop


def _uplink(w: WorldState) -> None:
    s = w.settings
    out = uplink_slot(sorted(w.agvs), w.slot, s.channel, w.rng_uplink)
    delivered = out.attempted if s.mode is Mode.COMM_IDEAL else out.delivered
    w.counters.uplink_attempts += len(out.attempted)
    w.counters.uplink_delivered += len(delivered)
    for k in sorted(delivered):
        a = w.agvs[k]
        cells = tuple(a.path) if a.path else (a.cell,)
        pad = s.horizon - len(cells)
        if pad > 0 and _parks(a) and _at_goal(w, a):
            cells = cells + (cells[-1],) * pad  # idle: stays put
        elif pad > 0:
            cells = cells + (cells[-1],)
        w.registry[k] = RegisteredRoute(w.slot, w.slot, cells)
        a.reported = True


def _broadcast(w: WorldState) -> None:
    s = w.settings
    if w.slot % s.channel.D != 0:
        return
    recipients = [k for k in sorted(w.agvs) if w.agvs[k].reported]
    for k in w.agvs:
        w.agvs[k].fresh_map = False
    if not recipients:
        return
    cmap = build_global_map(w.registry, w.slot, s.horizon, w.graph.n, s.stale_after)
    routes = {k: r for k, r in w.registry.items() if w.slot - r.reported_at <= s.stale_after}
    snap = Snapshot(w.slot, cmap, routes)
    pkt = Packet(PacketKind.GLOBAL_MAP, -1, w.slot, payload=snap)
    for k in sorted(broadcast_downlink(pkt, recipients)):
        a = w.agvs[k]
        a.snapshot = snap
        a.fresh_map = True
        a.reported = False


def _goal_of(a: AgvRuntime) -> int | None:
    if a.route and not a.staging:
        return a.route[0].node
    return a.park


def _parks(a: AgvRuntime) -> bool:
    """Idle, or waiting for a product whose preparation has not started."""
    return not a.route or a.staging


def _at_goal(w: WorldState, a: AgvRuntime) -> bool:
    goal = _goal_of(a)
    return goal is None or a.cell in w.graph.goal_cells(goal)


def park_cells(graph: FactoryGraph) -> list[int]:
    """Traversable cells that serve no node, where idle AGVs can wait."""
    service = set(graph.resupply_nodes)
    for p in graph.production_nodes:
        service.update(graph.goal_cells(p))
    return [v for v in range(graph.n) if graph.traversable(v) and v not in service]


def _choose_park(w: WorldState, a: AgvRuntime) -> None:
    g = w.graph
    options = [v for v in w.park_spots if v not in a.avoid
               and len(w.park_claims.get(v, ())) < PARK_LIMIT]
    if not options:
        return
    if a.route:
        # staging: close to the pickup it will serve
        node = a.route[0].node
        best = min(options, key=lambda v: (int(g.node_dist[v, node]), int(g.dist[a.cell, v]), v))
    elif a.cell in options:
        best = a.cell
    else:
        best = min(options, key=lambda v: (int(g.dist[a.cell, v]), v))
    a.park = best
    w.park_claims.setdefault(best, set()).add(a.id)


def _release_park(w: WorldState, a: AgvRuntime) -> None:
    if a.park is not None:
        w.park_claims.get(a.park, set()).discard(a.id)
        a.park = None


def _side_step(w: WorldState, a: AgvRuntime) -> int:
    """Least crowded neighbour cell, preferring cells that serve no node."""
    g = w.graph
    spots = set(w.park_spots)
    options = [v for v in g.neighbors(a.cell)
               if len(w.occupants.get(v, ())) < w.settings.router.kappa]
    if not options:
        return a.cell
    return min(options, key=lambda v: (v not in spots, len(w.occupants.get(v, ())), v))


def _decide(w: WorldState) -> dict[int, tuple[int, int]]:
    s = w.settings
    kappa = s.router.kappa
    moves = {}
    for k in sorted(w.agvs):
        a = w.agvs[k]
        if a.avoid:
            a.avoid = {c: u for c, u in a.avoid.items() if u >= w.slot}
        if s.mode.uses_channel:
            w.counters.agv_slots += 1
            if not a.fresh_map:
                w.counters.fallback_slots += 1
        staging = bool(a.route) and a.route[0].kind is EntryKind.PICKUP \
            and w.prep.get(a.route[0].task) is None
        if staging != a.staging or (a.route and a.park is not None and not staging):
            a.staging = staging
            _release_park(w, a)
            a.path = None
        if not _parks(a):
            a.nudged = False
        elif a.nudged:
            a.nudged = False
            _release_park(w, a)
            a.avoid[a.cell] = w.slot + s.patience
            moves[k] = (a.cell, _side_step(w, a))
            a.path = None
            continue
        elif a.park is None and w.park_spots:
            _choose_park(w, a)
            a.path = None
        if _at_goal(w, a):
            a.stuck = 0
            moves[k] = (a.cell, a.cell)
            continue
        if a.stuck > s.patience and s.mode is not Mode.UNCONTROLLED:
            # give up on the blocked cell for a while and look for another way
            nxt = next((c for c in (a.path or [])[1:] if c != a.cell), None)
            if nxt is not None:
                a.avoid[nxt] = w.slot + s.patience
            a.stuck = 0
            a.path = None
            w.counters.patience_replans += 1
        if a.path is None or len(a.path) == 0 or a.path[0] != a.cell:
            _plan(w, a)
        elif s.mode is not Mode.UNCONTROLLED and len(a.path) > 1:
            # re-check the remaining path against what the AGV knows now
            look = s.horizon if (s.mode.uses_channel and a.fresh_map) else 1
            if _path_blocked(_planning_map(w, a), a.path, w.slot, kappa, look):
                _plan(w, a)
        if a.hold > 0 or a.stall > 0:
            moves[k] = (a.cell, a.cell)
            continue
        nxt = a.path[1] if len(a.path) > 1 else a.cell
        moves[k] = (a.cell, nxt)
    return moves


def _known_intent(a: AgvRuntime, j: int, cell: int) -> bool:
    """Whether ``a``'s last snapshot holds a route for ``j`` through ``cell``."""
    if a.snapshot is None:
        return False
    r = a.snapshot.routes.get(j)
    return r is not None and cell in r.cells


def _caution(w: WorldState, moves: dict[int, tuple[int, int]]) -> None:
    """Stop moves that a sensed AGV of higher rank might cut across.

    A moving neighbour that could step into the target cell (or swap with
    us) is a risk unless its intention is known from a received route. With
    its intention unknown the lower-ranked AGV stops for ``safety_hold``
    slots, ranking the neighbour by the heading it was last seen with.
    """
    s = w.settings
    g = w.graph
    mine = {k: heading_of(g, u, v) for k, (u, v) in moves.items()}
    stops = []
    for k in sorted(moves):
        u, v = moves[k]
        if u == v:
            continue
        a = w.agvs[k]
        rank = (HEADING_RANK[mine[k]], k)
        obs = local_observation(w, k)
        for j in sorted(obs.neighbors):
            cell, seen = obs.neighbors[j]
            if seen is Heading.STAY or (HEADING_RANK[seen], j) > rank:
                continue
            if cell != v and v not in g.neighbors(cell):
                continue
            if s.mode.uses_channel and _known_intent(a, j, cell):
                continue
            stops.append(k)
            break
    for k in stops:
        u, _ = moves[k]
        moves[k] = (u, u)
        w.agvs[k].hold = s.safety_hold  # this slot counts as the first
        w.counters.caution_stops += 1


def _resolve(w: WorldState, moves: dict[int, tuple[int, int]]) -> dict[int, int]:
    s = w.settings
    g = w.graph
    kappa = s.router.kappa
    if s.mode is not Mode.UNCONTROLLED:
        _caution(w, moves)
    headings = {k: heading_of(g, u, v) for k, (u, v) in moves.items()}
    conflicts = detect_conflicts(moves, kappa)
    w.counters.conflicts += len(conflicts)
    if conflicts:
        _log(w, "conflicts", len(conflicts))

    if s.mode is Mode.UNCONTROLLED:
        final = {k: v for k, (u, v) in moves.items()}
        stall: dict[int, int] = {}
        counts: dict[int, int] = {}
        for v in final.values():
            counts[v] = counts.get(v, 0) + 1
        for c in conflicts:
            if c.kind == "edge":
                w.counters.swaps_executed += 1
            if c.kind == "edge" or len(c.agvs) >= 2 or counts[c.cell] > kappa:
                w.counters.collisions += 1
                group = set(c.agvs)
                if c.cell is not None and counts[c.cell] > kappa:
                    group.update(k for k in final if final[k] == c.cell)
                # the wreck is cleared one AGV per slot in right-of-way
                # order, so AGVs that collided do not restart in lockstep
                for r, k in enumerate(sorted(group, key=lambda k: priority_key(k, headings))):
                    stall[k] = max(stall.get(k, 0), s.collision_stall + r)
        for k, n in stall.items():
            w.agvs[k].stall = n
        return final

    final, yielded = settle_moves(moves, headings, kappa)
    for k in sorted(yielded):
        a = w.agvs[k]
        win = yielded[k]
        w.counters.yields += 1
        if win is None:
            # blocked by a full cell: idle AGVs in there make way
            for j in w.occupants.get(moves[k][1], ()):
                other = w.agvs[j]
                if _parks(other) and final[j] == other.cell:
                    other.nudged = True
        if win is not None:
            waived = False
            if s.mode.uses_channel and a.snapshot is not None:
                r = a.snapshot.routes.get(win)
                waived = r is not None and r.predicts_move(moves[win][0], final[win])
            if waived:
                w.counters.holds_waived += 1
            else:
                a.hold = s.safety_hold
                w.counters.holds += 1
    return final


def _apply(w: WorldState, moves: dict[int, tuple[int, int]], final: dict[int, int]) -> None:
    g = w.graph
    for k in sorted(final):
        a = w.agvs[k]
        u, v = moves[k]
        target = final[k]
        if a.hold > 0 and target == a.cell and u == v:
            a.hold -= 1
        elif a.stall > 0 and target == a.cell:
            a.stall -= 1
        if target != a.cell:
            a.heading = heading_of(g, a.cell, target)
            a.cell = target
            a.stuck = 0
            if a.path and len(a.path) > 1 and a.path[1] == target:
                a.path.pop(0)
            else:
                a.path = None
        else:
            a.heading = Heading.STAY
            if a.path and len(a.path) > 1 and u == v and a.path[1] == a.cell:
                a.path.pop(0)  # planned wait
            if not _at_goal(w, a):
                a.stuck += 1
    _reindex(w)


def _check_safety(w: WorldState, moves: dict[int, tuple[int, int]], final: dict[int, int]) -> None:
    kappa = w.settings.router.kappa
    worst = max((len(v) for v in w.occupants.values()), default=0)
    w.counters.max_occupancy = max(w.counters.max_occupancy, worst)
    if w.settings.mode is Mode.UNCONTROLLED:
        return
    if worst > kappa:
        w.counters.occupancy_violations += 1
    executed = {(moves[k][0], final[k]) for k in final if final[k] != moves[k][0]}
    for (u, v) in executed:
        if (v, u) in executed:
            w.counters.swaps_executed += 1


def step(world: WorldState) -> WorldState:
    """Advance the world by one slot."""
    w = world
    s = w.settings
    if s.mode.uses_channel:
        _uplink(w)
        _broadcast(w)
    moves = _decide(w)
    final = _resolve(w, moves)
    _apply(w, moves, final)
    _check_safety(w, moves, final)
    w.slot += 1
    _release_waves(w)
    _settle(w)
    if s.log_events:
        rec = {"t": w.slot, "pos": [w.agvs[k].cell for k in sorted(w.agvs)]}
        for key in ("pickups", "deliveries", "conflicts"):
            if key in w.pending_log:
                rec[key] = w.pending_log[key]
        w.events.append(rec)
        w.pending_log = {}
    return w


# --------------------------------------------------------------------------
# running a whole scenario


@dataclass
class Metrics:
    makespan: int
    timeout: bool
    n_tasks: int
    delivered: int
    mean_tardiness: float
    max_tardiness: int
    uplink_attempts: int
    uplink_delivered: int
    uplink_rate: float
    conflicts: int
    yields: int
    holds: int
    holds_waived: int
    caution_stops: int
    collisions: int
    swaps_executed: int
    max_occupancy: int
    occupancy_violations: int
    fallback_fraction: float
    replans: int
    patience_replans: int
    budget_fallbacks: int
    slots: int
    completion: dict[int, int] = field(default_factory=dict, repr=False)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "completion"]

    def row(self) -> dict:
        return {c: getattr(self, c) for c in self.columns()}


def collect_metrics(w: WorldState) -> Metrics:
    c = w.counters
    tard = [tardiness(w.delivered_at[m], w.tasks[m].deadline) for m in sorted(w.delivered_at)]
    if w.settings.mode.uses_channel:
        fb = c.fallback_slots / c.agv_slots if c.agv_slots else 0.0
    else:
        fb = 1.0 if w.settings.mode is Mode.LOCAL_ONLY else 0.0
    return Metrics(
        makespan=max(w.delivered_at.values(), default=0),
        timeout=not w.done,
        n_tasks=len(w.tasks) + sum(len(x.tasks) for x in w.waves[w.next_wave:]),
        delivered=len(w.delivered_at),
        mean_tardiness=round(float(np.mean(tard)), 6) if tard else 0.0,
        max_tardiness=max(tard, default=0),
        uplink_attempts=c.uplink_attempts,
        uplink_delivered=c.uplink_delivered,
        uplink_rate=round(c.uplink_delivered / c.uplink_attempts, 6) if c.uplink_attempts else 0.0,
        conflicts=c.conflicts,
        yields=c.yields,
        holds=c.holds,
        holds_waived=c.holds_waived,
        caution_stops=c.caution_stops,
        collisions=c.collisions,
        swaps_executed=c.swaps_executed,
        max_occupancy=c.max_occupancy,
        occupancy_violations=c.occupancy_violations,
        fallback_fraction=round(fb, 6),
        replans=c.replans,
        patience_replans=c.patience_replans,
        budget_fallbacks=c.budget_fallbacks,
        slots=w.slot,
        completion=dict(sorted(w.delivered_at.items())),
    )


def run_world(w: WorldState) -> Metrics:
    while not w.done and w.slot < w.settings.slot_cap:
        step(w)
    return collect_metrics(w)


def write_events(events: Iterable[dict], fh: IO[str]) -> None:
    for rec in events:
        fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def read_events(fh: IO[str]) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# scenario assembly from a configuration


def settings_from_config(config) -> LoopSettings:
    ch = config.channel
    r = config.router
    c = config.control
    return LoopSettings(
        mode=Mode(config.mode),
        channel=ChannelConfig(C=ch.C, S=ch.S, D=ch.D, sigma=ch.sigma, traffic=ch.traffic),
        router=RouterConfig(kappa=r.kappa, penalty=r.penalty, max_expansions=r.max_expansions),
        horizon=r.horizon,
        sensing_range=config.sensing_range,
        patience=c.patience,
        safety_hold=c.safety_hold,
        collision_stall=c.collision_stall,
        staleness_cap=c.staleness_cap,
        slot_cap=config.slot_cap,
        sa=SaParams(**config.sa.model_dump()),
    )


def graph_from_config(config) -> FactoryGraph:
    from .factory import Layout, build_grid, default_layout
    g = config.grid
    if g.production is None and g.resupply is None:
        layout = default_layout(g.width, g.height)
    else:
        base = default_layout(g.width, g.height)
        layout = Layout(
            production=tuple(map(tuple, g.production)) if g.production is not None else base.production,
            resupply=tuple(map(tuple, g.resupply)) if g.resupply is not None else base.resupply)
    return build_grid(g.width, g.height, layout)


def split_lines(total: int, waves: int) -> list[int]:
    base, extra = divmod(total, waves)
    return [base + (1 if i < extra else 0) for i in range(waves)]


def build_scenario(config, seed: int) -> WorldState:
    """World for ``config`` with tasks, placement and random streams from ``seed``."""
    from .factory import generate_tasks
    graph = graph_from_config(config)
    settings = settings_from_config(config)
    streams = np.random.SeedSequence(seed).spawn(4)
    rng_tasks = np.random.default_rng(streams[2])
    rng_place = np.random.default_rng(streams[3])

    ts = config.tasks
    waves, first_id, first_line = [], 0, 0
    for i, n_lines in enumerate(split_lines(ts.lines, ts.waves)):
        if n_lines == 0:
            continue
        slot = i * ts.wave_interval
        tasks = generate_tasks(rng_tasks, n_lines, ts.per_line, ts.qty, ts.proc, graph,
                               capacity=config.capacity, slack_factor=ts.slack_factor,
                               soft_delay=ts.soft_delay, arrival_slot=slot,
                               first_id=first_id, first_line=first_line)
        waves.append(Wave(slot, tasks))
        first_id += len(tasks)
        first_line += n_lines

    free = [v for v in range(graph.n) if graph.traversable(v)]
    per_cell = 1 if config.agvs <= len(free) else settings.router.kappa
    if config.agvs > len(free) * per_cell:
        raise ConfigError(f"agvs: {config.agvs} AGVs do not fit on {len(free)} free cells")
    order = [int(v) for v in rng_place.permutation(free)]
    cells = (order * per_cell)[:config.agvs]
    agvs = [Agv(k, cells[k], config.capacity, config.capacity, config.sensing_range)
            for k in range(config.agvs)]
    return make_world(graph, agvs, waves, settings, seed)


def run_scenario(config, seed: int, events: IO[str] | None = None) -> Metrics:
    """Run one (config, seed) to completion or the slot cap."""
    w = build_scenario(config, seed)
    m = run_world(w)
    if events is not None:
        write_events(w.events, events)
    return m
