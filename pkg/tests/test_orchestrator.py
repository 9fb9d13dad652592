import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agvsched import orchestrator as orch
from agvsched.config import ScenarioConfig, with_value
from agvsched.factory import Agv, Layout, TransportTask, build_grid
from agvsched.netsim import SlotOutcome
from agvsched.orchestrator import (Action, Heading, LoopSettings, Mode, RegisteredRoute, Snapshot,
                                   Wave, build_global_map, build_scenario, detect_conflicts,
                                   heading_of, local_observation, make_world, read_events,
                                   resolve_right_of_way, run_scenario, run_world, settle_moves,
                                   write_events)
from agvsched.router import RouterConfig, congestion_penalty


def corridor():
    """5x3 world whose middle row is a one-lane corridor between machines."""
    return build_grid(5, 3, Layout(production=((1, 0), (2, 0), (3, 0), (1, 2), (2, 2), (3, 2))))


def corridor_tasks(g, proc_a=1):
    i = g.index
    return [TransportTask(0, i((1, 2)), i((3, 0)), 5, 5, 100, 20, 1, 0, proc_a),
            TransportTask(1, i((3, 2)), i((1, 0)), 5, 5, 100, 20, 1, 1, 1)]


def small_config(**kw):
    c = ScenarioConfig(agvs=6, tasks={"lines": 6, "per_line": 3, "waves": 2, "wave_interval": 30})
    for k, v in kw.items():
        c = with_value(c, k, v)
    return c


class TestObservation:
    def test_range_is_inclusive(self, grid10):
        g = grid10
        agvs = [Agv(0, g.index((0, 0)), 20), Agv(1, g.index((1, 1)), 20),
                Agv(2, g.index((0, 3)), 20)]
        w = make_world(g, agvs, [], LoopSettings(mode="local_only"), 0)
        assert set(local_observation(w, 0, 2).neighbors) == {1}
        assert set(local_observation(w, 1, 2).neighbors) == {0}
        assert set(local_observation(w, 2, 3).neighbors) == {0, 1}
        assert local_observation(w, 2, 2).neighbors == {}

    def test_isolated(self, grid10):
        w = make_world(grid10, [Agv(0, 0, 20)], [], LoopSettings(), 0)
        assert local_observation(w, 0).neighbors == {}


class TestGlobalMap:
    def test_empty(self):
        assert build_global_map({}, 5, 10, 9).nonzero() == {}

    def test_counts_and_threshold(self):
        reg = {0: RegisteredRoute(0, 0, (0, 1, 4)), 1: RegisteredRoute(0, 0, (2, 1, 4)),
               2: RegisteredRoute(1, 1, (4,))}
        m = build_global_map(reg, 0, 5, 9)
        assert m.occupancy(1, 1) == 2
        # two routes reach cell 4 at slot 2; the third sits there from slot 1
        assert m.occupancy(4, 1) == 1 and m.occupancy(4, 2) == 2
        reg[3] = RegisteredRoute(0, 0, (5, 5, 4))
        m = build_global_map(reg, 0, 5, 9)
        assert m.occupancy(4, 2) == 3
        assert congestion_penalty(m, 4, 2, RouterConfig()) > 0

    def test_stale_routes_dropped(self):
        reg = {0: RegisteredRoute(0, 0, (3,) * 20), 1: RegisteredRoute(9, 9, (4,) * 5)}
        m = build_global_map(reg, 10, 5, 9, staleness_cap=5)
        assert m.occupancy(3, 10) == 0 and m.occupancy(4, 10) == 1

    def test_predicts_move_skips_waits(self):
        r = RegisteredRoute(0, 0, (1, 1, 1, 2, 5))
        assert r.predicts_move(1, 2) and r.predicts_move(2, 5)
        assert not r.predicts_move(1, 5) and not r.predicts_move(7, 1)


class TestConflicts:
    def test_vertex(self):
        c = detect_conflicts({0: (0, 1), 1: (2, 1)}, 3)
        assert [(x.kind, x.agvs) for x in c] == [("vertex", (0, 1))]

    def test_edge(self):
        c = detect_conflicts({0: (0, 1), 1: (1, 0)}, 3)
        assert [(x.kind, x.agvs) for x in c] == [("edge", (0, 1))]

    def test_disjoint(self):
        assert detect_conflicts({0: (0, 1), 1: (3, 4), 2: (5, 5)}, 3) == []

    def test_full_cell(self):
        c = detect_conflicts({0: (1, 1), 1: (1, 1), 2: (0, 1)}, 2)
        assert [(x.kind, x.agvs, x.cell) for x in c] == [("vertex", (2,), 1)]


class TestRightOfWay:
    def test_north_beats_west(self):
        v = resolve_right_of_way([4, 2], {4: Heading.N, 2: Heading.W})
        assert v == {4: Action.PROCEED, 2: Action.STAY}

    def test_south_beats_east(self):
        v = resolve_right_of_way([0, 1], {0: Heading.E, 1: Heading.S})
        assert v[1] is Action.PROCEED and v[0] is Action.STAY

    def test_same_heading_lower_id(self):
        v = resolve_right_of_way([7, 3], {7: Heading.N, 3: Heading.N})
        assert v[3] is Action.PROCEED

    def test_stayer_never_outranks_mover(self):
        v = resolve_right_of_way([0, 9], {0: Heading.STAY, 9: Heading.W})
        assert v[9] is Action.PROCEED

    def test_heading_of(self, grid10):
        g = grid10
        assert heading_of(g, g.index((1, 1)), g.index((1, 2))) is Heading.N
        assert heading_of(g, g.index((1, 1)), g.index((0, 1))) is Heading.W
        assert heading_of(g, 5, 5) is Heading.STAY


@st.composite
def move_sets(draw):
    w, h, kappa = 4, 4, draw(st.integers(1, 3))
    n = draw(st.integers(1, 12))
    cells, count = [], {}
    for _ in range(n):
        c = draw(st.integers(0, w * h - 1).filter(lambda c: count.get(c, 0) < kappa))
        count[c] = count.get(c, 0) + 1
        cells.append(c)
    moves = {}
    for k, c in enumerate(cells):
        x, y = c % w, c // w
        opts = [c] + [ny * w + nx for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1))
                      if 0 <= nx < w and 0 <= ny < h]
        moves[k] = (c, draw(st.sampled_from(opts)))
    return w, moves, kappa


class TestSettle:
    @settings(max_examples=300, deadline=None)
    @given(move_sets())
    def test_result_is_safe(self, case):
        w, moves, kappa = case
        g = build_grid(w, w)
        headings = {k: heading_of(g, u, v) for k, (u, v) in moves.items()}
        final, yielded = settle_moves(moves, headings, kappa)
        executed = {(moves[k][0], final[k]) for k in final if final[k] != moves[k][0]}
        assert not any((v, u) in executed for (u, v) in executed)
        count, entrants = {}, {}
        for k, v in final.items():
            count[v] = count.get(v, 0) + 1
            if v != moves[k][0]:
                entrants[v] = entrants.get(v, 0) + 1
        assert max(count.values()) <= kappa
        assert max(entrants.values(), default=0) <= 1
        for k in final:
            assert final[k] in (moves[k][0], moves[k][1])
            assert (final[k] == moves[k][1]) or k in yielded or moves[k][0] == moves[k][1]

    def test_swap_broken_by_heading(self, grid10):
        g = grid10
        a, b = g.index((0, 0)), g.index((0, 1))
        moves = {0: (a, b), 1: (b, a)}
        headings = {0: Heading.N, 1: Heading.S}
        final, yielded = settle_moves(moves, headings, 3)
        assert final == {0: b, 1: b} and yielded == {1: 0}


class TestScenarios:
    def test_single_task_hand_computed(self):
        # machines in two corners of a 3x3 grid; the AGV starts next to
        # neither access cell of the pickup machine
        g = build_grid(3, 3, Layout(production=((0, 0), (2, 2))))
        for proc, want in ((1, 3), (5, 7)):
            task = TransportTask(0, g.index((0, 0)), g.index((2, 2)), 5, 5, 100, 20, 1, 0, proc)
            w = make_world(g, [Agv(0, g.index((2, 0)), 20)], [Wave(0, [task])],
                           LoopSettings(mode="comm_ideal"), 0)
            m = run_world(w)
            # one step to (1,0); pickup at max(1, proc); two steps to (2,1)
            assert m.makespan == want and not m.timeout

    def test_corridor_head_on_local_only(self):
        g = corridor()
        w = make_world(g, [Agv(0, g.index((0, 1)), 20), Agv(1, g.index((4, 1)), 20)],
                       [Wave(0, corridor_tasks(g))], LoopSettings(mode="local_only"), 0)
        m = run_world(w)
        assert m.delivered == 2 and not m.timeout
        assert m.swaps_executed == 0 and m.occupancy_violations == 0
        assert m.yields + m.caution_stops >= 1

    def test_uncontrolled_swap_counted(self):
        g = corridor()
        w = make_world(g, [Agv(0, g.index((1, 1)), 20), Agv(1, g.index((4, 1)), 20)],
                       [Wave(0, corridor_tasks(g, proc_a=2))], LoopSettings(mode="uncontrolled"), 0)
        m = run_world(w)
        assert m.swaps_executed == 1 and m.collisions >= 1 and m.delivered == 2

    def test_zero_tasks(self, grid10):
        w = make_world(grid10, [Agv(0, 0, 20)], [], LoopSettings(), 0)
        m = run_world(w)
        assert m.makespan == 0 and not m.timeout and m.slots == 0

    def test_timeout_is_reported(self):
        m = run_scenario(small_config(slot_cap=15), 0)
        assert m.timeout and m.slots == 15 and m.delivered < m.n_tasks

    @pytest.mark.parametrize("mode", ["local_only", "comm_ideal", "comm_realistic"])
    def test_desk_scale_safe_and_live(self, mode):
        for seed in range(5):
            w = build_scenario(small_config(mode=mode, **{"channel.sigma": 0.2}), seed)
            m = run_world(w)
            assert not m.timeout and m.delivered == m.n_tasks == 18
            assert m.swaps_executed == 0 and m.occupancy_violations == 0
            assert m.max_occupancy <= 3
            self._check_task_flow(w)

    @staticmethod
    def _check_task_flow(w):
        lines = {}
        for t in w.tasks.values():
            assert w.picked_at[t.id] >= w.prep[t.id]
            assert w.picked_at[t.id] <= w.delivered_at[t.id]
            lines.setdefault(t.line_id, []).append(t)
        for chain in lines.values():
            chain.sort(key=lambda t: t.priority)
            for a, b in zip(chain, chain[1:]):
                assert w.delivered_at[a.id] <= w.prep[b.id] - b.processing_time
                assert w.delivered_at[a.id] < w.delivered_at[b.id]
        delivered = [m for e in w.events for m in e.get("deliveries", [])]
        assert sorted(delivered) == sorted(w.tasks)

    def test_deterministic(self):
        c = small_config(mode="comm_realistic", **{"channel.sigma": 0.1})
        outs = []
        for _ in range(2):
            buf = io.StringIO()
            m = run_scenario(c, 3, events=buf)
            outs.append((m, buf.getvalue()))
        assert outs[0][0] == outs[1][0] and outs[0][1] == outs[1][1]
        assert outs[0][1]

    def test_sure_delivery_matches_ideal(self, monkeypatch):
        ideal = build_scenario(small_config(mode="comm_ideal"), 2)
        run_world(ideal)

        real_uplink = orch.uplink_slot

        def lossless(*args, **kw):
            out = real_uplink(*args, **kw)
            return SlotOutcome(set(out.attempted), set(out.attempted), out.channels)

        monkeypatch.setattr(orch, "uplink_slot", lossless)
        real = build_scenario(small_config(mode="comm_realistic"), 2)
        run_world(real)
        assert real.events == ideal.events

    def test_event_log_round_trip(self):
        w = build_scenario(small_config(), 0)
        run_world(w)
        buf = io.StringIO()
        write_events(w.events, buf)
        assert read_events(io.StringIO(buf.getvalue())) == w.events
        assert all(e["t"] == i + 1 for i, e in enumerate(w.events))


class TestCaution:
    def _world(self, mode):
        # AGV 0 wants to step east into (2,1); AGV 1 at (2,2) was last seen
        # moving south, so it could enter the same cell next slot
        g = build_grid(5, 5)
        i = g.index
        agvs = [Agv(0, i((1, 1)), 20), Agv(1, i((2, 2)), 20)]
        w = make_world(g, agvs, [], LoopSettings(mode=mode), 0)
        w.agvs[1].heading = Heading.S
        return w, i

    def test_local_only_stops_for_unknown_intention(self):
        w, i = self._world("local_only")
        moves = {0: (i((1, 1)), i((2, 1))), 1: (i((2, 2)), i((2, 3)))}
        orch._caution(w, moves)
        assert moves[0] == (i((1, 1)), i((1, 1)))
        assert w.agvs[0].hold == w.settings.safety_hold and w.counters.caution_stops == 1

    def _with_route(self, w, cells, t0=0):
        route = RegisteredRoute(t0, t0, tuple(cells))
        w.agvs[0].snapshot = Snapshot(t0, build_global_map({1: route}, t0, 4, 25), {1: route})

    def test_known_route_lets_it_go(self):
        w, i = self._world("comm_ideal")
        # the route explains the southward step into (2,2) that was sensed
        self._with_route(w, [i((2, 3)), i((2, 2)), i((2, 2)), i((3, 2))])
        moves = {0: (i((1, 1)), i((2, 1))), 1: (i((2, 2)), i((2, 2)))}
        orch._caution(w, moves)
        assert moves[0] == (i((1, 1)), i((2, 1))) and w.counters.caution_stops == 0

    def test_route_elsewhere_is_not_intention(self):
        w, i = self._world("comm_ideal")
        self._with_route(w, [i((4, 4)), i((4, 3))])
        moves = {0: (i((1, 1)), i((2, 1))), 1: (i((2, 2)), i((2, 1)))}
        orch._caution(w, moves)
        assert moves[0] == (i((1, 1)), i((1, 1))) and w.counters.caution_stops == 1

    def test_higher_rank_does_not_stop(self):
        w, i = self._world("local_only")
        w.agvs[1].heading = Heading.W
        moves = {0: (i((1, 1)), i((2, 1))), 1: (i((2, 2)), i((2, 2)))}
        orch._caution(w, moves)
        # AGV 0 heads east, which outranks a westbound neighbour
        assert moves[0][1] == i((2, 1))


def test_mode_flags():
    assert Mode("comm_realistic").uses_channel and not Mode.LOCAL_ONLY.uses_channel
    with pytest.raises(ValueError):
        LoopSettings(mode="telepathy")
