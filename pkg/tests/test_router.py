import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agvsched.factory import Layout, build_grid
from agvsched.router import (BudgetExhausted, CongestionMap, NavPath, RouterConfig,
                             congestion_penalty, heuristic, merge_maps, path_cost,
                             path_is_valid, plan_path, reconstruct)


def bfs_oracle(graph, src):
    """Plain BFS over traversable 4-neighbours, written without graph.dist."""
    w, h = graph.width, graph.height
    d = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        x, y = u % w, u // w
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < w and 0 <= ny < h:
                v = ny * w + nx
                if graph.traversable(v) and v not in d:
                    d[v] = d[u] + 1
                    q.append(v)
    return d


def spacetime_oracle(graph, start, goal, t0, cmap, config):
    """Cheapest elapsed-plus-penalty cost by layered DP over (cell, slot).

    Past the map horizon penalties vanish, so arriving later than
    horizon end + n cells can never be cheaper; the DP stops there.
    """
    goals = set(graph.goal_cells(goal))
    t_max = cmap.origin_slot + cmap.horizon + graph.n
    inf = float("inf")
    layer = {start: 0.0}
    best = 0.0 if start in goals else inf
    for t in range(t0 + 1, t_max + 1):
        nxt = {}
        for u, c in layer.items():
            for v in [u] + graph.neighbors(u):
                pen = config.penalty if cmap.occupancy(v, t) >= config.kappa else 0.0
                if c + pen < nxt.get(v, inf):
                    nxt[v] = c + pen
        layer = nxt
        for g in goals:
            if g in layer:
                best = min(best, (t - t0) + layer[g])
    return best


def random_small_world(rng):
    w, h = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    n = w * h
    blocked = [i for i in range(n) if rng.random() < 0.2]
    layout = Layout(production=tuple((i % w, i // w) for i in blocked))
    graph = build_grid(w, h, layout, validate=False)
    return graph


class TestCongestionMap:
    def test_out_of_window_reads_zero(self):
        m = CongestionMap(4, 3, origin_slot=10)
        m.add_path(10, [0, 1, 2, 3, 3])
        assert m.occupancy(0, 10) == 1 and m.occupancy(2, 12) == 1
        assert m.occupancy(3, 13) == 0 and m.occupancy(0, 9) == 0

    def test_negative_amount_clamps(self):
        m = CongestionMap(2, 2)
        m.add_path(0, [1, 1], amount=-1)
        assert m.counts.min() == 0

    def test_merge_takes_max_over_union(self):
        a = CongestionMap(3, 2, origin_slot=0)
        b = CongestionMap(3, 2, origin_slot=1)
        a.add_path(0, [0, 1])
        b.add_path(1, [1, 2], amount=2)
        m = merge_maps(a, b)
        assert (m.origin_slot, m.horizon) == (0, 3)
        assert m.nonzero() == {(0, 0): 1, (1, 1): 2, (2, 2): 2}

    def test_merge_rejects_other_graphs(self):
        with pytest.raises(ValueError):
            merge_maps(CongestionMap(3, 2), CongestionMap(4, 2))

    def test_penalty_threshold(self):
        cfg = RouterConfig(kappa=3, penalty=50.0)
        m = CongestionMap(1, 1)
        m.counts[0, 0] = 3
        assert congestion_penalty(m, 0, 0, cfg) == 50.0
        m.counts[0, 0] = 2
        assert congestion_penalty(m, 0, 0, cfg) == 0.0
        assert congestion_penalty(None, 0, 0, cfg) == 0.0


maps = st.builds(
    lambda origin, rows: _map_from(origin, rows),
    st.integers(0, 4),
    st.lists(st.lists(st.integers(0, 4), min_size=3, max_size=3), min_size=1, max_size=4))


def _map_from(origin, rows):
    return CongestionMap(3, len(rows), origin, np.array(rows, dtype=np.int32))


class TestMergeProperties:
    @settings(max_examples=200, deadline=None)
    @given(maps, maps)
    def test_commutative(self, a, b):
        assert merge_maps(a, b) == merge_maps(b, a)

    @settings(max_examples=200, deadline=None)
    @given(maps, maps, maps)
    def test_associative(self, a, b, c):
        assert merge_maps(merge_maps(a, b), c) == merge_maps(a, merge_maps(b, c))

    @settings(max_examples=100, deadline=None)
    @given(maps)
    def test_idempotent(self, a):
        assert merge_maps(a, a) == a


class TestReconstruct:
    def test_single_state(self):
        p = reconstruct({(5, 3): None}, (5, 3))
        assert p.cells == [5] and p.arrival == 3

    def test_three_steps(self):
        parents = {(0, 0): None, (1, 1): (0, 0), (4, 2): (1, 1)}
        p = reconstruct(parents, (4, 2))
        assert p.cells == [0, 1, 4] and p.t0 == 0 and p.arrival == 2

    def test_broken_chain(self):
        with pytest.raises(AssertionError):
            reconstruct({(1, 1): (0, 0)}, (1, 1))


class TestPlanPath:
    def test_start_is_goal(self, grid10):
        p = plan_path(grid10, 11, 11, 7)
        assert p.cells == [11] and p.arrival == 7

    def test_empty_map_matches_bfs_10x10(self, grid10, rng):
        free = [v for v in range(grid10.n) if grid10.traversable(v)]
        for _ in range(100):
            s, g = (int(v) for v in rng.choice(free, 2, replace=False))
            p = plan_path(grid10, s, g, 0)
            assert len(p.cells) - 1 == bfs_oracle(grid10, s)[g]
            assert p.cells[0] == s and p.cells[-1] == g
            assert path_is_valid(grid10, p.cells)

    def test_production_goal_served_from_neighbour(self, grid10):
        prod = grid10.production_nodes[0]
        p = plan_path(grid10, 0, prod, 0)
        assert p.cells[-1] in grid10.goal_cells(prod)
        d = bfs_oracle(grid10, 0)
        assert len(p.cells) - 1 == min(d[c] for c in grid10.goal_cells(prod))

    def test_centre_blocked_3x3(self):
        g = build_grid(3, 3)
        m = CongestionMap(9, 10)
        m.counts[:, 4] = 3
        cfg = RouterConfig()
        p = plan_path(g, 0, 8, 0, m, cfg)
        assert 4 not in p.cells
        assert len(p.cells) - 1 == 4 and p.penalty == 0.0
        # enumerate every move sequence of up to 6 steps as the oracle
        best = None
        for n in range(1, 7):
            for seq in itertools.product([0, 1, 2, 3, 4, 5, 6, 7, 8], repeat=n):
                cells = [0, *seq]
                if cells[-1] != 8 or 8 in cells[:-1] or not path_is_valid(g, cells):
                    continue
                c = path_cost(NavPath(0, cells), m, cfg)
                best = c if best is None else min(best, c)
            if best is not None and best <= n:
                break
        assert path_cost(p, m, cfg) == best == 4

    def test_waits_out_a_blocked_bottleneck(self):
        # 1x3 corridor; the middle cell is congested during slots 1-2
        g = build_grid(3, 1)
        m = CongestionMap(3, 5)
        m.counts[1:3, 1] = 3
        p = plan_path(g, 0, 2, 0, m)
        assert p.cells == [0, 0, 0, 1, 2]
        assert p.penalty == 0.0

    def test_adversarial_congestion_matches_oracle(self):
        rng = np.random.default_rng(7)
        cfg = RouterConfig(kappa=2, penalty=3.0)
        checked = 0
        while checked < 50:
            g = random_small_world(rng)
            free = [v for v in range(g.n) if g.traversable(v)]
            if len(free) < 2:
                continue
            s, goal = (int(v) for v in rng.choice(free, 2, replace=False))
            if s not in bfs_oracle(g, goal):
                continue
            H = int(rng.integers(3, 11))
            m = CongestionMap(g.n, H, origin_slot=0)
            m.counts[:] = (rng.random((H, g.n)) < 0.45) * 2
            t0 = int(rng.integers(0, 3))
            p = plan_path(g, s, goal, t0, m, cfg)
            want = spacetime_oracle(g, s, goal, t0, m, cfg)
            assert p is not None
            assert path_cost(p, m, cfg) == pytest.approx(want)
            assert p.penalty == pytest.approx(path_cost(p, m, cfg) - (len(p.cells) - 1))
            assert path_is_valid(g, p.cells) and p.t0 == t0
            checked += 1

    def test_unreachable_goal(self):
        # a full production row cuts the grid in two
        g = build_grid(3, 3, Layout(production=((0, 1), (1, 1), (2, 1))), validate=False)
        assert plan_path(g, 0, 6, 0) is None

    def test_deadline_and_soft_delay(self, grid10):
        d = int(grid10.dist[0, 9])
        assert plan_path(grid10, 0, 9, 0, deadline=d - 2) is None
        assert plan_path(grid10, 0, 9, 0, deadline=d - 2, soft_delay=2) is not None
        assert plan_path(grid10, 0, 9, 0, deadline=d).arrival == d

    def test_deadline_skips_congested_early_arrival(self):
        # the only cheap arrival is late; a tight deadline forces the penalty
        g = build_grid(3, 1)
        m = CongestionMap(3, 5)
        m.counts[1:3, 1] = 3
        cfg = RouterConfig()
        p = plan_path(g, 0, 2, 0, m, cfg, deadline=2)
        assert p.arrival == 2 and p.penalty == cfg.penalty

    def test_ready_slot_sets_wait(self, grid10):
        p = plan_path(grid10, 0, 3, 0, ready_slot=10)
        assert p.wait_at_goal == 10 - p.arrival
        assert plan_path(grid10, 0, 3, 0, ready_slot=1).wait_at_goal == 0

    def test_budget_exhausted(self, grid10):
        with pytest.raises(BudgetExhausted):
            plan_path(grid10, 0, 99, 0, config=RouterConfig(max_expansions=3))

    def test_rejects_untraversable_start(self, grid10):
        with pytest.raises(ValueError):
            plan_path(grid10, grid10.production_nodes[0], 0, 0)

    def test_deterministic(self, grid10):
        m = CongestionMap(grid10.n, 40)
        m.counts[5:15, 40:60] = 3
        a = plan_path(grid10, 0, 99, 0, m)
        b = plan_path(grid10, 0, 99, 0, m.copy())
        assert a.cells == b.cells


def test_heuristic_is_admissible(grid10):
    free = [v for v in range(grid10.n) if grid10.traversable(v)]
    for goal in range(grid10.n):
        goals = grid10.goal_cells(goal)
        for v in free:
            true = min(grid10.dist[v, c] for c in goals)
            assert heuristic(grid10, v, goal) <= true
