"""Compiled inner loops for the assignment search and the channel Monte Carlo.

Both kernels seed numba's own generator from an explicit integer, so results
depend only on their arguments.
"""
import math

import numpy as np
from numba import njit

INF = 1 << 40


@njit(cache=True, inline="always")
def _visit(m, cur, t, pay, capacity, node_dist, node_end, pickup, delivery,
           qty_in, resupply):
    """Advance (cur, t, pay) by serving task ``m``; t is INF if impossible."""
    p = pickup[m]
    if pay < qty_in[m]:
        best_u = -1
        best_c = INF
        for u in resupply:
            c = node_dist[cur, u] + node_dist[node_end[cur, u], p]
            if c < best_c:
                best_c = c
                best_u = u
        if best_u < 0:
            return cur, INF, pay
        t += node_dist[cur, best_u]
        cur = node_end[cur, best_u]
        pay = capacity
    t += node_dist[cur, p]
    cur = node_end[cur, p]
    q = delivery[m]
    t += node_dist[cur, q]
    cur = node_end[cur, q]
    return cur, t, pay - qty_in[m]


@njit(cache=True)
def route_cost(seq, n, start, start_time, start_pay, capacity,
               node_dist, node_end, pickup, delivery, qty_in, resupply):
    """Travel time of visiting ``seq[:n]`` in order, with greedy resupply."""
    cur = start
    t = start_time
    pay = start_pay
    for i in range(n):
        cur, t, pay = _visit(seq[i], cur, t, pay, capacity, node_dist,
                             node_end, pickup, delivery, qty_in, resupply)
        if t >= INF:
            return INF
    return t


@njit(cache=True)
def _all_costs(routes, lens, starts, start_times, start_pays, capacity,
               node_dist, node_end, pickup, delivery, qty_in, resupply):
    K = routes.shape[0]
    out = np.empty(K, dtype=np.int64)
    for k in range(K):
        out[k] = route_cost(routes[k], lens[k], starts[k], start_times[k],
                            start_pays[k], capacity, node_dist, node_end,
                            pickup, delivery, qty_in, resupply)
    return out


@njit(cache=True)
def destroy_kernel(routes, lens, removable, mu, bias, size):
    """Remove ``size`` removable tasks sampled without replacement with
    weight ``mu ** bias``. Returns removed task ids in draw order."""
    K = routes.shape[0]
    cand = np.empty(routes.size, dtype=np.int64)
    nc = 0
    for k in range(K):
        for i in range(lens[k]):
            m = routes[k, i]
            if removable[m]:
                cand[nc] = m
                nc += 1
    w = np.empty(nc, dtype=np.float64)
    for i in range(nc):
        w[i] = float(mu[cand[i]]) ** bias
    size = min(size, nc)
    removed = np.empty(size, dtype=np.int64)
    for r in range(size):
        tot = 0.0
        for i in range(nc):
            tot += w[i]
        u = np.random.random() * tot
        acc = 0.0
        pick = nc - 1
        for i in range(nc):
            if w[i] <= 0.0:
                continue
            acc += w[i]
            if u < acc:
                pick = i
                break
        while w[pick] <= 0.0:
            pick -= 1
        removed[r] = cand[pick]
        w[pick] = 0.0
    for k in range(K):
        j = 0
        for i in range(lens[k]):
            m = routes[k, i]
            keep = True
            for r in range(size):
                if removed[r] == m:
                    keep = False
                    break
            if keep:
                routes[k, j] = m
                j += 1
        lens[k] = j
    return removed


@njit(cache=True)
def repair_kernel(routes, lens, costs, removed, mu, starts, start_times,
                  start_pays, capacity, node_dist, node_end, pickup,
                  delivery, qty_in, resupply, noise=0.0):
    """Insert ``removed`` (ascending mu, ties in the given order) one by one
    at the (AGV, position) minimising the resulting makespan estimate.

    Routes stay sorted by mu. Ties: smaller own cost, lower AGV, earlier
    position. With ``noise > 0`` each AGV's own completion estimate for a
    task is scaled by a factor drawn from [1 - noise, 1 + noise] before
    scoring.
    Returns False when some task has no finite insertion."""
    K = routes.shape[0]
    order = np.argsort(mu[removed], kind="mergesort")
    memo_val = np.zeros((node_dist.shape[0], capacity + 1), dtype=np.int64)
    memo_stamp = np.full((node_dist.shape[0], capacity + 1), -1, dtype=np.int64)
    stamp = -1
    for oi in range(removed.size):
        m = removed[order[oi]]
        # top two costs for the "everyone else" maximum
        best1 = -1
        best2 = -1
        arg1 = -1
        for k in range(K):
            c = costs[k]
            if c > best1:
                best2 = best1
                best1 = c
                arg1 = k
            elif c > best2:
                best2 = c
        bk = -1
        bj = -1
        bw = math.inf  # scored makespan of the best candidate so far
        bown = INF
        bscore = math.inf  # scored own cost of the best candidate
        for k in range(K):
            stamp += 1
            f = 1.0
            if noise > 0.0:
                f = 1.0 + noise * (2.0 * np.random.random() - 1.0)
            others = best2 if k == arg1 else best1
            if others < 0:
                others = 0
            n = lens[k]
            lo = 0
            while lo < n and mu[routes[k, lo]] < mu[m]:
                lo += 1
            hi = lo
            while hi < n and mu[routes[k, hi]] <= mu[m]:
                hi += 1
            # state before each position of the unchanged prefix
            cur = starts[k]
            t = start_times[k]
            pay = start_pays[k]
            for i in range(lo):
                cur, t, pay = _visit(routes[k, i], cur, t, pay, capacity,
                                     node_dist, node_end, pickup, delivery,
                                     qty_in, resupply)
            for j in range(lo, hi + 1):
                if j > lo:
                    cur, t, pay = _visit(routes[k, j - 1], cur, t, pay,
                                         capacity, node_dist, node_end, pickup,
                                         delivery, qty_in, resupply)
                if t >= INF or t * f > bw or (t * f == bw and t * f >= bscore):
                    break  # costs only grow along the route
                c2, own, p2 = _visit(m, cur, t, pay, capacity, node_dist,
                                     node_end, pickup, delivery, qty_in,
                                     resupply)
                i = j
                while i < hi and own < INF:
                    c2, own, p2 = _visit(routes[k, i], c2, own, p2, capacity,
                                         node_dist, node_end, pickup, delivery,
                                         qty_in, resupply)
                    i += 1
                if own >= INF:
                    continue
                # the tail after the priority band only depends on the
                # entry cell and payload, and its time adds on
                if 0 <= p2 < memo_val.shape[1]:
                    if memo_stamp[c2, p2] != stamp:
                        memo_stamp[c2, p2] = stamp
                        memo_val[c2, p2] = route_cost(
                            routes[k, hi:], n - hi, c2, 0, p2, capacity,
                            node_dist, node_end, pickup, delivery, qty_in,
                            resupply)
                    tail = memo_val[c2, p2]
                else:
                    tail = route_cost(routes[k, hi:], n - hi, c2, 0, p2,
                                      capacity, node_dist, node_end, pickup,
                                      delivery, qty_in, resupply)
                if tail >= INF:
                    continue
                own += tail
                sown = own * f
                w = sown if sown > others else others
                if w < bw or (w == bw and sown < bscore):
                    bw = w
                    bown = own
                    bscore = sown
                    bk = k
                    bj = j
        if bk < 0:
            return False
        n = lens[bk]
        for i in range(n, bj, -1):
            routes[bk, i] = routes[bk, i - 1]
        routes[bk, bj] = m
        lens[bk] = n + 1
        costs[bk] = bown
    return True


@njit(cache=True)
def sa_kernel(routes, lens, removable, mu, starts, start_times, start_pays,
              capacity, node_dist, node_end, pickup, delivery, qty_in,
              resupply, t_init, t_stop, alpha, destroy_size, bias,
              max_iter, seed, noise):
    """Simulated annealing over destroy/repair moves.

    ``routes``/``lens`` hold the initial solution and are overwritten with
    the best one found. The repair noise cools along with the temperature,
    so late iterations are plain greedy. Returns (best cost, best-cost
    trace, iterations)."""
    np.random.seed(seed)
    costs = _all_costs(routes, lens, starts, start_times, start_pays, capacity,
                       node_dist, node_end, pickup, delivery, qty_in, resupply)
    cur_r = routes.copy()
    cur_l = lens.copy()
    cur_c = costs.copy()
    cur_w = cur_c.max() if cur_c.size else 0
    best_w = cur_w
    trace = np.empty(max_iter, dtype=np.int64)
    T = t_init
    it = 0
    while T > t_stop and it < max_iter:
        new_r = cur_r.copy()
        new_l = cur_l.copy()
        removed = destroy_kernel(new_r, new_l, removable, mu, bias, destroy_size)
        new_c = _all_costs(new_r, new_l, starts, start_times, start_pays,
                           capacity, node_dist, node_end, pickup, delivery,
                           qty_in, resupply)
        ok = repair_kernel(new_r, new_l, new_c, removed, mu, starts,
                           start_times, start_pays, capacity, node_dist,
                           node_end, pickup, delivery, qty_in, resupply,
                           noise * (T / t_init) ** 2)
        if ok:
            new_w = new_c.max()
            accept = False
            if new_w < cur_w:
                accept = True
            else:
                p = math.exp(-(new_w - cur_w) / T)
                if np.random.random() < p:
                    accept = True
            if accept:
                cur_r = new_r
                cur_l = new_l
                cur_c = new_c
                cur_w = new_w
            if cur_w < best_w:
                best_w = cur_w
                routes[:, :] = cur_r
                lens[:] = cur_l
        trace[it] = best_w
        T *= alpha
        it += 1
    return best_w, trace[:it], it


# --------------------------------------------------------------------------
# channel Monte Carlo


@njit(cache=True)
def _pick_mask(C, S):
    if S == C:
        if C == 64:
            return ~np.uint64(0)
        return (np.uint64(1) << np.uint64(C)) - np.uint64(1)
    take = S
    invert = False
    if 2 * S > C:
        take = C - S
        invert = True
    mask = np.uint64(0)
    got = 0
    while got < take:
        b = np.uint64(int(np.random.random() * C))
        bit = np.uint64(1) << b
        if (mask & bit) == np.uint64(0):
            mask |= bit
            got += 1
    if invert:
        full = (np.uint64(1) << np.uint64(C)) - np.uint64(1)
        mask = full & ~mask
    return mask


@njit(cache=True)
def channel_mc_kernel(K, C, S, p_t, sigma, n_slots, seed):
    """Slot-by-slot simulation of Bernoulli(p_t) uplink attempts, each on S
    random distinct channels out of C. A copy survives if no other attempt
    used its channel and a sigma error did not hit it.

    Returns (attempts, delivered, sum of per-slot delivered fraction,
    sum of its square)."""
    np.random.seed(seed)
    masks = np.empty(K, dtype=np.uint64)
    attempts = 0
    delivered = 0
    s1 = 0.0
    s2 = 0.0
    for _ in range(n_slots):
        ones = np.uint64(0)
        twos = np.uint64(0)
        # AGVs are exchangeable: only the number of attempts matters
        n = np.random.binomial(K, p_t) if p_t < 1.0 else K
        for i in range(n):
            m = _pick_mask(C, S)
            masks[i] = m
            twos |= ones & m
            ones |= m
        free = ones & ~twos
        d = 0
        for i in range(n):
            surv = masks[i] & free
            if surv != np.uint64(0):
                if sigma > 0.0:
                    ok = False
                    for b in range(C):
                        if (surv >> np.uint64(b)) & np.uint64(1):
                            if np.random.random() >= sigma:
                                ok = True
                    if ok:
                        d += 1
                else:
                    d += 1
        attempts += n
        delivered += d
        f = d / K
        s1 += f
        s2 += f * f
    return attempts, delivered, s1, s2
