"""
Exact branch-and-bound over (stage, strategy) per layer.

Layers are branched in topological order. A layer's stage is never below the
stage of any of its predecessors, so every complete leaf is stage-ordered and
therefore contiguous. The lower bound of a partial assignment is

    committed stage and boundary costs
    + cheapest remaining execution costs
    + (c - 1) * max(committed max, largest cheapest remaining execution cost)

A node is pruned when its bound exceeds the incumbent. Within the gap window it
is pruned only when its stage prefix already sorts after the incumbent's, so a
tied leaf with a smaller (stage_of, strategy_of) key is never skipped.
"""

import math
import time

from ..helpers.logging import get_logger
from .base.solver_base import (
    SolverBase,
    cost_tables,
    make_assignment,
    normalize_limits,
)

logger = get_logger("branch-and-bound")

# nodes between two wall-clock checks
CLOCK_EVERY = 512


class _StopSearch(Exception):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(reason)


class BranchAndBound(SolverBase):
    slug = "branch-and-bound"

    def solve(self, costs, graph, ctx, mem_limits):
        started = time.perf_counter()
        deg, c = ctx.deg, ctx.c
        limits = normalize_limits(mem_limits, deg)
        n_layers = costs.num_layers
        A, R, Rp, M = cost_tables(costs)

        cap = max(limits)
        usable = [
            [k for k in range(costs.num_strategies) if M[u][k] <= cap] for u in range(n_layers)
        ]
        if n_layers < deg or not all(usable):
            witness = self.infeasibility_witness(costs, ctx, limits)
            logger.debug(f"deg={deg} c={c}: infeasible before search ({witness})")
            return None, self._stats(0, math.inf, math.inf, started, "infeasible", witness)

        min_a = [min(A[u][k] for k in usable[u]) for u in range(n_layers)]
        rest_sum = [0.0] * (n_layers + 1)
        rest_max = [0.0] * (n_layers + 1)
        for u in range(n_layers - 1, -1, -1):
            rest_sum[u] = rest_sum[u + 1] + min_a[u]
            rest_max[u] = max(rest_max[u + 1], min_a[u])
        root_bound = rest_sum[0] + (c - 1) * rest_max[0]

        in_edges = [[] for _ in range(n_layers)]
        for e, (a, b) in enumerate(costs.edges):
            in_edges[b].append((e, a))

        stage_of = [-1] * n_layers
        strategy_of = [-1] * n_layers
        p = [0.0] * deg
        o = [0.0] * (deg - 1)
        mem = [0.0] * deg
        count = [0] * deg

        search = {
            "nodes": 0,
            "incumbent": math.inf,
            "key": None,
            "assignment": None,
            "pruned_bound": math.inf,
        }

        def clock():
            elapsed = time.perf_counter() - started
            if self.time_limit_s is not None and elapsed > self.time_limit_s:
                raise _StopSearch("time_limit")
            inc = search["incumbent"]
            if (
                self.soft_time_s is not None
                and self.soft_gap is not None
                and elapsed > self.soft_time_s
                and math.isfinite(inc)
                and (inc - root_bound) / max(inc, 1e-12) <= self.soft_gap
            ):
                raise _StopSearch("early_stop")
            if (
                self.previous_best is not None
                and self.cutoff_time_s is not None
                and elapsed > self.cutoff_time_s
                and root_bound >= self.previous_best
            ):
                raise _StopSearch("cutoff")

        def thresholds():
            """(tie limit, gap limit) for the current incumbent."""
            inc = search["incumbent"]
            if math.isinf(inc):
                return math.inf, math.inf
            tie = inc + 1e-12 * max(1.0, abs(inc))
            return tie, tie - self.gap_tol * abs(inc)

        def prunable(bound, depth):
            tie, gap = thresholds()
            if bound > tie:
                return True
            return bound > gap and tuple(stage_of[:depth]) > search["key"][:depth]

        def leaf():
            if 0 in count:
                return
            candidate = make_assignment(stage_of, strategy_of, costs, deg, c)
            key = tuple(stage_of) + tuple(strategy_of)
            obj = candidate.objective
            if obj < search["incumbent"] or (obj == search["incumbent"] and key < search["key"]):
                search["incumbent"] = obj
                search["key"] = key
                search["assignment"] = candidate
                logger.debug(f"deg={deg} c={c}: incumbent {obj:.6g} at node {search['nodes']}")

        def branch(u):
            search["nodes"] += 1
            if search["nodes"] % CLOCK_EVERY == 0:
                clock()
            if u == n_layers:
                leaf()
                return

            lowest = max((stage_of[a] for _, a in in_edges[u]), default=0)
            empty = count.count(0)
            remaining = n_layers - u
            for s in range(lowest, deg):
                # stages below s that are still empty can only be filled by later layers
                if remaining - 1 < empty - (count[s] == 0):
                    continue
                for k in usable[u]:
                    if mem[s] + M[u][k] > limits[s]:
                        continue

                    delta_p = A[u][k]
                    crossings = []
                    for e, a in in_edges[u]:
                        sa, ka = stage_of[a], strategy_of[a]
                        if sa == s:
                            delta_p += R[e][ka][k]
                        else:
                            for j in range(sa, s):
                                crossings.append((j, Rp[e][j][ka][k]))

                    p[s] += delta_p
                    for j, cost in crossings:
                        o[j] += cost
                    mem[s] += M[u][k]
                    count[s] += 1
                    stage_of[u], strategy_of[u] = s, k

                    bound = sum(p) + sum(o) + rest_sum[u + 1]
                    bound += (c - 1) * max(max(p), max(o, default=0.0), rest_max[u + 1])
                    if prunable(bound, u + 1):
                        search["pruned_bound"] = min(search["pruned_bound"], bound)
                    else:
                        branch(u + 1)

                    stage_of[u], strategy_of[u] = -1, -1
                    count[s] -= 1
                    mem[s] -= M[u][k]
                    for j, cost in crossings:
                        o[j] -= cost
                    p[s] -= delta_p

        terminated_by = "optimal"
        try:
            branch(0)
        except _StopSearch as stop:
            terminated_by = stop.reason

        incumbent = search["incumbent"]
        if terminated_by == "optimal":
            best_bound = min(incumbent, search["pruned_bound"])
            if search["assignment"] is None:
                terminated_by = "infeasible"
        else:
            best_bound = root_bound

        witness = None
        if search["assignment"] is None:
            witness = self.infeasibility_witness(costs, ctx, limits)
        stats = self._stats(search["nodes"], best_bound, incumbent, started, terminated_by, witness)
        logger.debug(
            f"deg={deg} c={c}: {stats.terminated_by} after {stats.nodes_explored} nodes, "
            f"incumbent {stats.incumbent:.6g}, gap {stats.gap:.3g}"
        )
        return search["assignment"], stats


def root_lower_bound(costs, ctx, mem_limits):
    """Bound of the empty assignment; inf when some layer fits on no stage."""
    cheapest = costs.min_exec_cost(max(normalize_limits(mem_limits, ctx.deg)))
    if costs.num_layers < ctx.deg or not math.isfinite(cheapest.max()):
        return math.inf
    return float(cheapest.sum()) + (ctx.c - 1) * float(cheapest.max())


def solve_exact(costs, graph, ctx, mem_limits, budget=None):
    """
    :param budget: dict of SolverBase keywords (time_limit_s, gap_tol, ...)
    :return: (Assignment or None, SolveStats)
    """
    return BranchAndBound(**(budget or {})).solve(costs, graph, ctx, mem_limits)
