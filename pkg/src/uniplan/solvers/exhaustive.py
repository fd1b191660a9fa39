"""Brute-force reference solver for small graphs."""

import collections
import itertools
import math
import time

from ..graph import is_contiguous
from ..helpers.logging import get_logger
from .base.solver_base import SolverBase, cost_tables, make_assignment, normalize_limits

logger = get_logger("exhaustive")

MAX_LAYERS = 8
MAX_COMBINATIONS = 10 ** 7


class ExhaustiveGuardException(ValueError):
    pass


class Exhaustive(SolverBase):
    slug = "exhaustive"

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.max_layers = kwargs.get("max_layers", MAX_LAYERS)
        self.max_combinations = kwargs.get("max_combinations", MAX_COMBINATIONS)

    def _guard(self, costs, ctx):
        n_layers, n_strats = costs.num_layers, costs.num_strategies
        if n_layers > self.max_layers:
            raise ExhaustiveGuardException(
                f"{n_layers} layers exceed the exhaustive limit of {self.max_layers}"
            )
        combinations = (n_strats * ctx.deg) ** n_layers
        if combinations > self.max_combinations:
            raise ExhaustiveGuardException(
                f"{combinations} assignments exceed the exhaustive limit of {self.max_combinations}"
            )

    def placements(self, graph, deg):
        """Stage vectors in lexicographic order that fill, order and keep every stage contiguous."""
        ids = graph.ids
        for stage_of in itertools.product(range(deg), repeat=len(ids)):
            if len(set(stage_of)) != deg:
                continue
            if any(stage_of[a] > stage_of[b] for a, b in graph.edge_positions):
                continue
            stages = collections.defaultdict(set)
            for pos, s in enumerate(stage_of):
                stages[s].add(ids[pos])
            if all(is_contiguous(graph, members) for members in stages.values()):
                yield stage_of

    def solve(self, costs, graph, ctx, mem_limits):
        self._guard(costs, ctx)
        started = time.perf_counter()
        deg, c = ctx.deg, ctx.c
        limits = normalize_limits(mem_limits, deg)
        _, _, _, M = cost_tables(costs)

        feasible = [
            [k for k in range(costs.num_strategies) if math.isfinite(M[u][k])]
            for u in range(costs.num_layers)
        ]

        best, visited = None, 0
        for stage_of in self.placements(graph, deg):
            for strategy_of in itertools.product(*feasible):
                visited += 1
                mem = [0.0] * deg
                for u, (s, k) in enumerate(zip(stage_of, strategy_of)):
                    mem[s] += M[u][k]
                if any(m > limit for m, limit in zip(mem, limits)):
                    continue
                candidate = make_assignment(stage_of, strategy_of, costs, deg, c)
                # enumeration is lexicographic, so strict < keeps the smallest key on ties
                if best is None or candidate.objective < best.objective:
                    best = candidate

        if best is None:
            witness = self.infeasibility_witness(costs, ctx, limits)
            return None, self._stats(visited, math.inf, math.inf, started, "infeasible", witness)
        stats = self._stats(visited, best.objective, best.objective, started, "optimal")
        logger.debug(f"deg={deg} c={c}: exhaustive optimum {best.objective:.6g} over {visited}")
        return best, stats


def solve_exhaustive(costs, graph, ctx, mem_limits, **kwargs):
    """:return: (Assignment or None, SolveStats)"""
    return Exhaustive(**kwargs).solve(costs, graph, ctx, mem_limits)
