import collections
import math
import time

import numpy as np

from ...graph import is_contiguous
from ...helpers.config import Config, ConfigurationException
from ...helpers.logging import get_logger

logger = get_logger("solver-base")

assignment_fields = {
    "stage_of": (),
    "strategy_of": (),
    "objective": math.inf,
    "per_stage_cost": (),
    "per_boundary_cost": (),
    "per_stage_memory": (),
    "layer_ids": (),
}

# stage_of / strategy_of are indexed by layer position; layer_ids maps back to ids
Assignment = collections.namedtuple(
    "Assignment", assignment_fields.keys(), defaults=assignment_fields.values()
)

stats_fields = {
    "nodes_explored": 0,
    "best_bound": 0.0,
    "incumbent": math.inf,
    "gap": math.inf,
    "wall_time": 0.0,
    "terminated_by": "optimal",
    "witness": None,
}

SolveStats = collections.namedtuple(
    "SolveStats", stats_fields.keys(), defaults=stats_fields.values()
)

violation_fields = {"family": None, "subject": None, "margin": 0.0, "message": ""}

Violation = collections.namedtuple(
    "Violation", violation_fields.keys(), defaults=violation_fields.values()
)

OBJECTIVE_TOL = 1e-9
GAP_EPS = 1e-12


class SolverInputException(ValueError):
    pass


def cost_tables(costs):
    """Python-list views of the cost matrices, cached on the CostMatrices instance."""
    tables = getattr(costs, "_tables", None)
    if tables is None:
        tables = (costs.A.tolist(), costs.R.tolist(), costs.Rp.tolist(), costs.M.tolist())
        costs._tables = tables
    return tables


def evaluate_assignment(stage_of, strategy_of, costs, deg, c):
    """
    Stage costs, boundary costs, stage memory and the pipeline objective
    sum(p) + sum(o) + (c - 1) * max(p U o) of a complete placement.
    """
    A, R, Rp, M = cost_tables(costs)
    p = [0.0] * deg
    o = [0.0] * (deg - 1)
    mem = [0.0] * deg
    for u, (s, k) in enumerate(zip(stage_of, strategy_of)):
        p[s] += A[u][k]
        mem[s] += M[u][k]
    for e, (a, b) in enumerate(costs.edges):
        sa, sb = stage_of[a], stage_of[b]
        ka, kb = strategy_of[a], strategy_of[b]
        if sa == sb:
            p[sa] += R[e][ka][kb]
        else:
            for j in range(min(sa, sb), max(sa, sb)):
                o[j] += Rp[e][j][ka][kb]
    objective = sum(p + o) + (c - 1) * max(p + o)
    return p, o, mem, objective


def make_assignment(stage_of, strategy_of, costs, deg, c):
    p, o, mem, objective = evaluate_assignment(stage_of, strategy_of, costs, deg, c)
    return Assignment(
        stage_of=tuple(stage_of),
        strategy_of=tuple(strategy_of),
        objective=objective,
        per_stage_cost=tuple(p),
        per_boundary_cost=tuple(o),
        per_stage_memory=tuple(mem),
        layer_ids=tuple(costs.layer_ids),
    )


def normalize_limits(mem_limits, deg):
    if np.ndim(mem_limits) == 0:
        return [float(mem_limits)] * deg
    limits = [float(m) for m in mem_limits]
    if len(limits) != deg:
        raise SolverInputException(f"expected {deg} memory limits, got {len(limits)}")
    return limits


def check_assignment(a, costs, graph, ctx, mem_limits):
    """Every constraint family evaluated directly; an empty list means feasible."""
    deg = ctx.deg
    limits = normalize_limits(mem_limits, deg)
    n_layers, n_strats = costs.A.shape
    violations = []

    if len(a.stage_of) != n_layers or len(a.strategy_of) != n_layers:
        violations.append(
            Violation(
                "layer_placement",
                None,
                abs(len(a.stage_of) - n_layers),
                f"assignment covers {len(a.stage_of)} layers, model has {n_layers}",
            )
        )
        return violations

    ids = graph.ids
    for pos, s in enumerate(a.stage_of):
        if not 0 <= s < deg:
            violations.append(
                Violation(
                    "layer_placement",
                    ids[pos],
                    s,
                    f"layer {ids[pos]} placed on stage {s}, valid stages are 0..{deg - 1}",
                )
            )
    for pos, k in enumerate(a.strategy_of):
        if not 0 <= k < n_strats:
            violations.append(
                Violation(
                    "strategy_selection",
                    ids[pos],
                    k,
                    f"layer {ids[pos]} selects strategy {k} of {n_strats}",
                )
            )
        elif not math.isfinite(costs.M[pos, k]):
            violations.append(
                Violation(
                    "strategy_selection",
                    ids[pos],
                    k,
                    f"layer {ids[pos]}: strategy {costs.strategies[k].tag} is infeasible "
                    f"for micro-batch {ctx.micro_batch}",
                )
            )
    if violations:
        return violations

    counts = collections.Counter(a.stage_of)
    for i in range(deg):
        if not counts[i]:
            violations.append(
                Violation("layer_placement", i, 1, f"stage {i} is empty")
            )

    for i in range(deg):
        members = {ids[pos] for pos, s in enumerate(a.stage_of) if s == i}
        if members and not is_contiguous(graph, members):
            violations.append(
                Violation(
                    "order_preserving",
                    i,
                    0,
                    f"stage {i} layers {sorted(members)} are not contiguous",
                )
            )
    for a_pos, b_pos in graph.edge_positions:
        if a.stage_of[a_pos] > a.stage_of[b_pos]:
            violations.append(
                Violation(
                    "stage_order",
                    (ids[a_pos], ids[b_pos]),
                    a.stage_of[a_pos] - a.stage_of[b_pos],
                    f"edge ({ids[a_pos]}, {ids[b_pos]}) runs from stage "
                    f"{a.stage_of[a_pos]} back to stage {a.stage_of[b_pos]}",
                )
            )

    p, o, mem, objective = evaluate_assignment(a.stage_of, a.strategy_of, costs, deg, ctx.c)
    for i in range(deg):
        if mem[i] > limits[i]:
            violations.append(
                Violation(
                    "memory",
                    i,
                    mem[i] - limits[i],
                    f"stage {i} needs {mem[i]:.6g} bytes per device, limit {limits[i]:.6g}",
                )
            )

    if abs(objective - a.objective) > OBJECTIVE_TOL * max(1.0, abs(objective)):
        violations.append(
            Violation(
                "objective",
                None,
                a.objective - objective,
                f"objective mismatch: recorded {a.objective!r}, recomputed {objective!r}",
            )
        )
    return violations


class SolverBase:
    slug = NotImplemented

    def __init__(self, **kwargs):
        """
        :param kwargs:
        :keyword time_limit_s: Wall-clock budget of one solve
        :keyword gap_tol: Relative gap at which the search stops
        :keyword soft_time_s: After this runtime, stop once the gap is below soft_gap
        :keyword soft_gap: Gap accepted after soft_time_s
        :keyword cutoff_time_s: After this runtime, stop if previous_best cannot be beaten
        :keyword previous_best: Best objective of an earlier configuration
        :keyword config_filepath: Yaml config file
        """
        self._config = Config(kwargs.get("config_filepath"))

        self.time_limit_s = kwargs.get(
            "time_limit_s", self._config.get_property("planner.solver.time_limit_s")
        )
        self.gap_tol = kwargs.get("gap_tol", self._config.get_property("planner.solver.gap_tol"))
        self.soft_time_s = kwargs.get("soft_time_s", self._optional("planner.solver.soft_time_s"))
        self.soft_gap = kwargs.get("soft_gap", self._optional("planner.solver.soft_gap"))
        self.cutoff_time_s = kwargs.get(
            "cutoff_time_s", self._optional("planner.solver.cutoff_time_s")
        )
        self.previous_best = kwargs.get("previous_best")

        if self.gap_tol < 0:
            raise SolverInputException(f"gap_tol must be >= 0, got {self.gap_tol}")

    def _optional(self, property_path):
        try:
            return self._config.get_property(property_path)
        except ConfigurationException:
            return None

    def solve(self, costs, graph, ctx, mem_limits):
        """
        :return: (Assignment or None, SolveStats)
        """
        raise NotImplementedError

    @staticmethod
    def infeasibility_witness(costs, ctx, limits):
        if costs.num_layers < ctx.deg:
            return f"layer_placement: {costs.num_layers} layers cannot fill {ctx.deg} stages"
        cap = max(limits)
        for pos, u in enumerate(costs.layer_ids):
            if not (costs.M[pos] <= cap).any():
                return f"memory: no strategy of layer {u} fits {cap:.6g} bytes"
        return "memory: no placement keeps every stage within its limit"

    @staticmethod
    def _stats(nodes, best_bound, incumbent, started, terminated_by, witness=None):
        if math.isfinite(incumbent):
            best_bound = min(best_bound, incumbent)
            gap = (incumbent - best_bound) / max(incumbent, GAP_EPS)
        else:
            gap = math.inf
        return SolveStats(
            nodes_explored=nodes,
            best_bound=best_bound,
            incumbent=incumbent,
            gap=gap,
            wall_time=time.perf_counter() - started,
            terminated_by=terminated_by,
            witness=witness,
        )
