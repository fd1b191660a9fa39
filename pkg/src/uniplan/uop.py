"""
Unified optimization over pipeline degree and micro-batch count.

The single-stage model is solved first; then every (deg, c) with deg a factor
of the device count and c a factor of the mini-batch gets its own cost
matrices and exact solve. The best plan is the strict minimum in
configuration order, so ties go to the smaller deg, then the smaller c.
"""

import collections
import io
import math
import multiprocessing
import os

from .cost_model import NoFeasibleStrategyException, PlanContext, build_cost_matrices
from .graph import enumerate_strategies
from .helpers.config import Config
from .helpers.logging import get_logger
from .miqp import build_miqp, build_qip, export_lp, linearize
from .profile import stage_memory_limits
from .solvers.branch_and_bound import BranchAndBound, root_lower_bound

logger = get_logger("uop")

SOLVED = "solved"
INFEASIBLE = "infeasible"
SKIPPED = "skipped"

config_result_fields = {
    "deg": 1,
    "c": 1,
    "objective": math.inf,
    "status": SOLVED,
    "stats": None,
    "witness": None,
    "model_kind": "miqp",
}

ConfigResult = collections.namedtuple(
    "ConfigResult", config_result_fields.keys(), defaults=config_result_fields.values()
)

plan_fields = {
    "deg": 1,
    "c": 1,
    "assignment": None,
    "est_tpi": math.inf,
    "context": None,
    "strategies": (),
    "stats": (),
}

ParallelPlan = collections.namedtuple(
    "ParallelPlan", plan_fields.keys(), defaults=plan_fields.values()
)


class PlannerInfeasibleException(Exception):
    def __init__(self, witnesses):
        self.witnesses = list(witnesses)
        lines = [f"deg={deg} c={c}: {witness}" for deg, c, witness in self.witnesses]
        super().__init__("no feasible configuration\n  " + "\n  ".join(lines))


class PlannerInputException(ValueError):
    pass


def factors(x):
    """Divisors of x except 1, ascending."""
    if x < 1:
        raise PlannerInputException(f"factors needs x >= 1, got {x}")
    return [d for d in range(2, x + 1) if x % d == 0]


def _model_text(costs, graph, ctx, limits):
    if ctx.deg == 1:
        model = build_qip(costs, graph, limits[0])
    else:
        model = build_miqp(costs, graph, ctx, limits)
    sink = io.StringIO()
    export_lp(linearize(model), sink)
    return sink.getvalue()


def solve_configuration(task):
    """
    One (deg, c) configuration, end to end. Module level so a worker pool can pickle it.

    :return: (ConfigResult, Assignment or None, lp text or None)
    """
    graph, profile, ctx, budget, export, previous_best = task
    kind = "qip" if ctx.deg == 1 else "miqp"
    limits = stage_memory_limits(profile, ctx.deg)

    try:
        costs = build_cost_matrices(graph, profile, ctx)
    except NoFeasibleStrategyException as e:
        logger.info(f"deg={ctx.deg} c={ctx.c}: {e}")
        result = ConfigResult(
            ctx.deg, ctx.c, math.inf, INFEASIBLE, None, f"strategy_selection: {e}", kind
        )
        return result, None, None

    if previous_best is not None and root_lower_bound(costs, ctx, limits) > previous_best:
        logger.info(f"deg={ctx.deg} c={ctx.c}: lower bound exceeds {previous_best:.6g}, skipped")
        return ConfigResult(ctx.deg, ctx.c, math.inf, SKIPPED, None, None, kind), None, None

    lp_text = _model_text(costs, graph, ctx, limits) if export else None

    solver = BranchAndBound(previous_best=previous_best, **budget)
    assignment, stats = solver.solve(costs, graph, ctx, limits)
    if assignment is None:
        logger.info(f"deg={ctx.deg} c={ctx.c}: infeasible ({stats.witness})")
        result = ConfigResult(ctx.deg, ctx.c, math.inf, INFEASIBLE, stats, stats.witness, kind)
        return result, None, lp_text

    logger.info(
        f"deg={ctx.deg} c={ctx.c}: {assignment.objective:.6g} s "
        f"({stats.terminated_by}, {stats.nodes_explored} nodes, {stats.wall_time:.3f} s)"
    )
    result = ConfigResult(ctx.deg, ctx.c, assignment.objective, SOLVED, stats, None, kind)
    return result, assignment, lp_text


class UnifiedOptimizer:
    def __init__(self, **kwargs):
        """
        :param kwargs:
        :keyword precision: fp32 | fp16_mixed
        :keyword inflight_rule: gpipe | 1f1b
        :keyword qip_micro_batches: Micro-batch count of the single-stage model
        :keyword jobs: Worker processes for the configuration sweep
        :keyword budget: Solver keywords (time_limit_s, gap_tol, soft_time_s, ...)
        :keyword previous_best_cutoff: Skip configurations that cannot beat the best so far
        :keyword export_lp: Keep the LP text of every configuration in `lp_texts`
        :keyword config_filepath: Yaml config file
        """
        self._config = Config(kwargs.get("config_filepath"))
        get = self._config.get_property

        self.precision = kwargs.get("precision", get("planner.precision"))
        self.inflight_rule = kwargs.get("inflight_rule", get("planner.inflight_rule"))
        self.qip_micro_batches = kwargs.get("qip_micro_batches", get("planner.qip_micro_batches"))
        self.jobs = kwargs.get("jobs", get("planner.jobs"))
        self.previous_best_cutoff = kwargs.get(
            "previous_best_cutoff", get("planner.solver.previous_best_cutoff")
        )
        self.export_lp = kwargs.get("export_lp", False)

        # solver defaults come from the same config file
        self.budget = dict(kwargs.get("budget") or {})
        if kwargs.get("config_filepath"):
            self.budget.setdefault("config_filepath", kwargs["config_filepath"])

        self.lp_texts = collections.OrderedDict()
        self.solve_count = 0

    def contexts(self, n, mini_batch):
        qip_c = self.qip_micro_batches
        if mini_batch % qip_c:
            logger.warning(
                f"qip_micro_batches={qip_c} does not divide B={mini_batch}; using 1"
            )
            qip_c = 1
        yield self._context(1, qip_c, mini_batch, n)
        for deg in factors(n):
            for c in factors(mini_batch):
                yield self._context(deg, c, mini_batch, n)

    def _context(self, deg, c, mini_batch, n):
        return PlanContext(
            deg=deg,
            c=c,
            mini_batch=mini_batch,
            n=n,
            precision=self.precision,
            inflight_rule=self.inflight_rule,
        )

    def optimize(self, graph, profile, mini_batch):
        """
        :return: ParallelPlan of the global optimum
        :raises PlannerInfeasibleException: when no configuration is feasible
        """
        if mini_batch < 1:
            raise PlannerInputException(f"batch must be >= 1, got {mini_batch}")
        contexts = list(self.contexts(profile.n, mini_batch))
        logger.info(f"Sweeping {len(contexts)} configurations for n={profile.n} B={mini_batch}")

        if self.jobs > 1 and not self.previous_best_cutoff:
            outcomes = self._sweep_parallel(graph, profile, contexts)
        else:
            outcomes = self._sweep(graph, profile, contexts)

        best = None
        results = []
        for ctx, (result, assignment, lp_text) in zip(contexts, outcomes):
            results.append(result)
            # configurations rejected before the search carry no stats
            if result.stats is not None:
                self.solve_count += 1
            if lp_text is not None:
                self.lp_texts[f"deg{ctx.deg}_c{ctx.c}"] = lp_text
            if assignment is None:
                continue
            if best is None or assignment.objective < best[1].objective:
                best = (ctx, assignment)

        if best is None:
            raise PlannerInfeasibleException(
                (r.deg, r.c, r.witness) for r in results if r.status == INFEASIBLE
            )

        ctx, assignment = best
        strategies = enumerate_strategies(ctx.per_stage_devices)
        logger.info(f"Best plan: deg={ctx.deg} c={ctx.c} est_tpi={assignment.objective:.6g} s")
        return ParallelPlan(
            deg=ctx.deg,
            c=ctx.c,
            assignment=assignment,
            est_tpi=assignment.objective,
            context=ctx,
            strategies=tuple(strategies),
            stats=tuple(results),
        )

    def _task(self, graph, profile, ctx, previous_best=None):
        return graph, profile, ctx, self.budget, self.export_lp, previous_best

    def _sweep(self, graph, profile, contexts):
        outcomes = []
        best = None
        for ctx in contexts:
            previous_best = best if self.previous_best_cutoff else None
            outcome = solve_configuration(self._task(graph, profile, ctx, previous_best))
            outcomes.append(outcome)
            if outcome[1] is not None and (best is None or outcome[1].objective < best):
                best = outcome[1].objective
        return outcomes

    def _sweep_parallel(self, graph, profile, contexts):
        workers = min(self.jobs, len(contexts), os.cpu_count() or 1)
        if workers <= 1:
            return self._sweep(graph, profile, contexts)
        tasks = [self._task(graph, profile, ctx) for ctx in contexts]
        pool_ctx = multiprocessing.get_context("spawn")
        with pool_ctx.Pool(processes=workers) as pool:
            # map keeps configuration order, so the reduction is scheduling independent
            return pool.map(solve_configuration, tasks)


def unified_optimize(graph, profile, mini_batch, options=None):
    return UnifiedOptimizer(**(options or {})).optimize(graph, profile, mini_batch)
