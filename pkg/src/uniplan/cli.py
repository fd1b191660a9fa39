"""
uniplan command line.

    uniplan plan --model M.json --profile P.json --batch B [--out plan.json]
    uniplan validate --plan plan.json --model M.json --profile P.json
    uniplan render --plan plan.json [--gantt] [--raw]

Exit codes: 0 success, 1 input error, 2 no feasible configuration,
3 constraint violations, 4 I/O failure.
"""

import argparse
import json
import os
import sys
import time

import pandas as pd

from . import __version__
from .cost_model import NoFeasibleStrategyException, PlanContextException, build_cost_matrices
from .graph import GraphInputException, enumerate_strategies, load_graph, validate_graph
from .helpers.config import ConfigurationException
from .helpers.logging import get_logger
from .helpers.util import DataReadException, load_json_file
from .pipeline_sim import (
    SimulationInputException,
    estimate_tpi,
    relative_error,
    simulate_gpipe,
    stage_times_from,
    trace_from_document,
    trace_to_document,
)
from .plan_document import (
    PlanDocumentException,
    load_plan_document,
    plan_document,
    provenance_for,
)
from .profile import ProfileSchemaException, divisors, load_profile, stage_memory_limits
from .render import gantt_svg, raw_matrices, stage_map
from .solvers.base.solver_base import check_assignment, make_assignment
from .uop import PlannerInfeasibleException, PlannerInputException, UnifiedOptimizer

logger = get_logger("cli")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_VIOLATIONS = 3
EXIT_IO = 4

PRECISIONS = {"fp32": "fp32", "fp16-mixed": "fp16_mixed"}


class CliException(Exception):
    def __init__(self, exit_code, message):
        self.exit_code = exit_code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _read_json(path, what):
    try:
        return load_json_file(path)
    except DataReadException as e:
        raise CliException(EXIT_INPUT, str(e))
    except OSError as e:
        raise CliException(EXIT_IO, f"cannot read {what} {path}: {e.strerror or e}")


def _write_text(path, text):
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as file:
            file.write(text)
    except OSError as e:
        raise CliException(EXIT_IO, f"cannot write {path}: {e.strerror or e}")


def strategy_tp_sizes(n):
    """Every TP size some (deg, strategy) pair over n devices can ask for."""
    return sorted({tp for g in divisors(n) for tp in enumerate_strategies(g).tp_sizes})


def _load_inputs(model_path, profile_path):
    try:
        graph = load_graph(_read_json(model_path, "model"))
        profile = load_profile(_read_json(profile_path, "profile"))
    except (GraphInputException, ProfileSchemaException) as e:
        raise CliException(EXIT_INPUT, str(e))

    violations = validate_graph(graph, tp_sizes=strategy_tp_sizes(profile.n))
    if violations:
        details = "\n".join(f"  {v.kind}: {v.message}" for v in violations)
        raise CliException(EXIT_INPUT, f"invalid model {model_path}:\n{details}")
    return graph, profile


def sidecar_path(plan_path, suffix):
    """plan.json -> plan.<suffix>"""
    root, _ = os.path.splitext(plan_path)
    return f"{root}.{suffix}"


def summary_frame(document, limits):
    rows = []
    for i in range(document.deg):
        layers = [u for u, s in zip(document.layer_ids, document.stage_of) if s == i]
        rows.append(
            {
                "stage": i,
                "layers": f"{layers[0]}-{layers[-1]}" if layers else "",
                "p_s": document.per_stage_cost[i],
                "o_s": document.per_boundary_cost[i] if i < document.deg - 1 else None,
                "mem_gb": document.per_stage_memory[i] / 1e9,
                "headroom_gb": (limits[i] - document.per_stage_memory[i]) / 1e9,
            }
        )
    return pd.DataFrame(rows)


def configurations_frame(document):
    columns = ["deg", "c", "model", "status", "objective", "terminated_by", "nodes"]
    return pd.DataFrame(list(document.configurations), columns=columns)


def cmd_plan(args):
    if args.batch < 1:
        raise CliException(EXIT_INPUT, "batch must be ≥ 1")
    graph, profile = _load_inputs(args.model, args.profile)

    budget = {}
    if args.time_limit is not None:
        budget["time_limit_s"] = args.time_limit
    if args.gap is not None:
        budget["gap_tol"] = args.gap
    options = {"budget": budget, "export_lp": bool(args.export_lp)}
    if args.precision:
        options["precision"] = PRECISIONS[args.precision]
    if args.jobs is not None:
        options["jobs"] = args.jobs
    if args.config:
        options["config_filepath"] = args.config

    started = time.perf_counter()
    try:
        optimizer = UnifiedOptimizer(**options)
        plan = optimizer.optimize(graph, profile, args.batch)
    except PlannerInfeasibleException as e:
        raise CliException(EXIT_INFEASIBLE, str(e))
    except (ConfigurationException, PlanContextException, PlannerInputException) as e:
        raise CliException(EXIT_INPUT, str(e))
    wall_time = time.perf_counter() - started

    document = plan_document(plan, provenance_for(args.model, args.profile, wall_time))
    _write_text(args.out, json.dumps(document.as_dict(), indent=2) + "\n")
    if args.export_lp:
        for name, text in optimizer.lp_texts.items():
            _write_text(os.path.join(args.export_lp, f"{name}.lp"), text)
    if args.dump_matrices:
        costs = build_cost_matrices(graph, profile, plan.context)
        _write_text(
            sidecar_path(args.out, "matrices.json"), json.dumps(costs.as_dict(), indent=2) + "\n"
        )

    limits = stage_memory_limits(profile, plan.deg)
    print(stage_map(document), end="")
    print(summary_frame(document, limits).to_string(index=False))
    print()
    print(configurations_frame(document).to_string(index=False))
    if args.raw:
        print(raw_matrices(document), end="")
    print(f"\nwrote {args.out} ({optimizer.solve_count} solves, {wall_time:.2f} s)")
    return EXIT_OK


def cmd_validate(args):
    try:
        document = load_plan_document(_read_json(args.plan, "plan"))
    except PlanDocumentException as e:
        raise CliException(EXIT_INPUT, str(e))
    graph, profile = _load_inputs(args.model, args.profile)

    if list(document.layer_ids) != list(graph.ids):
        raise CliException(
            EXIT_INPUT,
            f"plan covers layers {list(document.layer_ids)}, model has {list(graph.ids)}",
        )
    try:
        ctx = document.context()
        costs = build_cost_matrices(graph, profile, ctx)
        limits = stage_memory_limits(profile, ctx.deg)
    except (PlanContextException, ValueError) as e:
        raise CliException(EXIT_INPUT, str(e))
    except NoFeasibleStrategyException as e:
        raise CliException(EXIT_INFEASIBLE, str(e))

    expected = [s.as_dict() for s in enumerate_strategies(ctx.per_stage_devices)]
    if list(document.strategies) != expected:
        raise CliException(
            EXIT_INPUT,
            f"plan strategy table does not match {ctx.per_stage_devices} devices per stage",
        )

    violations = check_assignment(document.assignment(), costs, graph, ctx, limits)
    if violations:
        print(f"{len(violations)} violation(s):")
        for v in violations:
            print(f"  {v.family}: {v.message}")
        return EXIT_VIOLATIONS

    assignment = make_assignment(document.stage_of, document.strategy_of, costs, ctx.deg, ctx.c)
    times = stage_times_from(assignment, costs)
    trace = simulate_gpipe(times, ctx.c)
    closed_form = estimate_tpi(times, ctx.c)
    if trace.makespan_s == 0.0 and document.est_tpi == 0.0:
        # all-zero costs: the schedule is empty and matches its estimate
        ree = 0.0
    else:
        try:
            ree = relative_error(trace.makespan_s, document.est_tpi)
        except SimulationInputException as e:
            raise CliException(EXIT_INPUT, str(e))

    trace_path = args.trace or sidecar_path(args.plan, "trace.json")
    _write_text(trace_path, json.dumps(trace_to_document(trace), indent=2) + "\n")

    print(f"est_tpi         {document.est_tpi:.9g} s")
    print(f"closed form     {closed_form:.9g} s")
    print(f"simulated       {trace.makespan_s:.9g} s")
    print(f"REE             {ree:.3f} %")
    print(f"trace           {trace_path}")
    return EXIT_OK


def cmd_render(args):
    try:
        document = load_plan_document(_read_json(args.plan, "plan"))
    except PlanDocumentException as e:
        raise CliException(EXIT_INPUT, str(e))

    print(stage_map(document), end="")
    if args.raw:
        print(raw_matrices(document), end="")
    if not args.gantt:
        return EXIT_OK

    trace_path = args.trace or sidecar_path(args.plan, "trace.json")
    if not os.path.exists(trace_path):
        raise CliException(
            EXIT_IO, f"no trace at {trace_path}; run `uniplan validate` on the plan first"
        )
    try:
        trace = trace_from_document(_read_json(trace_path, "trace"))
    except SimulationInputException as e:
        raise CliException(EXIT_INPUT, str(e))

    out = args.out or sidecar_path(args.plan, "gantt.svg")
    _write_text(out, gantt_svg(trace))
    print(f"wrote {out} ({len(trace.resources)} rows)")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="uniplan", description="Joint pipeline/intra-layer parallelism planner.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    plan = commands.add_parser("plan", help="Search the best parallel plan.")
    plan.add_argument("--model", required=True, help="Model JSON (layers and edges).")
    plan.add_argument("--profile", required=True, help="Cluster profile JSON.")
    plan.add_argument("--batch", required=True, type=int, help="Mini-batch size B.")
    plan.add_argument("--precision", choices=sorted(PRECISIONS), default=None)
    plan.add_argument(
        "--time-limit", type=float, default=None, help="Seconds per solve (default 60)."
    )
    plan.add_argument(
        "--gap", type=float, default=None, help="Relative gap tolerance (default 1e-4)."
    )
    plan.add_argument("--out", default="plan.json", help="Plan document path.")
    plan.add_argument(
        "--export-lp", default=None, metavar="DIR", help="Write one .lp per configuration."
    )
    plan.add_argument("--jobs", type=int, default=None, help="Worker processes for the sweep.")
    plan.add_argument("--config", default=None, help="Planner YAML config.")
    plan.add_argument("--raw", action="store_true", help="Also print the 0/1 P and S matrices.")
    plan.add_argument(
        "--dump-matrices",
        action="store_true",
        help="Write the cost matrices of the chosen configuration to <out>.matrices.json.",
    )
    plan.set_defaults(func=cmd_plan)

    validate = commands.add_parser("validate", help="Check a plan and simulate its schedule.")
    validate.add_argument("--plan", required=True)
    validate.add_argument("--model", required=True)
    validate.add_argument("--profile", required=True)
    validate.add_argument("--trace", default=None, help="Trace output (default <plan>.trace.json).")
    validate.set_defaults(func=cmd_validate)

    render = commands.add_parser("render", help="Print the stage map, optionally a Gantt SVG.")
    render.add_argument("--plan", required=True)
    render.add_argument("--gantt", action="store_true")
    render.add_argument("--trace", default=None, help="Trace input (default <plan>.trace.json).")
    render.add_argument("--out", default=None, help="SVG output (default <plan>.gantt.svg).")
    render.add_argument("--raw", action="store_true")
    render.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.func(args)
    except CliException as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
