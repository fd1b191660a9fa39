"""
GPipe schedule: closed-form iteration time and a discrete-event simulation.

The simulation is stage level. Every stage and every boundary is a FIFO
resource; all c micro-batches run forward through stage 0, boundary 0,
stage 1, ... and, once the last stage has finished every forward (the flush),
run backward through the resources in reverse order.
"""

import collections

import pandas as pd
import simpy

from .helpers.logging import get_logger

logger = get_logger("pipeline-sim")

FORWARD = "forward"
BACKWARD = "backward"

stage_times_fields = {"fp": (), "bp": (), "fo": (), "bo": ()}
StageTimes = collections.namedtuple(
    "StageTimes", stage_times_fields.keys(), defaults=stage_times_fields.values()
)

event_fields = {"resource": None, "micro_batch": 0, "phase": FORWARD, "start_s": 0.0, "end_s": 0.0}
Event = collections.namedtuple("Event", event_fields.keys(), defaults=event_fields.values())

trace_fields = {"events": (), "makespan_s": 0.0, "resources": ()}
EventTrace = collections.namedtuple(
    "EventTrace", trace_fields.keys(), defaults=trace_fields.values()
)


class SimulationInputException(ValueError):
    pass


def stage_name(i):
    return f"stage{i}"


def boundary_name(j):
    return f"boundary{j}"


def split_cost(total, bp_fp_ratio):
    forward = total / (1.0 + bp_fp_ratio)
    return forward, total - forward


def stage_times_from(assignment, costs):
    """Split each stage and boundary cost into forward and backward parts by the FP:BP ratio."""
    ratio = costs.bp_fp_ratio
    fp, bp = zip(*(split_cost(p, ratio) for p in assignment.per_stage_cost))
    if assignment.per_boundary_cost:
        fo, bo = zip(*(split_cost(o, ratio) for o in assignment.per_boundary_cost))
    else:
        fo, bo = (), ()
    return StageTimes(fp=tuple(fp), bp=tuple(bp), fo=tuple(fo), bo=tuple(bo))


def _check_times(times, c):
    if c < 1:
        raise SimulationInputException(f"c must be >= 1, got {c}")
    deg = len(times.fp)
    if deg < 1 or len(times.bp) != deg:
        raise SimulationInputException("fp and bp must have one entry per stage")
    if len(times.fo) != deg - 1 or len(times.bo) != deg - 1:
        raise SimulationInputException("fo and bo must have one entry per boundary")
    if any(t < 0 for t in (*times.fp, *times.bp, *times.fo, *times.bo)):
        raise SimulationInputException("stage and boundary times must be >= 0")
    return deg


def estimate_tpi(times, c):
    """sum(p) + sum(o) + (c - 1) * max(p U o)."""
    _check_times(times, c)
    p = [f + b for f, b in zip(times.fp, times.bp)]
    o = [f + b for f, b in zip(times.fo, times.bo)]
    return sum(p + o) + (c - 1) * max(p + o)


def flow_shop_makespan(durations, c):
    """Identical-job permutation flow shop: sum + (c - 1) * max."""
    durations = list(durations)
    return sum(durations) + (c - 1) * max(durations, default=0.0)


def simulate_gpipe(times, c, backward=True):
    """
    :param backward: False simulates the forward wave only
    :return: EventTrace
    """
    deg = _check_times(times, c)

    env = simpy.Environment()
    chain = []
    for i in range(deg):
        chain.append((stage_name(i), times.fp[i], times.bp[i]))
        if i < deg - 1:
            chain.append((boundary_name(i), times.fo[i], times.bo[i]))
    resources = {name: simpy.Resource(env, capacity=1) for name, _, _ in chain}
    events = []

    def run(micro_batch, phase, steps):
        for name, duration in steps:
            with resources[name].request() as slot:
                yield slot
                start = env.now
                yield env.timeout(duration)
                events.append(Event(name, micro_batch, phase, start, env.now))

    def schedule():
        forward_steps = [(name, f) for name, f, _ in chain]
        forwards = [env.process(run(m, FORWARD, forward_steps)) for m in range(c)]
        yield simpy.AllOf(env, forwards)
        logger.debug(f"flush at {env.now:.6g}")
        if not backward:
            return
        backward_steps = [(name, b) for name, _, b in reversed(chain)]
        backwards = [env.process(run(m, BACKWARD, backward_steps)) for m in range(c)]
        yield simpy.AllOf(env, backwards)

    env.process(schedule())
    env.run()

    makespan = max((e.end_s for e in events), default=0.0)
    events.sort(key=lambda e: (e.start_s, e.phase != FORWARD, e.resource, e.micro_batch))
    return EventTrace(
        events=tuple(events), makespan_s=makespan, resources=tuple(name for name, _, _ in chain)
    )


def relative_error(actual, estimated):
    """|actual - estimated| / actual, in percent."""
    if not actual > 0:
        raise SimulationInputException(f"actual must be > 0, got {actual}")
    return abs(actual - estimated) / actual * 100.0


def trace_frame(trace):
    """One row per event, the shape the Gantt renderer plots."""
    return pd.DataFrame(
        [e._asdict() for e in trace.events], columns=list(event_fields.keys())
    )


def trace_to_document(trace):
    return {
        "makespan_s": trace.makespan_s,
        "resources": list(trace.resources),
        "events": [e._asdict() for e in trace.events],
    }


def trace_from_document(document):
    try:
        events = tuple(
            Event(
                resource=str(e["resource"]),
                micro_batch=int(e["micro_batch"]),
                phase=str(e["phase"]),
                start_s=float(e["start_s"]),
                end_s=float(e["end_s"]),
            )
            for e in document["events"]
        )
        return EventTrace(
            events=events,
            makespan_s=float(document["makespan_s"]),
            resources=tuple(document["resources"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SimulationInputException(f"Malformed trace document: {e!r}")
