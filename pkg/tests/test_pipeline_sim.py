import collections
from types import SimpleNamespace

import numpy as np
import pytest

from uniplan.pipeline_sim import (
    BACKWARD,
    FORWARD,
    SimulationInputException,
    StageTimes,
    estimate_tpi,
    flow_shop_makespan,
    relative_error,
    simulate_gpipe,
    split_cost,
    stage_times_from,
    trace_frame,
    trace_from_document,
    trace_to_document,
)
from uniplan.solvers.base.solver_base import Assignment


def random_times(rng, kappa=None):
    deg = int(rng.integers(1, 5))
    fp = tuple(float(x) for x in rng.uniform(0.0, 2.0, deg))
    fo = tuple(float(x) for x in rng.uniform(0.0, 1.0, deg - 1))
    if kappa is None:
        bp = tuple(float(x) for x in rng.uniform(0.0, 4.0, deg))
        bo = tuple(float(x) for x in rng.uniform(0.0, 2.0, deg - 1))
    else:
        bp = tuple(kappa * f for f in fp)
        bo = tuple(kappa * f for f in fo)
    return StageTimes(fp=fp, bp=bp, fo=fo, bo=bo)


@pytest.mark.basic
@pytest.mark.parametrize(
    "times,c,expected",
    [
        (StageTimes(fp=(2.0,), bp=(4.0,)), 1, 6.0),
        (StageTimes(fp=(1.0, 1.0), bp=(2.0, 2.0), fo=(1.0,), bo=(2.0,)), 1, 9.0),
        (StageTimes(fp=(1.0, 1.0), bp=(2.0, 2.0), fo=(0.0,), bo=(0.0,)), 2, 9.0),
    ],
)
def test_simulate_gpipe_examples(times, c, expected):
    assert simulate_gpipe(times, c).makespan_s == pytest.approx(expected)


@pytest.mark.basic
def test_estimate_tpi_examples():
    assert estimate_tpi(StageTimes(fp=(2.0,), bp=(4.0,)), 1) == pytest.approx(6.0)
    times = StageTimes(fp=(1.0, 1.0), bp=(2.0, 2.0), fo=(0.5,), bo=(0.5,))
    assert estimate_tpi(times, 4) == pytest.approx(16.0)
    assert estimate_tpi(times, 1) == pytest.approx(7.0)


@pytest.mark.basic
def test_simulate_gpipe_rejects_bad_input():
    with pytest.raises(SimulationInputException):
        simulate_gpipe(StageTimes(fp=(1.0,), bp=(2.0,)), 0)
    with pytest.raises(SimulationInputException):
        simulate_gpipe(StageTimes(fp=(1.0, 1.0), bp=(2.0, 2.0)), 1)
    with pytest.raises(SimulationInputException):
        estimate_tpi(StageTimes(fp=(-1.0,), bp=(2.0,)), 1)


@pytest.mark.basic
@pytest.mark.parametrize("actual,estimated,expected", [(10, 10, 0.0), (10, 9, 10.0), (8, 10, 25.0)])
def test_relative_error(actual, estimated, expected):
    assert relative_error(actual, estimated) == pytest.approx(expected)


@pytest.mark.basic
@pytest.mark.parametrize("actual", [0.0, -1.0])
def test_relative_error_needs_positive_actual(actual):
    with pytest.raises(SimulationInputException):
        relative_error(actual, 1.0)


@pytest.mark.property
def test_estimate_is_lower_bound_of_simulation():
    rng = np.random.default_rng(31)
    for _ in range(1000):
        times = random_times(rng)
        c = int(rng.integers(1, 9))
        assert estimate_tpi(times, c) <= simulate_gpipe(times, c).makespan_s + 1e-9


@pytest.mark.property
def test_proportional_backward_matches_estimate():
    rng = np.random.default_rng(32)
    for _ in range(1000):
        times = random_times(rng, kappa=2.0)
        c = int(rng.integers(1, 9))
        makespan = simulate_gpipe(times, c).makespan_s
        assert makespan == pytest.approx(estimate_tpi(times, c), rel=1e-9, abs=1e-9)


@pytest.mark.property
def test_forward_wave_is_a_flow_shop():
    rng = np.random.default_rng(33)
    for _ in range(200):
        times = random_times(rng)
        c = int(rng.integers(1, 9))
        durations = [x for pair in zip(times.fp, times.fo) for x in pair] + [times.fp[-1]]
        makespan = simulate_gpipe(times, c, backward=False).makespan_s
        assert makespan == pytest.approx(flow_shop_makespan(durations, c), rel=1e-9, abs=1e-9)


@pytest.mark.basic
def test_flow_shop_makespan():
    assert flow_shop_makespan([1.0, 3.0, 2.0], 4) == pytest.approx(15.0)
    assert flow_shop_makespan([], 3) == 0.0


@pytest.mark.property
def test_trace_invariants():
    rng = np.random.default_rng(34)
    for _ in range(50):
        times = random_times(rng)
        c = int(rng.integers(1, 6))
        trace = simulate_gpipe(times, c)
        deg = len(times.fp)
        assert len(trace.events) == 2 * c * (2 * deg - 1)

        by_resource = collections.defaultdict(list)
        for e in trace.events:
            by_resource[e.resource].append(e)
        for events in by_resource.values():
            events.sort(key=lambda e: e.start_s)
            for first, second in zip(events, events[1:]):
                assert first.end_s <= second.start_s + 1e-12

        order = list(trace.resources)
        for m in range(c):
            forward = sorted(
                (e for e in trace.events if e.micro_batch == m and e.phase == FORWARD),
                key=lambda e: order.index(e.resource),
            )
            backward = sorted(
                (e for e in trace.events if e.micro_batch == m and e.phase == BACKWARD),
                key=lambda e: -order.index(e.resource),
            )
            for steps in (forward, backward):
                for first, second in zip(steps, steps[1:]):
                    assert first.end_s <= second.start_s + 1e-12

        flush = max(e.end_s for e in trace.events if e.phase == FORWARD)
        assert all(e.start_s >= flush - 1e-12 for e in trace.events if e.phase == BACKWARD)


@pytest.mark.basic
def test_stage_times_from_splits_by_ratio():
    assignment = Assignment(per_stage_cost=(0.12, 0.06), per_boundary_cost=(0.03,))
    times = stage_times_from(assignment, SimpleNamespace(bp_fp_ratio=2.0))
    assert times.fp == pytest.approx((0.04, 0.02))
    assert times.bp == pytest.approx((0.08, 0.04))
    assert times.fo == pytest.approx((0.01,))
    assert times.bo == pytest.approx((0.02,))
    assert split_cost(0.0, 2.0) == (0.0, 0.0)


@pytest.mark.basic
def test_single_stage_assignment_has_no_boundaries():
    times = stage_times_from(Assignment(per_stage_cost=(0.3,)), SimpleNamespace(bp_fp_ratio=2.0))
    assert times.fo == () and times.bo == ()
    assert simulate_gpipe(times, 4).makespan_s == pytest.approx(estimate_tpi(times, 4))


@pytest.mark.basic
def test_trace_document_and_frame():
    times = StageTimes(fp=(1.0, 2.0), bp=(2.0, 4.0), fo=(0.5,), bo=(1.0,))
    trace = simulate_gpipe(times, 3)
    assert trace_from_document(trace_to_document(trace)) == trace

    frame = trace_frame(trace)
    assert list(frame.columns) == ["resource", "micro_batch", "phase", "start_s", "end_s"]
    assert len(frame) == len(trace.events)
    assert set(frame["resource"]) == {"stage0", "boundary0", "stage1"}

    with pytest.raises(SimulationInputException):
        trace_from_document({"events": [{"resource": "stage0"}]})
