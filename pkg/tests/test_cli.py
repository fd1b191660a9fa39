import json
import os

import pytest

import uniplan
from uniplan.cli import (
    EXIT_INFEASIBLE,
    EXIT_INPUT,
    EXIT_IO,
    EXIT_OK,
    EXIT_VIOLATIONS,
    main,
    sidecar_path,
    strategy_tp_sizes,
)
from uniplan.cost_model import PlanContext, build_cost_matrices
from uniplan.graph import ComputationGraph, dump_graph, enumerate_strategies
from uniplan.plan_document import plan_document
from uniplan.profile import dump_profile, stage_memory_limits, synth_profile
from uniplan.solvers.base.solver_base import make_assignment
from uniplan.solvers.exhaustive import solve_exhaustive
from uniplan.uop import ParallelPlan, UnifiedOptimizer
from .util import chain_graph, deepgetattr, json_reader, json_writer, traverse_nested

DATA_DIR = os.path.join(os.path.dirname(uniplan.__file__), "data")


def write_json(path, document):
    path.write_text(json.dumps(document))
    return str(path)


@pytest.fixture
def inputs(tmp_path):
    graph = chain_graph(4, tensor_bytes=2e5, fwd=0.01, param_bytes=1e7, act=1e5)
    profile = synth_profile(2, 1e10, latency_s=1e-5, ccoc=0.2)
    return (
        graph,
        profile,
        write_json(tmp_path / "model.json", dump_graph(graph)),
        write_json(tmp_path / "profile.json", dump_profile(profile)),
    )


def write_plan(path, graph, profile, stage_of, strategy_of, deg, c, batch, est_tpi=None):
    ctx = PlanContext(deg=deg, c=c, mini_batch=batch, n=profile.n)
    costs = build_cost_matrices(graph, profile, ctx)
    assignment = make_assignment(stage_of, strategy_of, costs, deg, c)
    plan = ParallelPlan(
        deg=deg,
        c=c,
        assignment=assignment,
        est_tpi=assignment.objective if est_tpi is None else est_tpi,
        context=ctx,
        strategies=tuple(enumerate_strategies(ctx.per_stage_devices)),
    )
    return write_json(path, plan_document(plan).as_dict())


@pytest.mark.basic
def test_plan_matches_exhaustive_sweep(inputs, tmp_path, capsys):
    graph, profile, model, prof = inputs
    out = str(tmp_path / "plan.json")
    code = main(
        ["plan", "--model", model, "--profile", prof, "--batch", "2", "--gap", "0", "--out", out]
    )
    assert code == EXIT_OK
    assert "stage 0 |" in capsys.readouterr().out

    document = json.loads(open(out).read())
    best = None
    for ctx in UnifiedOptimizer().contexts(profile.n, 2):
        costs = build_cost_matrices(graph, profile, ctx)
        oracle, _ = solve_exhaustive(costs, graph, ctx, stage_memory_limits(profile, ctx.deg))
        if oracle is not None and (best is None or oracle.objective < best[1].objective):
            best = (ctx, oracle)
    ctx, oracle = best
    assert (document["plan"]["deg"], document["plan"]["c"]) == (ctx.deg, ctx.c)
    assert document["plan"]["est_tpi"] == pytest.approx(oracle.objective, rel=1e-12)
    assert [layer["stage"] for layer in document["plan"]["layers"]] == list(oracle.stage_of)
    assert document["provenance"]["model_sha256"]


@pytest.mark.basic
def test_plan_rejects_zero_batch(inputs, tmp_path, capsys):
    _, _, model, prof = inputs
    code = main(["plan", "--model", model, "--profile", prof, "--batch", "0"])
    assert code == EXIT_INPUT
    assert "batch must be" in capsys.readouterr().err


@pytest.mark.basic
def test_usage_errors_exit_with_input_code():
    assert main(["plan", "--batch", "2"]) == EXIT_INPUT
    assert main([]) == EXIT_INPUT


@pytest.mark.basic
def test_plan_exports_lp_files(inputs, tmp_path):
    _, _, model, prof = inputs
    lp_dir = tmp_path / "lp"
    code = main(
        [
            "plan", "--model", model, "--profile", prof, "--batch", "2",
            "--out", str(tmp_path / "plan.json"), "--export-lp", str(lp_dir),
        ]
    )
    assert code == EXIT_OK
    assert sorted(os.listdir(lp_dir)) == ["deg1_c1.lp", "deg2_c2.lp"]
    assert "Subject To" in (lp_dir / "deg2_c2.lp").read_text()


@pytest.mark.basic
def test_plan_infeasible(tmp_path, capsys):
    graph = chain_graph(3, param_bytes=1e9)
    model = write_json(tmp_path / "model.json", dump_graph(graph))
    tiny = synth_profile(2, 1e10, mem_bytes=1e3)
    prof = write_json(tmp_path / "profile.json", dump_profile(tiny))
    out = str(tmp_path / "p.json")
    code = main(["plan", "--model", model, "--profile", prof, "--batch", "2", "--out", out])
    assert code == EXIT_INFEASIBLE
    assert "no feasible configuration" in capsys.readouterr().err


@pytest.mark.basic
def test_plan_invalid_model(tmp_path, capsys):
    graph = chain_graph(3)
    disconnected = ComputationGraph(nodes=graph.nodes, edges=graph.edges[:1])
    model = write_json(tmp_path / "model.json", dump_graph(disconnected))
    prof = write_json(tmp_path / "profile.json", dump_profile(synth_profile(2, 1e10)))
    code = main(["plan", "--model", model, "--profile", prof, "--batch", "2"])
    assert code == EXIT_INPUT
    assert "disconnected" in capsys.readouterr().err


@pytest.mark.basic
def test_missing_and_malformed_inputs(inputs, tmp_path):
    _, _, model, prof = inputs
    missing = str(tmp_path / "nope.json")
    assert main(["plan", "--model", missing, "--profile", prof, "--batch", "2"]) == EXIT_IO
    assert main(["render", "--plan", missing]) == EXIT_IO

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["plan", "--model", str(broken), "--profile", prof, "--batch", "2"]) == EXIT_INPUT
    assert main(["validate", "--plan", str(broken), "--model", model, "--profile", prof]) == (
        EXIT_INPUT
    )


@pytest.mark.basic
def test_validate_planner_plan(inputs, tmp_path, capsys):
    graph, profile, model, prof = inputs
    plan = write_plan(tmp_path / "plan.json", graph, profile, (0, 0, 1, 1), (0, 0, 0, 0), 2, 2, 4)
    code = main(["validate", "--plan", plan, "--model", model, "--profile", prof])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "REE             0.000 %" in out
    assert os.path.exists(sidecar_path(plan, "trace.json"))


@pytest.mark.basic
def test_validate_empty_stage(inputs, tmp_path, capsys):
    graph, profile, model, prof = inputs
    plan = write_plan(tmp_path / "plan.json", graph, profile, (0, 0, 0, 0), (0, 0, 0, 0), 2, 2, 4)
    code = main(["validate", "--plan", plan, "--model", model, "--profile", prof])
    assert code == EXIT_VIOLATIONS
    assert "layer_placement: stage 1 is empty" in capsys.readouterr().out
    assert not os.path.exists(sidecar_path(plan, "trace.json"))


@pytest.mark.basic
def test_validate_perturbed_estimate(inputs, tmp_path, capsys):
    graph, profile, model, prof = inputs
    plan = write_plan(
        tmp_path / "plan.json", graph, profile, (0, 1, 1, 1), (0, 0, 0, 0), 2, 2, 4, est_tpi=1e3
    )
    code = main(["validate", "--plan", plan, "--model", model, "--profile", prof])
    assert code == EXIT_VIOLATIONS
    assert "objective mismatch" in capsys.readouterr().out


@pytest.mark.basic
def test_render_gantt_needs_trace(inputs, tmp_path, capsys):
    graph, profile, model, prof = inputs
    plan = write_plan(tmp_path / "plan.json", graph, profile, (0, 0, 1, 1), (0, 0, 0, 0), 2, 2, 4)

    assert main(["render", "--plan", plan, "--gantt"]) == EXIT_IO
    assert "run `uniplan validate`" in capsys.readouterr().err

    assert main(["validate", "--plan", plan, "--model", model, "--profile", prof]) == EXIT_OK
    assert main(["render", "--plan", plan, "--gantt", "--raw"]) == EXIT_OK
    svg = sidecar_path(plan, "gantt.svg")
    assert open(svg).read().lstrip().startswith("<?xml")
    assert "stage 1 |" in capsys.readouterr().out


@pytest.mark.slow
def test_bundled_bert_end_to_end(tmp_path, capsys):
    model = os.path.join(DATA_DIR, "bert_chain.json")
    prof = os.path.join(DATA_DIR, "profile_4gpu.json")
    plan = str(tmp_path / "plan.json")

    assert main(["plan", "--model", model, "--profile", prof, "--batch", "16", "--out", plan]) == (
        EXIT_OK
    )
    assert main(["validate", "--plan", plan, "--model", model, "--profile", prof]) == EXIT_OK
    assert "REE             0.000 %" in capsys.readouterr().out

    body = json.loads(open(plan).read())["plan"]
    plan_data = {
        "deg": body["deg"],
        "c": body["c"],
        "est_tpi": body["est_tpi"],
        "stages": {str(layer["id"]): layer["stage"] for layer in body["layers"]},
        "strategies": {
            str(layer["id"]): f"dp{layer['dp']}-tp{layer['tp']}-{layer['fsdp']}"
            for layer in body["layers"]
        },
    }

    fixture = "fixtures/plans/bert-chain-plan.json"
    precomputed = json_reader(fixture, True)
    if precomputed is None:
        json_writer(fixture, plan_data)
        precomputed = plan_data

    for nested_key, value in traverse_nested(precomputed):
        if isinstance(value, float):
            assert deepgetattr(plan_data, nested_key) == pytest.approx(value, rel=1e-9)
        else:
            assert deepgetattr(plan_data, nested_key) == value


@pytest.mark.basic
@pytest.mark.parametrize("n,sizes", [(1, [1]), (2, [1, 2]), (6, [1, 2]), (8, [1, 2, 4, 8])])
def test_strategy_tp_sizes(n, sizes):
    assert strategy_tp_sizes(n) == sizes


@pytest.mark.basic
def test_plan_rejects_missing_tp_entries(tmp_path, capsys):
    document = dump_graph(chain_graph(2))
    for layer in document["layers"]:
        del layer["fwd_time_per_sample"]["2"]
        del layer["act_bytes_per_sample"]["2"]
    model = write_json(tmp_path / "model.json", document)
    prof = write_json(tmp_path / "profile.json", dump_profile(synth_profile(2, 1e10)))
    out = tmp_path / "plan.json"

    code = main(["plan", "--model", model, "--profile", prof, "--batch", "2", "--out", str(out)])
    assert code == EXIT_INPUT
    err = capsys.readouterr().err
    assert "missing-tp-entry" in err
    assert "no entry for TP size 2" in err
    assert not out.exists()


@pytest.mark.basic
def test_zero_cost_model_validates(tmp_path, capsys):
    model = write_json(tmp_path / "model.json", dump_graph(chain_graph(2, fwd=0.0)))
    prof = write_json(tmp_path / "profile.json", dump_profile(synth_profile(1, 1e10)))
    plan = str(tmp_path / "plan.json")

    assert main(["plan", "--model", model, "--profile", prof, "--batch", "2", "--out", plan]) == (
        EXIT_OK
    )
    assert json.loads(open(plan).read())["plan"]["est_tpi"] == 0.0
    capsys.readouterr()

    assert main(["validate", "--plan", plan, "--model", model, "--profile", prof]) == EXIT_OK
    out = capsys.readouterr().out
    assert "simulated       0 s" in out
    assert "REE             0.000 %" in out


@pytest.mark.basic
def test_plan_dumps_cost_matrices(inputs, tmp_path):
    _, _, model, prof = inputs
    out = str(tmp_path / "plan.json")
    code = main(
        [
            "plan", "--model", model, "--profile", prof, "--batch", "2",
            "--out", out, "--dump-matrices",
        ]
    )
    assert code == EXIT_OK

    body = json.loads(open(out).read())["plan"]
    matrices = json.loads(open(sidecar_path(out, "matrices.json")).read())
    assert (matrices["context"]["deg"], matrices["context"]["c"]) == (body["deg"], body["c"])
    assert matrices["layer_ids"] == [0, 1, 2, 3]
    assert matrices["edges"] == [[0, 1], [1, 2], [2, 3]]
    assert matrices["strategies"] == body["strategies"]
    assert len(matrices["A"]) == 4
    assert all(len(row) == len(body["strategies"]) for row in matrices["A"])
    assert len(matrices["R"]) == 3
    assert all(v >= 0 or v == -1.0 for row in matrices["M"] for v in row)


@pytest.mark.basic
def test_render_gantt_is_byte_deterministic(inputs, tmp_path):
    graph, profile, model, prof = inputs
    plan = write_plan(tmp_path / "plan.json", graph, profile, (0, 0, 1, 1), (0, 0, 0, 0), 2, 2, 4)
    assert main(["validate", "--plan", plan, "--model", model, "--profile", prof]) == EXIT_OK

    first, second = tmp_path / "first.svg", tmp_path / "second.svg"
    assert main(["render", "--plan", plan, "--gantt", "--out", str(first)]) == EXIT_OK
    assert main(["render", "--plan", plan, "--gantt", "--out", str(second)]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()


@pytest.mark.slow
def test_jobs_do_not_change_the_plan(inputs, tmp_path):
    _, _, model, prof = inputs
    documents = []
    for jobs in ("1", "2"):
        out = str(tmp_path / f"plan-{jobs}.json")
        code = main(
            [
                "plan", "--model", model, "--profile", prof, "--batch", "4",
                "--out", out, "--jobs", jobs,
            ]
        )
        assert code == EXIT_OK
        document = json.loads(open(out).read())
        # the only field that depends on the run
        document["provenance"].pop("wall_time_s")
        documents.append(json.dumps(document, indent=2))
    assert documents[0] == documents[1]
