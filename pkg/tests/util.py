import functools
import json
import logging
import os
from contextlib import contextmanager
from os import path

import numpy as np

from uniplan.cost_model import CostMatrices, PlanContext
from uniplan.graph import ComputationGraph, EdgeInfo, LayerNode, enumerate_strategies

logger = logging.getLogger()

TP_SIZES = (1, 2, 4)


class DataReadException(Exception):
    pass


@contextmanager
def file_reader(filename):
    relative_filename = path.join(path.dirname(__file__), filename)
    file = open(relative_filename, "r")
    try:
        yield file
    finally:
        file.close()


def json_reader(filename, ignore_missing=False):
    try:
        with file_reader(filename) as file:
            data = file.read()
            return json.loads(data)
    except FileNotFoundError as e:
        if not ignore_missing:
            raise e
    except json.JSONDecodeError:
        raise DataReadException(f"Could not decode data at: {filename}")
    return None


def json_writer(filename, data):
    relative_filename = path.join(path.dirname(__file__), filename)
    if not os.path.isfile(relative_filename):
        directory = os.path.dirname(relative_filename)
        os.makedirs(directory, exist_ok=True)

        logger.warning(f"creating fixture for: {relative_filename}")
    with open(relative_filename, "w") as file:
        file.write(json.dumps(data, indent=2))


def traverse_nested(value, key_path=None, sep="."):
    """Deeply traverse a nested dictionary while keeping the full path of the keys."""

    if not key_path:
        key_path = []
    if isinstance(value, dict):
        for k, v in value.items():
            local_path = key_path[:]
            local_path.append(k)
            yield from traverse_nested(v, local_path)
    else:
        yield sep.join(key_path), value


def deepgetattr(obj, attr, default=None, sep="."):
    """Recurse through an attribute chain to get the ultimate value."""

    return functools.reduce(lambda o, key: o.get(key, default), attr.split(sep), obj)


def make_layer(layer_id, fwd=0.01, param_bytes=0.0, act=0.0, ctx_bytes=0.0, tp_comm=0.0):
    return LayerNode(
        id=layer_id,
        kind="layer",
        fwd_time_per_sample={tp: fwd / tp for tp in TP_SIZES},
        param_bytes=param_bytes,
        act_bytes_per_sample={tp: act / tp for tp in TP_SIZES},
        ctx_bytes=ctx_bytes,
        tp_comm_bytes_per_sample=tp_comm,
    )


def chain_graph(n_layers, tensor_bytes=0.0, **layer_kwargs):
    nodes = tuple(make_layer(u, **layer_kwargs) for u in range(n_layers))
    edges = tuple(EdgeInfo(u, u + 1, tensor_bytes) for u in range(n_layers - 1))
    return ComputationGraph(nodes=nodes, edges=edges)


def random_layer(rng, layer_id):
    fwd = float(rng.uniform(1e-3, 1e-2))
    overhead = float(rng.uniform(0.0, 0.3))
    act = float(rng.uniform(1e5, 1e6))
    return LayerNode(
        id=layer_id,
        kind="layer",
        fwd_time_per_sample={tp: fwd * (1.0 / tp + overhead * (tp - 1) / tp) for tp in TP_SIZES},
        param_bytes=float(rng.uniform(1e6, 5e7)),
        act_bytes_per_sample={tp: act / tp for tp in TP_SIZES},
        ctx_bytes=float(rng.uniform(0.0, 1e6)),
        tp_comm_bytes_per_sample=float(rng.uniform(1e4, 1e5)),
    )


def random_graph(rng, n_layers, chain=False, extra_edge_prob=0.3):
    """
    Weakly connected DAG in topological id order: every layer v > 0 gets one edge
    from an earlier layer, plus optional extra forward edges.
    """
    nodes = tuple(random_layer(rng, u) for u in range(n_layers))
    pairs = set()
    for v in range(1, n_layers):
        u = v - 1 if chain else int(rng.integers(0, v))
        pairs.add((u, v))
    if not chain:
        for u in range(n_layers):
            for v in range(u + 2, n_layers):
                if rng.random() < extra_edge_prob:
                    pairs.add((u, v))
    edges = tuple(
        EdgeInfo(u, v, float(rng.uniform(1e4, 1e6))) for u, v in sorted(pairs)
    )
    return ComputationGraph(nodes=nodes, edges=edges)


def random_costs(rng, graph, deg, c=2, per_stage_devices=2, infeasible_prob=0.1):
    """
    CostMatrices with small integer-ish entries so exact ties occur. Every layer
    keeps at least one feasible strategy.
    """
    space = enumerate_strategies(per_stage_devices)
    n_layers, n_strats, n_edges = len(graph), len(space), len(graph.edges)

    A = rng.integers(1, 10, size=(n_layers, n_strats)) / 10.0
    M = rng.integers(1, 5, size=(n_layers, n_strats)).astype(float)
    for u in range(n_layers):
        for k in range(n_strats):
            if rng.random() < infeasible_prob:
                M[u, k] = np.inf
        if not np.isfinite(M[u]).any():
            M[u, int(rng.integers(0, n_strats))] = float(rng.integers(1, 5))
    A = np.where(np.isfinite(M), A, 0.0)

    R = rng.integers(0, 4, size=(n_edges, n_strats, n_strats)) / 20.0
    for e in range(n_edges):
        np.fill_diagonal(R[e], 0.0)
    Rp = rng.integers(1, 6, size=(n_edges, max(deg - 1, 0), n_strats, n_strats)) / 20.0

    ctx = PlanContext(deg=deg, c=c, mini_batch=c, n=deg * per_stage_devices)
    return CostMatrices(
        A=A,
        R=R,
        Rp=Rp,
        M=M,
        strategies=space,
        context=ctx,
        layer_ids=list(graph.ids),
        edges=list(graph.edge_positions),
    )


def random_limits(rng, costs, deg):
    """Per-stage limits between tight and loose, relative to the cheapest total memory."""
    floor = float(np.where(np.isfinite(costs.M), costs.M, np.inf).min(axis=1).sum())
    return [float(rng.uniform(0.5, 1.2)) * floor for _ in range(deg)]


def read_lp(text):
    """Section-level reader for the CPLEX LP files the planner writes."""
    sections = {"objective": [], "constraints": [], "bounds": [], "binaries": []}
    current = None
    headings = {
        "Minimize": "objective",
        "Subject To": "constraints",
        "Bounds": "bounds",
        "Binary": "binaries",
    }
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        if line in headings:
            current = headings[line]
            continue
        if line == "End":
            break
        if current == "constraints" and not raw.startswith("   "):
            sections["constraints"].append(line.split(":", 1)[0])
        elif current == "binaries":
            sections["binaries"].append(line)
        elif current == "bounds":
            sections["bounds"].append(line.split()[0])
        elif current == "objective":
            sections["objective"].append(line)
    return sections
