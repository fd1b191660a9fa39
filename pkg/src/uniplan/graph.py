"""
Computation graph of profiled layers and the per-stage intra-layer strategy space.

Layer ids are the ordinals a model file assigns; matrices built downstream are
indexed by node *position* in the (topological) node order, see
`ComputationGraph.position`.
"""

import collections
import math
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx

from .helpers.logging import get_logger

logger = get_logger("graph")

violation_fields = {"kind": None, "subject": None, "message": ""}

GraphViolation = collections.namedtuple(
    "GraphViolation", violation_fields.keys(), defaults=violation_fields.values()
)


class GraphInputException(ValueError):
    pass


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    fwd_time_per_sample: dict
    param_bytes: float
    act_bytes_per_sample: dict
    ctx_bytes: float = 0.0
    tp_comm_bytes_per_sample: float = 0.0

    def scalar_fields(self):
        return {
            "param_bytes": self.param_bytes,
            "ctx_bytes": self.ctx_bytes,
            "tp_comm_bytes_per_sample": self.tp_comm_bytes_per_sample,
        }


@dataclass(frozen=True)
class EdgeInfo:
    src: int
    dst: int
    tensor_bytes_per_sample: float = 0.0


@dataclass(frozen=True)
class ComputationGraph:
    nodes: tuple
    edges: tuple = field(default_factory=tuple)

    @cached_property
    def ids(self):
        return [node.id for node in self.nodes]

    @cached_property
    def position(self):
        """Layer id -> index in the node order."""
        return {node.id: pos for pos, node in enumerate(self.nodes)}

    @cached_property
    def edge_positions(self):
        return [(self.position[e.src], self.position[e.dst]) for e in self.edges]

    @cached_property
    def digraph(self):
        g = nx.DiGraph()
        g.add_nodes_from(self.ids)
        g.add_edges_from((e.src, e.dst) for e in self.edges)
        return g

    @cached_property
    def reachable(self):
        """Layer id -> set of layer ids reachable from it (itself excluded)."""
        closure = nx.transitive_closure(self.digraph, reflexive=False)
        return {u: set(closure.successors(u)) for u in self.ids}

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True)
class IntraStrategy:
    dp: int
    tp: int
    fsdp_shard: bool = False

    @property
    def fs(self):
        return self.dp if self.fsdp_shard else 1

    @property
    def devices(self):
        return self.dp * self.tp

    @property
    def tag(self):
        return f"dp{self.dp}-tp{self.tp}" + ("-fsdp" if self.fsdp_shard else "")

    def as_dict(self):
        return {"dp": self.dp, "tp": self.tp, "fsdp": self.fsdp_shard}


@dataclass(frozen=True)
class StrategySpace:
    per_stage_devices: int
    strategies: tuple

    @property
    def tp_sizes(self):
        return sorted({s.tp for s in self.strategies})

    def __len__(self):
        return len(self.strategies)

    def __iter__(self):
        return iter(self.strategies)

    def __getitem__(self, k):
        return self.strategies[k]


def enumerate_strategies(per_stage_devices):
    """
    All (dp, tp) factorizations of the per-stage device count with a power-of-two
    tp, plus an FSDP variant of every strategy with dp >= 2.

    Ordered by ascending dp, the plain variant before the sharded one.
    """
    g = int(per_stage_devices)
    if g < 1:
        raise GraphInputException(f"per_stage_devices must be >= 1, got {g}")

    strategies = []
    tp = 1
    while tp <= g:
        if g % tp == 0:
            dp = g // tp
            strategies.append(IntraStrategy(dp=dp, tp=tp, fsdp_shard=False))
            if dp >= 2:
                strategies.append(IntraStrategy(dp=dp, tp=tp, fsdp_shard=True))
        tp *= 2

    strategies.sort(key=lambda s: (s.dp, s.tp, s.fsdp_shard))
    return StrategySpace(per_stage_devices=g, strategies=tuple(strategies))


def is_contiguous(graph, subset):
    """
    False iff some v outside `subset` lies on a path between two members of it.
    """
    subset = set(subset)
    unknown = subset - set(graph.ids)
    if unknown:
        raise GraphInputException(f"Unknown layer ids in subset: {sorted(unknown)}")

    reachable = graph.reachable
    for u in subset:
        for v in reachable[u]:
            if v in subset:
                continue
            if reachable[v] & subset:
                return False
    return True


def validate_graph(graph, tp_sizes=None):
    """
    Check the ComputationGraph invariants. Violations are returned, not raised.

    :param tp_sizes: TP sizes the strategy space will ask for; when given, every
        layer's profiling tables must cover them.
    """
    violations = []
    if not graph.nodes:
        violations.append(GraphViolation("empty", None, "graph has no layers"))
        return violations

    seen = set()
    for node in graph.nodes:
        if node.id in seen:
            violations.append(
                GraphViolation("duplicate-node", node.id, f"layer {node.id} appears twice")
            )
        seen.add(node.id)

        for name, value in node.scalar_fields().items():
            if not _finite_non_negative(value):
                violations.append(
                    GraphViolation(
                        "negative-field",
                        node.id,
                        f"layer {node.id}: {name}={value} must be finite and >= 0",
                    )
                )
        for table_name in ("fwd_time_per_sample", "act_bytes_per_sample"):
            table = getattr(node, table_name)
            for tp, value in table.items():
                if not _finite_non_negative(value):
                    violations.append(
                        GraphViolation(
                            "negative-field",
                            node.id,
                            f"layer {node.id}: {table_name}[{tp}]={value} must be finite and >= 0",
                        )
                    )
            for tp in tp_sizes or ():
                if tp not in table:
                    violations.append(
                        GraphViolation(
                            "missing-tp-entry",
                            node.id,
                            f"layer {node.id}: {table_name} has no entry for TP size {tp}",
                        )
                    )

    order = {}
    for pos, node in enumerate(graph.nodes):
        order.setdefault(node.id, pos)

    pairs = set()
    for edge in graph.edges:
        subject = (edge.src, edge.dst)
        if edge.src not in order or edge.dst not in order:
            violations.append(
                GraphViolation(
                    "unknown-endpoint", subject, f"edge {subject} names an unknown layer"
                )
            )
            continue
        if edge.src == edge.dst:
            violations.append(
                GraphViolation("self-loop", subject, f"edge {subject} is a self-loop")
            )
            continue
        if subject in pairs:
            violations.append(
                GraphViolation("duplicate-edge", subject, f"edge {subject} appears twice")
            )
        pairs.add(subject)
        if order[edge.src] > order[edge.dst]:
            violations.append(
                GraphViolation(
                    "topological-order",
                    subject,
                    f"edge {subject} points backwards in the node order",
                )
            )
        if not _finite_non_negative(edge.tensor_bytes_per_sample):
            violations.append(
                GraphViolation(
                    "negative-field",
                    subject,
                    f"edge {subject}: tensor_bytes_per_sample must be finite and >= 0",
                )
            )

    if not any(v.kind in ("unknown-endpoint", "duplicate-node") for v in violations):
        if not nx.is_weakly_connected(graph.digraph):
            components = [sorted(c) for c in nx.weakly_connected_components(graph.digraph)]
            violations.append(
                GraphViolation(
                    "disconnected",
                    None,
                    f"graph is not weakly connected: components {components}",
                )
            )

    return violations


def load_graph(document):
    """Build a ComputationGraph from the model JSON document."""
    try:
        nodes = tuple(
            LayerNode(
                id=int(layer["id"]),
                kind=str(layer.get("kind", "layer")),
                fwd_time_per_sample=_tp_table(layer["fwd_time_per_sample"]),
                param_bytes=float(layer["param_bytes"]),
                act_bytes_per_sample=_tp_table(layer["act_bytes_per_sample"]),
                ctx_bytes=float(layer.get("ctx_bytes", 0.0)),
                tp_comm_bytes_per_sample=float(layer.get("tp_comm_bytes_per_sample", 0.0)),
            )
            for layer in document["layers"]
        )
        edges = tuple(
            EdgeInfo(
                src=int(edge["src"]),
                dst=int(edge["dst"]),
                tensor_bytes_per_sample=float(edge.get("tensor_bytes_per_sample", 0.0)),
            )
            for edge in document.get("edges", [])
        )
    except (KeyError, TypeError, ValueError) as e:
        raise GraphInputException(f"Malformed model document: {e!r}")

    logger.debug(f"Loaded model with {len(nodes)} layers and {len(edges)} edges")
    return ComputationGraph(nodes=nodes, edges=edges)


def dump_graph(graph):
    return {
        "layers": [
            {
                "id": node.id,
                "kind": node.kind,
                "fwd_time_per_sample": {str(k): v for k, v in node.fwd_time_per_sample.items()},
                "param_bytes": node.param_bytes,
                "act_bytes_per_sample": {str(k): v for k, v in node.act_bytes_per_sample.items()},
                "ctx_bytes": node.ctx_bytes,
                "tp_comm_bytes_per_sample": node.tp_comm_bytes_per_sample,
            }
            for node in graph.nodes
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "tensor_bytes_per_sample": e.tensor_bytes_per_sample}
            for e in graph.edges
        ],
    }


def _tp_table(table):
    return {int(k): float(v) for k, v in table.items()}


def _finite_non_negative(value):
    try:
        return math.isfinite(value) and value >= 0
    except TypeError:
        return False
