"""
Time and memory cost model.

Builds the constant matrices the optimizer consumes for one (deg, c) configuration:

- A[u, k]      per-micro-batch FP+BP seconds of layer u under strategy k
- R[e, k, l]   same-stage resharding seconds on edge e
- Rp[e, j, k, l] cross-stage P2P resharding seconds on edge e over boundary j
- M[u, k]      per-device bytes; +inf marks an infeasible (layer, strategy) pair
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import enumerate_strategies
from .helpers.logging import get_logger
from .profile import allreduce_time, overlap, p2p_time

logger = get_logger("cost-model")

INFEASIBLE = math.inf

# backward compute is twice the forward compute
BP_FP_RATIO = 2.0

# bytes of model state per byte of parameters: param + grad + two optimizer moments
C_DTYPE = {"fp32": 4, "fp16_mixed": 8}

INFLIGHT_RULES = ("gpipe", "1f1b")

# FSDP moves two parameter all-gathers plus one gradient reduce-scatter per
# iteration; each is half of a ring all-reduce.
FSDP_SYNC_FACTOR = 1.5


class PlanContextException(ValueError):
    pass


class NoFeasibleStrategyException(Exception):
    def __init__(self, layer_id, message=None):
        self.layer_id = layer_id
        super().__init__(message or f"no feasible strategy for layer {layer_id}")


@dataclass(frozen=True)
class PlanContext:
    deg: int
    c: int
    mini_batch: int
    n: int
    precision: str = "fp32"
    inflight_rule: str = "gpipe"

    def __post_init__(self):
        if self.deg < 1 or self.c < 1 or self.mini_batch < 1 or self.n < 1:
            raise PlanContextException(
                f"deg, c, mini_batch and n must be >= 1 (deg={self.deg}, c={self.c}, "
                f"B={self.mini_batch}, n={self.n})"
            )
        if self.mini_batch % self.c:
            raise PlanContextException(f"c={self.c} does not divide B={self.mini_batch}")
        if self.n % self.deg:
            raise PlanContextException(f"deg={self.deg} does not divide n={self.n}")
        if self.precision not in C_DTYPE:
            raise PlanContextException(
                f"precision must be one of {sorted(C_DTYPE)}, got {self.precision!r}"
            )
        if self.inflight_rule not in INFLIGHT_RULES:
            raise PlanContextException(
                f"inflight_rule must be one of {INFLIGHT_RULES}, got {self.inflight_rule!r}"
            )

    @property
    def micro_batch(self):
        return self.mini_batch // self.c

    @property
    def per_stage_devices(self):
        return self.n // self.deg

    @property
    def c_dtype(self):
        return C_DTYPE[self.precision]

    @property
    def inflight(self):
        """Micro-batches whose activations a stage holds at peak."""
        if self.inflight_rule == "1f1b":
            return min(self.c, self.deg)
        return self.c

    @property
    def boundaries(self):
        return self.deg - 1

    def as_dict(self):
        return {
            "deg": self.deg,
            "c": self.c,
            "mini_batch": self.mini_batch,
            "n": self.n,
            "precision": self.precision,
            "inflight_rule": self.inflight_rule,
        }


@dataclass
class CostMatrices:
    A: np.ndarray
    R: np.ndarray
    Rp: np.ndarray
    M: np.ndarray
    strategies: object
    context: PlanContext
    layer_ids: list
    edges: list = field(default_factory=list)
    bp_fp_ratio: float = BP_FP_RATIO

    @property
    def num_layers(self):
        return self.A.shape[0]

    @property
    def num_strategies(self):
        return self.A.shape[1]

    @property
    def num_edges(self):
        return len(self.edges)

    def min_exec_cost(self, mem_limit=math.inf):
        """Cheapest A per layer among strategies whose memory fits `mem_limit`."""
        masked = np.where(self.M <= mem_limit, self.A, np.inf)
        return masked.min(axis=1)

    def as_dict(self):
        def clean(array):
            return np.where(np.isfinite(array), array, -1.0).tolist()

        return {
            "context": self.context.as_dict(),
            "layer_ids": list(self.layer_ids),
            "edges": [list(e) for e in self.edges],
            "strategies": [s.as_dict() for s in self.strategies],
            "A": self.A.tolist(),
            "R": self.R.tolist(),
            "Rp": self.Rp.tolist(),
            # infeasible entries dumped as -1
            "M": clean(self.M),
        }


def _feasible_pair(layer, s, ctx):
    b = ctx.micro_batch
    if b % s.dp:
        return False
    return s.tp in layer.fwd_time_per_sample and s.tp in layer.act_bytes_per_sample


def grad_sync_time(layer, s, profile):
    """Per-iteration DP all-reduce (or FSDP gather/scatter) of this layer's gradients."""
    if s.dp == 1:
        return 0.0
    volume = layer.param_bytes / s.tp
    sync = allreduce_time(volume, s.dp, profile)
    if s.fsdp_shard:
        sync *= FSDP_SYNC_FACTOR
    return sync


def layer_exec_cost(layer, s, ctx, profile):
    """Per-micro-batch FP + BP seconds of `layer` under strategy `s`, or INFEASIBLE."""
    if not _feasible_pair(layer, s, ctx):
        return INFEASIBLE

    b = ctx.micro_batch
    fp = (b / s.dp) * layer.fwd_time_per_sample[s.tp]
    bp = BP_FP_RATIO * fp

    volume = b * layer.tp_comm_bytes_per_sample
    tp_fwd = allreduce_time(volume, s.tp, profile)
    tp_bwd = allreduce_time(BP_FP_RATIO * volume, s.tp, profile)

    forward = overlap(fp, tp_fwd, profile.ccoc)
    backward = overlap(bp, tp_bwd, profile.ccoc)
    return forward + backward + grad_sync_time(layer, s, profile) / ctx.c


def layer_memory(layer, s, ctx):
    """Per-device bytes: model states + in-flight activations + context, or INFEASIBLE."""
    if not _feasible_pair(layer, s, ctx):
        return INFEASIBLE

    m_s = ctx.c_dtype * layer.param_bytes / (s.tp * s.fs)
    m_a = ctx.inflight * (ctx.micro_batch / s.dp) * layer.act_bytes_per_sample[s.tp]
    return m_s + m_a + layer.ctx_bytes


def same_layout(s_u, s_v):
    # activations are split along the batch over dp and replicated across tp
    return s_u.dp == s_v.dp and s_u.tp == s_v.tp


def resharding_cost(edge, s_u, s_v, ctx, profile, cross_stage, boundary=None):
    volume = ctx.micro_batch * edge.tensor_bytes_per_sample
    if cross_stage:
        fan_out = max(1, s_v.tp // s_u.tp)
        return p2p_time(volume / min(s_u.dp, s_v.dp), profile, boundary) * fan_out

    if same_layout(s_u, s_v):
        return 0.0
    group = max(s_u.dp, s_v.dp) // min(s_u.dp, s_v.dp)
    return allreduce_time(volume, group, profile)


def build_cost_matrices(graph, profile, ctx):
    space = enumerate_strategies(ctx.per_stage_devices)
    n_layers, n_strats = len(graph), len(space)
    n_bound = ctx.boundaries

    A = np.zeros((n_layers, n_strats))
    M = np.zeros((n_layers, n_strats))
    for u, layer in enumerate(graph.nodes):
        for k, s in enumerate(space):
            cost = layer_exec_cost(layer, s, ctx, profile)
            if math.isinf(cost):
                M[u, k] = INFEASIBLE
                continue
            A[u, k] = cost
            M[u, k] = layer_memory(layer, s, ctx)
        if not np.isfinite(M[u]).any():
            raise NoFeasibleStrategyException(
                layer.id,
                f"no feasible strategy for layer {layer.id} with micro-batch "
                f"{ctx.micro_batch} on {ctx.per_stage_devices} devices per stage",
            )

    R = np.zeros((len(graph.edges), n_strats, n_strats))
    Rp = np.zeros((len(graph.edges), n_bound, n_strats, n_strats))
    for e, edge in enumerate(graph.edges):
        for k, s_u in enumerate(space):
            for l, s_v in enumerate(space):
                R[e, k, l] = resharding_cost(edge, s_u, s_v, ctx, profile, cross_stage=False)
                for j in range(n_bound):
                    Rp[e, j, k, l] = resharding_cost(
                        edge, s_u, s_v, ctx, profile, cross_stage=True, boundary=j
                    )

    logger.debug(
        f"Built cost matrices for deg={ctx.deg} c={ctx.c}: "
        f"{n_layers} layers x {n_strats} strategies, {len(graph.edges)} edges"
    )
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
