"""Versioned JSON form of a ParallelPlan plus the provenance of the run that produced it."""

import math
from dataclasses import dataclass, field

from . import __version__
from .cost_model import PlanContext
from .helpers.logging import get_logger
from .helpers.util import file_digest
from .solvers.base.solver_base import Assignment

logger = get_logger("plan-document")

SCHEMA_VERSION = "v1"


class PlanDocumentException(ValueError):
    pass


@dataclass(frozen=True)
class PlanDocument:
    deg: int
    c: int
    mini_batch: int
    n: int
    est_tpi: float
    layer_ids: tuple
    stage_of: tuple
    strategy_of: tuple
    strategies: tuple
    per_stage_cost: tuple
    per_boundary_cost: tuple
    per_stage_memory: tuple
    precision: str = "fp32"
    inflight_rule: str = "gpipe"
    configurations: tuple = ()
    provenance: dict = field(default_factory=dict)
    version: str = SCHEMA_VERSION

    def context(self):
        return PlanContext(
            deg=self.deg,
            c=self.c,
            mini_batch=self.mini_batch,
            n=self.n,
            precision=self.precision,
            inflight_rule=self.inflight_rule,
        )

    def assignment(self):
        return Assignment(
            stage_of=tuple(self.stage_of),
            strategy_of=tuple(self.strategy_of),
            objective=self.est_tpi,
            per_stage_cost=tuple(self.per_stage_cost),
            per_boundary_cost=tuple(self.per_boundary_cost),
            per_stage_memory=tuple(self.per_stage_memory),
            layer_ids=tuple(self.layer_ids),
        )

    def as_dict(self):
        return {
            "version": self.version,
            "plan": {
                "deg": self.deg,
                "c": self.c,
                "mini_batch": self.mini_batch,
                "n": self.n,
                "precision": self.precision,
                "inflight_rule": self.inflight_rule,
                "est_tpi": self.est_tpi,
                "layers": [
                    {
                        "id": u,
                        "stage": s,
                        "strategy": k,
                        **self.strategies[k],
                    }
                    for u, s, k in zip(self.layer_ids, self.stage_of, self.strategy_of)
                ],
                "strategies": [dict(s) for s in self.strategies],
                "per_stage_cost": list(self.per_stage_cost),
                "per_boundary_cost": list(self.per_boundary_cost),
                "per_stage_memory": list(self.per_stage_memory),
                "configurations": [dict(c) for c in self.configurations],
            },
            "provenance": dict(self.provenance),
        }


def _finite_or_none(value):
    return value if value is not None and math.isfinite(value) else None


def configuration_rows(stats):
    rows = []
    for result in stats:
        solve = result.stats
        rows.append(
            {
                "deg": result.deg,
                "c": result.c,
                "model": result.model_kind,
                "status": result.status,
                "objective": _finite_or_none(result.objective),
                "terminated_by": solve.terminated_by if solve else None,
                "gap": _finite_or_none(solve.gap) if solve else None,
                "nodes": solve.nodes_explored if solve else 0,
                "witness": result.witness,
            }
        )
    return tuple(rows)


def provenance_for(model_path=None, profile_path=None, wall_time_s=None):
    return {
        "model_sha256": file_digest(model_path) if model_path else None,
        "profile_sha256": file_digest(profile_path) if profile_path else None,
        "planner_version": __version__,
        "wall_time_s": wall_time_s,
    }


def plan_document(plan, provenance=None):
    """PlanDocument for a ParallelPlan returned by the optimizer."""
    a = plan.assignment
    ctx = plan.context
    return PlanDocument(
        deg=plan.deg,
        c=plan.c,
        mini_batch=ctx.mini_batch,
        n=ctx.n,
        precision=ctx.precision,
        inflight_rule=ctx.inflight_rule,
        est_tpi=plan.est_tpi,
        layer_ids=tuple(a.layer_ids),
        stage_of=tuple(a.stage_of),
        strategy_of=tuple(a.strategy_of),
        strategies=tuple(s.as_dict() for s in plan.strategies),
        per_stage_cost=tuple(a.per_stage_cost),
        per_boundary_cost=tuple(a.per_boundary_cost),
        per_stage_memory=tuple(a.per_stage_memory),
        configurations=configuration_rows(plan.stats),
        provenance=dict(provenance or {}),
    )


def load_plan_document(document):
    """Parse a plan JSON object; raises PlanDocumentException on schema errors."""
    if not isinstance(document, dict):
        raise PlanDocumentException("plan document must be a JSON object")
    version = document.get("version")
    if version != SCHEMA_VERSION:
        raise PlanDocumentException(f"unsupported plan document version {version!r}")

    try:
        plan = document["plan"]
        layers = plan["layers"]
        strategies = tuple(
            {"dp": int(s["dp"]), "tp": int(s["tp"]), "fsdp": bool(s["fsdp"])}
            for s in plan["strategies"]
        )
        parsed = PlanDocument(
            deg=int(plan["deg"]),
            c=int(plan["c"]),
            mini_batch=int(plan["mini_batch"]),
            n=int(plan["n"]),
            precision=str(plan.get("precision", "fp32")),
            inflight_rule=str(plan.get("inflight_rule", "gpipe")),
            est_tpi=float(plan["est_tpi"]),
            layer_ids=tuple(int(layer["id"]) for layer in layers),
            stage_of=tuple(int(layer["stage"]) for layer in layers),
            strategy_of=tuple(int(layer["strategy"]) for layer in layers),
            strategies=strategies,
            per_stage_cost=tuple(float(p) for p in plan["per_stage_cost"]),
            per_boundary_cost=tuple(float(o) for o in plan["per_boundary_cost"]),
            per_stage_memory=tuple(float(m) for m in plan["per_stage_memory"]),
            configurations=tuple(dict(c) for c in plan.get("configurations", [])),
            provenance=dict(document.get("provenance", {})),
            version=version,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise PlanDocumentException(f"Malformed plan document: {e!r}")

    for k in parsed.strategy_of:
        if not 0 <= k < len(parsed.strategies):
            raise PlanDocumentException(f"strategy index {k} outside the strategy table")
    if len(parsed.per_stage_cost) != parsed.deg or len(parsed.per_boundary_cost) != parsed.deg - 1:
        raise PlanDocumentException(
            f"stage/boundary cost lists do not match deg={parsed.deg}"
        )
    logger.debug(f"Loaded plan deg={parsed.deg} c={parsed.c} over {len(layers)} layers")
    return parsed
