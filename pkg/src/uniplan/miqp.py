"""
MIQP of the joint placement/strategy problem, its single-stage QIP, the
product linearization to a MILP and the CPLEX LP writer.

Variable naming (all indices 0-based; u, v are layer ids):

    P_u_i          layer u placed on stage i
    S_u_k          layer u uses strategy k
    Z_u_i          order-preserving auxiliary
    p_i, o_j, t    stage cost, boundary cost, epigraph of max(p U o)
    y_u_i_k        P_u_i * S_u_k
    w_u_v_i_k_l    P_u_i * P_v_i * S_u_k * S_v_l        (edge inside stage i)
    wp_u_v_i_i2_k_l  P_u_i * P_v_i2 * S_u_k * S_v_l     (edge from stage i to i2 > i)
    x_u_v_k_l      S_u_k * S_v_l                          (single-stage model)
"""

import collections
import itertools
import math

import numpy as np

from .helpers.logging import get_logger

logger = get_logger("miqp")

BINARY = "binary"
CONTINUOUS = "continuous"

variable_fields = {"name": None, "kind": BINARY, "lb": 0.0, "ub": 1.0}
Variable = collections.namedtuple(
    "Variable", variable_fields.keys(), defaults=variable_fields.values()
)

# `product` names the linearized variable standing for the factor product
term_fields = {"coef": 0.0, "factors": (), "product": None}
Term = collections.namedtuple("Term", term_fields.keys(), defaults=term_fields.values())

constraint_fields = {
    "name": None,
    "family": None,
    "terms": (),
    "sense": "=",
    "rhs": 0.0,
    "defines": None,
}
Constraint = collections.namedtuple(
    "Constraint", constraint_fields.keys(), defaults=constraint_fields.values()
)

FAMILIES = (
    "computation_stage",
    "communication_stage",
    "memory",
    "order_preserving",
    "stage_order",
    "layer_placement",
    "strategy_selection",
    "epigraph",
    "linearization",
)


class MiqpMisuseException(ValueError):
    pass


class MiqpShapeException(ValueError):
    pass


class MiqpModel:
    kind = "miqp"

    def __init__(self, name, layer_ids, deg, c, num_strategies, num_edges):
        self.name = name
        self.layer_ids = list(layer_ids)
        self.deg = deg
        self.c = c
        self.num_strategies = num_strategies
        self.num_edges = num_edges
        self.variables = collections.OrderedDict()
        self.constraints = []
        self.objective = []
        self.infeasible_reason = None
        self._family_index = collections.Counter()

    @property
    def infeasible(self):
        return self.infeasible_reason is not None

    @property
    def num_layers(self):
        return len(self.layer_ids)

    def add_variable(self, name, kind=BINARY, lb=0.0, ub=None):
        if ub is None:
            ub = 1.0 if kind == BINARY else math.inf
        self.variables[name] = Variable(name=name, kind=kind, lb=lb, ub=ub)
        return name

    def fix(self, name, value):
        var = self.variables[name]
        self.variables[name] = var._replace(lb=value, ub=value)

    def add_constraint(self, family, terms, sense, rhs=0.0, defines=None):
        index = self._family_index[family]
        self._family_index[family] += 1
        row = Constraint(
            name=f"{family}_{index}",
            family=family,
            terms=tuple(terms),
            sense=sense,
            rhs=float(rhs),
            defines=defines,
        )
        self.constraints.append(row)
        return row

    def family_counts(self):
        return collections.Counter(row.family for row in self.constraints)

    def binaries(self):
        return [v.name for v in self.variables.values() if v.kind == BINARY]

    def continuous(self):
        return [v.name for v in self.variables.values() if v.kind == CONTINUOUS]

    def complete_values(self, values):
        """Fill continuous variables from their defining rows and the epigraph."""
        values = dict(values)
        for row in self.constraints:
            if row.defines is None:
                continue
            own, rest = 0.0, 0.0
            for term in row.terms:
                if term.factors == (row.defines,):
                    own += term.coef
                else:
                    rest += term_value(term, values)
            values[row.defines] = (row.rhs - rest) / own
        if "t" in self.variables:
            values["t"] = max(
                values[name] for name in self.continuous() if name != "t"
            )
        return values

    def evaluate(self, values):
        """Objective value for a binary assignment (continuous parts completed)."""
        values = self.complete_values(values)
        return sum(term_value(term, values) for term in self.objective)

    def violated(self, values, tol=1e-9):
        """Rows and bounds violated by a full assignment."""
        values = self.complete_values(values)
        bad = []
        for row in self.constraints:
            activity = sum(term_value(term, values) for term in row.terms)
            if row.sense == "=" and abs(activity - row.rhs) > tol:
                bad.append(row)
            elif row.sense == "<=" and activity > row.rhs + tol:
                bad.append(row)
            elif row.sense == ">=" and activity < row.rhs - tol:
                bad.append(row)
        for var in self.variables.values():
            value = values.get(var.name, 0.0)
            if value < var.lb - tol or value > var.ub + tol:
                bad.append(Constraint(name=f"bound_{var.name}", family="bound"))
        return bad


class MilpModel(MiqpModel):
    kind = "milp"

    def __init__(self, source):
        super().__init__(
            source.name,
            source.layer_ids,
            source.deg,
            source.c,
            source.num_strategies,
            source.num_edges,
        )
        self.source_kind = source.kind
        self.infeasible_reason = source.infeasible_reason
        self.products = collections.OrderedDict()

    def complete_values(self, values):
        values = dict(values)
        for name, factors in self.products.items():
            values[name] = float(all(values[f] >= 0.5 for f in factors))
        return super().complete_values(values)


def term_value(term, values):
    value = term.coef
    for factor in term.factors:
        value *= values[factor]
    return value


def assignment_values(model, stage_of, strategy_of, z=None):
    """
    Binary variable values for a placement/strategy choice.

    `stage_of` and `strategy_of` are indexed by layer position. Z defaults to the
    reachability construction of `construct_z`.
    """
    values = {}
    for pos, u in enumerate(model.layer_ids):
        for k in range(model.num_strategies):
            values[f"S_{u}_{k}"] = float(strategy_of[pos] == k)
        if f"P_{u}_0" in model.variables:
            for i in range(model.deg):
                values[f"P_{u}_{i}"] = float(stage_of[pos] == i)
    if z is not None:
        for pos, u in enumerate(model.layer_ids):
            for i in range(model.deg):
                values[f"Z_{u}_{i}"] = float(z[pos][i])
    return values


def _check_shapes(costs, graph):
    if costs.A.shape != costs.M.shape:
        raise MiqpShapeException(f"A{costs.A.shape} and M{costs.M.shape} differ")
    if costs.A.shape[0] != len(graph):
        raise MiqpShapeException(
            f"cost matrices cover {costs.A.shape[0]} layers, graph has {len(graph)}"
        )
    n_strats = costs.A.shape[1]
    if costs.R.shape != (len(graph.edges), n_strats, n_strats):
        raise MiqpShapeException(f"R has shape {costs.R.shape}")


def _fix_unusable_strategies(model, costs, mem_cap):
    for pos, u in enumerate(model.layer_ids):
        usable = 0
        for k in range(model.num_strategies):
            if not costs.M[pos, k] <= mem_cap:
                model.fix(f"S_{u}_{k}", 0.0)
            else:
                usable += 1
        if not usable and model.infeasible_reason is None:
            model.infeasible_reason = f"memory: no strategy of layer {u} fits {mem_cap:.6g} bytes"


def _memory_coef(value):
    return float(value) if math.isfinite(value) else 0.0


def build_miqp(costs, graph, ctx, mem_limits):
    """Pipeline model: objective sum(p) + sum(o) + (c-1) t with t >= every p_i, o_j."""
    if ctx.deg == 1:
        raise MiqpMisuseException("deg = 1 has no pipeline; use build_qip")
    _check_shapes(costs, graph)
    deg = ctx.deg
    if np.ndim(mem_limits) == 0:
        mem_limits = [float(mem_limits)] * deg
    if len(mem_limits) != deg:
        raise MiqpShapeException(f"expected {deg} memory limits, got {len(mem_limits)}")
    if costs.Rp.shape[1] != deg - 1:
        raise MiqpShapeException(f"Rp has {costs.Rp.shape[1]} boundaries, expected {deg - 1}")

    ids = graph.ids
    n_strats = costs.num_strategies
    model = MiqpModel(
        f"deg{deg}_c{ctx.c}", ids, deg, ctx.c, n_strats, len(graph.edges)
    )

    for u in ids:
        for i in range(deg):
            model.add_variable(f"P_{u}_{i}")
    for u in ids:
        for k in range(n_strats):
            model.add_variable(f"S_{u}_{k}")
    for u in ids:
        for i in range(deg):
            model.add_variable(f"Z_{u}_{i}")
    for i in range(deg):
        model.add_variable(f"p_{i}", CONTINUOUS)
    for j in range(deg - 1):
        model.add_variable(f"o_{j}", CONTINUOUS)
    model.add_variable("t", CONTINUOUS)

    _fix_unusable_strategies(model, costs, max(mem_limits))
    if len(ids) < deg and model.infeasible_reason is None:
        model.infeasible_reason = f"layer_placement: {len(ids)} layers cannot fill {deg} stages"

    edges = [(ids[a], ids[b], e) for e, (a, b) in enumerate(graph.edge_positions)]
    pairs = list(itertools.product(range(n_strats), repeat=2))

    # computation stages
    for i in range(deg):
        terms = [Term(1.0, (f"p_{i}",))]
        for pos, u in enumerate(ids):
            for k in range(n_strats):
                terms.append(
                    Term(-costs.A[pos, k], (f"P_{u}_{i}", f"S_{u}_{k}"), f"y_{u}_{i}_{k}")
                )
        for u, v, e in edges:
            for k, l in pairs:
                terms.append(
                    Term(
                        -costs.R[e, k, l],
                        (f"P_{u}_{i}", f"P_{v}_{i}", f"S_{u}_{k}", f"S_{v}_{l}"),
                        f"w_{u}_{v}_{i}_{k}_{l}",
                    )
                )
        model.add_constraint("computation_stage", terms, "=", 0.0, defines=f"p_{i}")

    # communication stages; an edge from stage i to i2 crosses every boundary i <= j < i2
    for j in range(deg - 1):
        terms = [Term(1.0, (f"o_{j}",))]
        for u, v, e in edges:
            for i in range(j + 1):
                for i2 in range(j + 1, deg):
                    for k, l in pairs:
                        terms.append(
                            Term(
                                -costs.Rp[e, j, k, l],
                                (f"P_{u}_{i}", f"P_{v}_{i2}", f"S_{u}_{k}", f"S_{v}_{l}"),
                                f"wp_{u}_{v}_{i}_{i2}_{k}_{l}",
                            )
                        )
        model.add_constraint("communication_stage", terms, "=", 0.0, defines=f"o_{j}")

    for i in range(deg):
        terms = [
            Term(_memory_coef(costs.M[pos, k]), (f"P_{u}_{i}", f"S_{u}_{k}"), f"y_{u}_{i}_{k}")
            for pos, u in enumerate(ids)
            for k in range(n_strats)
        ]
        model.add_constraint("memory", terms, "<=", mem_limits[i])

    # order preserving
    for u in ids:
        for i in range(deg):
            model.add_constraint(
                "order_preserving",
                [Term(1.0, (f"Z_{u}_{i}",)), Term(-1.0, (f"P_{u}_{i}",))],
                ">=",
                0.0,
            )
    for u, v, _ in edges:
        for i in range(deg):
            model.add_constraint(
                "order_preserving",
                [Term(1.0, (f"Z_{v}_{i}",)), Term(-1.0, (f"Z_{u}_{i}",))],
                "<=",
                0.0,
            )
    for u, v, _ in edges:
        for i in range(deg):
            model.add_constraint(
                "order_preserving",
                [
                    Term(1.0, (f"Z_{v}_{i}",)),
                    Term(-1.0, (f"P_{v}_{i}",)),
                    Term(1.0, (f"P_{u}_{i}",)),
                ],
                "<=",
                1.0,
            )

    # stage indices never decrease along an edge
    for u, v, _ in edges:
        for j in range(deg - 1):
            terms = [Term(1.0, (f"P_{v}_{i}",)) for i in range(j + 1)]
            terms += [Term(-1.0, (f"P_{u}_{i}",)) for i in range(j + 1)]
            model.add_constraint("stage_order", terms, "<=", 0.0)

    for u in ids:
        model.add_constraint(
            "layer_placement", [Term(1.0, (f"P_{u}_{i}",)) for i in range(deg)], "=", 1.0
        )
    for i in range(deg):
        model.add_constraint(
            "layer_placement", [Term(1.0, (f"P_{u}_{i}",)) for u in ids], ">=", 1.0
        )

    _add_strategy_selection(model, ids, n_strats)

    for i in range(deg):
        model.add_constraint(
            "epigraph", [Term(1.0, ("t",)), Term(-1.0, (f"p_{i}",))], ">=", 0.0
        )
    for j in range(deg - 1):
        model.add_constraint(
            "epigraph", [Term(1.0, ("t",)), Term(-1.0, (f"o_{j}",))], ">=", 0.0
        )

    model.objective = [Term(1.0, (f"p_{i}",)) for i in range(deg)]
    model.objective += [Term(1.0, (f"o_{j}",)) for j in range(deg - 1)]
    model.objective.append(Term(float(ctx.c - 1), ("t",)))

    logger.debug(f"Built {model.name}: {dict(model.family_counts())}")
    return model


def build_qip(costs, graph, mem_limit):
    """Single-stage model: minimize p_0 = sum of A plus every resharding cost."""
    _check_shapes(costs, graph)
    ids = graph.ids
    n_strats = costs.num_strategies
    model = MiqpModel("deg1", ids, 1, 1, n_strats, len(graph.edges))
    model.kind = "qip"

    for u in ids:
        for k in range(n_strats):
            model.add_variable(f"S_{u}_{k}")
    model.add_variable("p_0", CONTINUOUS)
    _fix_unusable_strategies(model, costs, float(mem_limit))

    terms = [Term(1.0, ("p_0",))]
    for pos, u in enumerate(ids):
        for k in range(n_strats):
            terms.append(Term(-costs.A[pos, k], (f"S_{u}_{k}",)))
    for e, (a, b) in enumerate(graph.edge_positions):
        u, v = ids[a], ids[b]
        for k, l in itertools.product(range(n_strats), repeat=2):
            terms.append(
                Term(-costs.R[e, k, l], (f"S_{u}_{k}", f"S_{v}_{l}"), f"x_{u}_{v}_{k}_{l}")
            )
    model.add_constraint("computation_stage", terms, "=", 0.0, defines="p_0")

    model.add_constraint(
        "memory",
        [
            Term(_memory_coef(costs.M[pos, k]), (f"S_{u}_{k}",))
            for pos, u in enumerate(ids)
            for k in range(n_strats)
        ],
        "<=",
        float(mem_limit),
    )
    _add_strategy_selection(model, ids, n_strats)
    model.objective = [Term(1.0, ("p_0",))]
    return model


def _add_strategy_selection(model, ids, n_strats):
    for u in ids:
        model.add_constraint(
            "strategy_selection",
            [Term(1.0, (f"S_{u}_{k}",)) for k in range(n_strats)],
            "=",
            1.0,
        )


def linearize(model):
    """Replace every binary product by an AND variable; all rows become linear."""
    milp = MilpModel(model)
    milp.variables.update(model.variables)

    def linear(terms):
        out = []
        for term in terms:
            if len(term.factors) <= 1:
                out.append(Term(term.coef, term.factors))
                continue
            if term.product not in milp.products:
                milp.products[term.product] = term.factors
            out.append(Term(term.coef, (term.product,)))
        return out

    for row in model.constraints:
        milp.constraints.append(row._replace(terms=tuple(linear(row.terms))))
        milp._family_index[row.family] += 1
    milp.objective = linear(model.objective)

    for name, factors in milp.products.items():
        # a product of a fixed-to-zero factor is zero as well
        fixed_zero = any(milp.variables[f].ub == 0.0 for f in factors)
        milp.add_variable(name, BINARY, 0.0, 0.0 if fixed_zero else 1.0)
        for f in factors:
            milp.add_constraint(
                "linearization", [Term(1.0, (name,)), Term(-1.0, (f,))], "<=", 0.0
            )
        milp.add_constraint(
            "linearization",
            [Term(1.0, (name,))] + [Term(-1.0, (f,)) for f in factors],
            ">=",
            -(len(factors) - 1),
        )

    logger.debug(f"Linearized {model.name}: {len(milp.products)} product variables")
    return milp


def product_counts(milp):
    counts = collections.Counter()
    for name in milp.products:
        counts[name.split("_", 1)[0]] += 1
    return counts


def construct_z(graph, stage_of, deg):
    """Z[v][i] = 1 iff some layer of stage i is v itself or reachable from v."""
    stage_sets = [set() for _ in range(deg)]
    for pos, u in enumerate(graph.ids):
        stage_sets[stage_of[pos]].add(u)
    reachable = graph.reachable
    return [
        [int(bool(stage_sets[i] & (reachable[u] | {u}))) for i in range(deg)]
        for u in graph.ids
    ]


def order_preserving_holds(graph, P, Z):
    """The three order-preserving row families for 0/1 P, Z indexed [layer position][stage]."""
    P = np.asarray(P)
    Z = np.asarray(Z)
    if (Z < P).any():
        return False
    for a, b in graph.edge_positions:
        if (Z[b] > Z[a]).any():
            return False
        if (Z[b] > P[b] - P[a] + 1).any():
            return False
    return True


def _format_terms(terms, per_line=6):
    chunks = []
    for term in terms:
        name = term.factors[0]
        sign = "-" if term.coef < 0 else "+"
        chunks.append(f"{sign} {_number(abs(term.coef))} {name}")
    lines = [" ".join(chunks[i:i + per_line]) for i in range(0, len(chunks), per_line)]
    return "\n   ".join(lines) if lines else "0 p_0"


def _number(value):
    value = float(value)
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def export_lp(model, sink):
    """Write a linearized model as CPLEX LP text to a writable text stream."""
    if any(len(t.factors) > 1 for row in model.constraints for t in row.terms):
        raise MiqpMisuseException("export_lp needs a linearized model")

    write = sink.write
    kind = getattr(model, "source_kind", model.kind)
    write(f"\\ uniplan {kind} model {model.name}\n")
    write("Minimize\n")
    write(f" obj: {_format_terms(model.objective)}\n")
    write("Subject To\n")
    for row in model.constraints:
        write(f" {row.name}: {_format_terms(row.terms)} {row.sense} {_number(row.rhs)}\n")
    write("Bounds\n")
    for var in model.variables.values():
        if var.kind == CONTINUOUS:
            write(f" {var.name} >= {_number(var.lb)}\n")
        elif var.lb == var.ub:
            write(f" {var.name} = {_number(var.lb)}\n")
    write("Binary\n")
    for name in model.binaries():
        write(f" {name}\n")
    write("End\n")


def to_pulp(model):
    """Build a pulp.LpProblem from a linearized model; returns (problem, variables)."""
    import pulp

    if any(len(t.factors) > 1 for row in model.constraints for t in row.terms):
        raise MiqpMisuseException("to_pulp needs a linearized model")

    lp_vars = {}
    for var in model.variables.values():
        if var.kind == BINARY:
            lp_vars[var.name] = pulp.LpVariable(
                var.name, lowBound=var.lb, upBound=var.ub, cat=pulp.LpBinary
            )
        else:
            lp_vars[var.name] = pulp.LpVariable(var.name, lowBound=var.lb)

    def expr(terms):
        return pulp.lpSum(t.coef * lp_vars[t.factors[0]] for t in terms)

    problem = pulp.LpProblem(model.name, pulp.LpMinimize)
    problem += expr(model.objective)
    for row in model.constraints:
        lhs = expr(row.terms)
        if row.sense == "=":
            problem += (lhs == row.rhs), row.name
        elif row.sense == "<=":
            problem += (lhs <= row.rhs), row.name
        else:
            problem += (lhs >= row.rhs), row.name
    return problem, lp_vars
