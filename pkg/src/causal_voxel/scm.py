"""Structural causal model core: causal graph, interventions, and the
abduction / action / prediction counterfactual procedure over scalar
variables.

Evidence, interventions and exogenous noise are plain ``{name: float}``
dicts in native units. All operations are pure: graphs and mechanism sets
are never mutated, and every sampling call is driven by an explicit seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VariableSpec",
    "CausalGraph",
    "GraphView",
    "PriorSample",
    "GraphError",
    "CycleError",
    "validate_and_order",
    "intervene",
    "abduct",
    "predict",
    "counterfactual",
    "sample_prior",
    "load_graph",
    "save_graph",
]

GRAPH_FORMAT_VERSION = 1


class GraphError(ValueError):
    """Structural problem in a causal graph definition."""


class CycleError(GraphError):
    """The edge set contains a directed cycle."""


@dataclass(frozen=True)
class VariableSpec:
    """A scalar variable: continuous or binary, optionally bounded in native units."""

    name: str
    kind: str = "continuous"  # "continuous" | "binary"
    bounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "binary"):
            raise GraphError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "binary":
            object.__setattr__(self, "bounds", (0.0, 1.0))
        if self.bounds is not None:
            lo, hi = self.bounds
            if not lo < hi:
                raise GraphError(f"variable {self.name!r}: bounds must satisfy lower < upper")
            object.__setattr__(self, "bounds", (float(lo), float(hi)))

    def check_value(self, value: float) -> None:
        if not np.isfinite(value):
            raise GraphError(f"variable {self.name!r}: non-finite value {value!r}")
        if self.kind == "binary" and value not in (0.0, 1.0):
            raise GraphError(f"variable {self.name!r}: binary value must be 0 or 1, got {value}")
        if self.bounds is not None and not (self.bounds[0] <= value <= self.bounds[1]):
            raise GraphError(
                f"variable {self.name!r}: value {value} outside bounds {list(self.bounds)}"
            )

    def clamp(self, value: float):
        """Returns (clamped value, clamp-hit flag)."""
        if self.bounds is None:
            return value, False
        clamped = min(max(value, self.bounds[0]), self.bounds[1])
        return clamped, clamped != value


class CausalGraph:
    """A DAG over named scalar variables.

    ``priors`` maps root variable names to sampling distributions (see
    :func:`sample_prior`); ``image_parents`` names the variables feeding the
    image generator downstream.
    """

    def __init__(self, variables, edges, image_parents=(), priors=None):
        self.variables = list(variables)
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise GraphError(f"duplicate variable names: {dupes}")
        self.by_name = {v.name: v for v in self.variables}
        self.edges = [(str(p), str(c)) for p, c in edges]
        for p, c in self.edges:
            for endpoint in (p, c):
                if endpoint not in self.by_name:
                    raise GraphError(f"edge ({p!r} -> {c!r}) names unknown variable {endpoint!r}")
        self.image_parents = tuple(image_parents)
        for n in self.image_parents:
            if n not in self.by_name:
                raise GraphError(f"image parent {n!r} is not a declared variable")
        self.priors = dict(priors or {})
        self.order = validate_and_order(self)

    def names(self):
        return [v.name for v in self.variables]

    def parents(self, name: str) -> list:
        """Parent names in declaration order of the edge list."""
        return [p for p, c in self.edges if c == name]

    def children(self, name: str) -> list:
        return [c for p, c in self.edges if p == name]

    def roots(self) -> list:
        have_parents = {c for _, c in self.edges}
        return [v.name for v in self.variables if v.name not in have_parents]

    def descendants(self, names) -> set:
        """All strict descendants of the given variable set."""
        frontier = list(names)
        seen = set()
        while frontier:
            n = frontier.pop()
            for c in self.children(n):
                if c not in seen:
                    seen.add(c)
                    frontier.append(c)
        return seen

    def check_evidence(self, values: dict, complete: bool = False) -> None:
        for k, v in values.items():
            if k not in self.by_name:
                raise GraphError(f"evidence names unknown variable {k!r}")
            self.by_name[k].check_value(v)
        if complete:
            missing = [n for n in self.names() if n not in values]
            if missing:
                raise GraphError(f"evidence incomplete, missing {missing}")

    def check_intervention(self, assignments: dict) -> None:
        # an empty intervention map is the legal null intervention
        for k, v in assignments.items():
            if k not in self.by_name:
                raise GraphError(f"cannot intervene on undeclared variable {k!r}")
            self.by_name[k].check_value(v)

    def to_dict(self) -> dict:
        return {
            "format_version": GRAPH_FORMAT_VERSION,
            "variables": [
                {
                    "name": v.name,
                    "kind": v.kind,
                    "bounds": list(v.bounds) if v.bounds is not None else None,
                }
                for v in self.variables
            ],
            "edges": [[p, c] for p, c in self.edges],
            "image_parents": list(self.image_parents),
            "priors": self.priors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CausalGraph":
        variables = [
            VariableSpec(
                name=v["name"],
                kind=v.get("kind", "continuous"),
                bounds=tuple(v["bounds"]) if v.get("bounds") else None,
            )
            for v in d["variables"]
        ]
        return cls(
            variables,
            [tuple(e) for e in d.get("edges", [])],
            image_parents=d.get("image_parents", ()),
            priors=d.get("priors", {}),
        )


def validate_and_order(graph: CausalGraph) -> list:
    """Topological order with stable tie-breaking by declaration order.

    Kahn's algorithm over a ready-queue kept in declaration order, so the
    result is deterministic for a given graph. Raises :class:`CycleError`
    naming one offending cycle if the edge set is cyclic.
    """
    names = graph.names()
    indeg = {n: 0 for n in names}
    for _, c in graph.edges:
        indeg[c] += 1
    order = []
    ready = [n for n in names if indeg[n] == 0]
    while ready:
        n = ready.pop(0)
        order.append(n)
        for c in graph.children(n):
            indeg[c] -= 1
            if indeg[c] == 0:
                # reinsert in declaration order to keep ties stable
                ready.append(c)
                ready.sort(key=names.index)
    if len(order) != len(names):
        cycle = _find_cycle(graph, [n for n in names if n not in order])
        raise CycleError(f"graph contains a cycle: {' -> '.join(cycle)}")
    return order


def _find_cycle(graph: CausalGraph, candidates) -> list:
    remaining = set(candidates)
    start = sorted(remaining, key=graph.names().index)[0]
    path, seen = [start], {start}
    node = start
    while True:
        nxt = [c for c in graph.children(node) if c in remaining]
        node = nxt[0]
        if node in seen:
            return path[path.index(node):] + [node]
        path.append(node)
        seen.add(node)


class GraphView:
    """An intervened view of a graph: pinned variables become value roots.

    The underlying graph is untouched; incoming edges of pinned variables
    are severed only in this view.
    """

    def __init__(self, graph: CausalGraph, assignments: dict):
        graph.check_intervention(assignments)
        self.graph = graph
        self.pinned = {k: float(v) for k, v in assignments.items()}

    @property
    def order(self):
        return self.graph.order

    def parents(self, name: str) -> list:
        return [] if name in self.pinned else self.graph.parents(name)

    def is_pinned(self, name: str) -> bool:
        return name in self.pinned


def intervene(graph: CausalGraph, assignments: dict) -> GraphView:
    """do-operation: pin variables to forced values, severing incoming edges."""
    return GraphView(graph, assignments)


def abduct(graph: CausalGraph, mechanisms: dict, evidence: dict) -> dict:
    """Infer exogenous noise consistent with complete evidence.

    Root variables carry their observed value as their own noise entry
    (identity mechanism), so :func:`predict` can rebuild them without a
    separate evidence argument.
    """
    graph.check_evidence(evidence, complete=True)
    noise = {}
    for name in graph.order:
        parents = graph.parents(name)
        if not parents:
            noise[name] = float(evidence[name])
            continue
        mech = mechanisms.get(name)
        if mech is None:
            raise GraphError(f"no mechanism for non-root variable {name!r}")
        pa = np.array([[evidence[p] for p in parents]])
        noise[name] = float(mech.abduct(pa, np.array([evidence[name]]))[0])
    return noise


def predict(view: GraphView, mechanisms: dict, noise: dict, count_clamps: bool = False):
    """Forward pass through an intervened graph reusing abducted noise.

    Pinned values pass through unchanged; bounded variables are clamped to
    their bounds after mechanism evaluation. Returns the full evidence dict,
    or ``(evidence, clamp_counts)`` when ``count_clamps`` is set.
    """
    graph = view.graph
    values = {}
    clamps = {}
    for name in graph.order:
        if view.is_pinned(name):
            values[name] = view.pinned[name]
            continue
        parents = view.parents(name)
        if not parents:
            if name not in noise:
                raise GraphError(f"missing noise entry for root variable {name!r}")
            values[name] = float(noise[name])
            continue
        mech = mechanisms.get(name)
        if mech is None:
            raise GraphError(f"no mechanism for non-root variable {name!r}")
        if name not in noise:
            raise GraphError(f"missing noise entry for variable {name!r}")
        pa = np.array([[values[p] for p in parents]])
        raw = float(mech.forward(pa, np.array([noise[name]]))[0])
        clamped, hit = graph.by_name[name].clamp(raw)
        values[name] = clamped
        if hit:
            clamps[name] = clamps.get(name, 0) + 1
    return (values, clamps) if count_clamps else values


def counterfactual(graph: CausalGraph, mechanisms: dict, evidence: dict,
                   assignments: dict) -> dict:
    """Three-step counterfactual: abduction, action, prediction in one call."""
    noise = abduct(graph, mechanisms, evidence)
    return predict(intervene(graph, assignments), mechanisms, noise)


@dataclass
class PriorSample:
    """Ancestral samples plus the clamp events observed while drawing them."""

    rows: list
    clamp_counts: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def columns(self) -> dict:
        return {k: self.column(k) for k in (self.rows[0] if self.rows else {})}


def sample_prior(graph: CausalGraph, mechanisms: dict, seed: int, n: int) -> PriorSample:
    """Draw ``n`` complete ancestral samples in topological order.

    Roots are drawn from their declared priors, every other variable from
    its mechanism with fresh standard-normal noise. Bounded variables are
    clamped, and clamp events are tallied per variable.
    """
    rng = np.random.default_rng(seed)
    cols = {}
    clamp_counts = {}
    for name in graph.order:
        parents = graph.parents(name)
        spec = graph.by_name[name]
        if not parents:
            cols[name] = _sample_root(spec, graph.priors.get(name), rng, n)
            continue
        mech = mechanisms.get(name)
        if mech is None:
            raise GraphError(f"no mechanism for non-root variable {name!r}")
        pa = np.column_stack([cols[p] for p in parents])
        u = rng.standard_normal(n)
        raw = mech.forward(pa, u)
        if spec.bounds is not None:
            clamped = np.clip(raw, spec.bounds[0], spec.bounds[1])
            hits = int(np.count_nonzero(clamped != raw))
            if hits:
                clamp_counts[name] = clamp_counts.get(name, 0) + hits
            raw = clamped
        cols[name] = raw
    names = graph.order
    rows = [{k: float(cols[k][i]) for k in names} for i in range(n)]
    return PriorSample(rows=rows, clamp_counts=clamp_counts)


def _sample_root(spec: VariableSpec, prior: dict | None, rng: np.random.Generator,
                 n: int) -> np.ndarray:
    if prior is None:
        raise GraphError(f"root variable {spec.name!r} has no declared prior")
    kind = prior.get("type")
    if kind == "bernoulli":
        return (rng.random(n) < float(prior["p"])).astype(float)
    if kind == "truncated_normal":
        lo, hi = prior.get("bounds", [-np.inf, np.inf])
        out = np.empty(n)
        filled = 0
        while filled < n:
            draw = rng.normal(float(prior["mean"]), float(prior["std"]), size=2 * (n - filled))
            draw = draw[(draw >= lo) & (draw <= hi)][: n - filled]
            out[filled : filled + draw.size] = draw
            filled += draw.size
        return out
    if kind == "normal":
        return rng.normal(float(prior["mean"]), float(prior["std"]), size=n)
    raise GraphError(f"root {spec.name!r}: unknown prior type {kind!r}")


def save_graph(graph: CausalGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(graph.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_graph(path) -> CausalGraph:
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    return CausalGraph.from_dict(d)
