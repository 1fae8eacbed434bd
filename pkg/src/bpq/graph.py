"""SCG data model: nodes, distribution specs, parameters, validation."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    CycleDetected,
    DanglingReference,
    InvalidDistributionParams,
    SchemaError,
    UnknownCost,
    UnknownNode,
)
from .expr import Expr, compile_expr

DISCRETE_KINDS = ("bernoulli", "categorical", "dirac")
KINDS = ("bernoulli", "categorical", "gaussian", "dirac")

# distribution-parameter slots accepted per kind; exactly one slot of each
# alternative group must be given
_SLOTS = {
    "bernoulli": (("p", "logit"),),
    "categorical": (("probs", "logits"),),
    "gaussian": (("mean",), ("scale",)),
    "dirac": (),
}


@dataclass(frozen=True)
class DistributionSpec:
    kind: str
    params: Mapping[str, Expr] = field(default_factory=dict)
    k: int | None = None

    @classmethod
    def make(cls, kind: str, k: int | None = None, **params) -> "DistributionSpec":
        if kind not in KINDS:
            raise InvalidDistributionParams(f"unknown distribution kind {kind!r}")
        compiled = {slot: compile_expr(src) for slot, src in params.items()}
        if kind == "bernoulli":
            k = 2
        spec = cls(kind, compiled, k)
        spec.check_slots()
        return spec

    def check_slots(self):
        given = set(self.params)
        allowed = {s for group in _SLOTS[self.kind] for s in group}
        extra = given - allowed
        if extra:
            raise InvalidDistributionParams(f"{self.kind}: unexpected parameter(s) {sorted(extra)}")
        for group in _SLOTS[self.kind]:
            n = len(given & set(group))
            if n != 1:
                raise InvalidDistributionParams(
                    f"{self.kind}: exactly one of {list(group)} is required, got {n}"
                )
        if self.kind == "categorical" and (self.k is None or self.k < 2):
            raise InvalidDistributionParams("categorical needs k >= 2")

    @property
    def discrete(self) -> bool:
        return self.kind in DISCRETE_KINDS

    def names(self) -> frozenset:
        out = set()
        for e in self.params.values():
            out |= e.names
        return frozenset(out)


class ParamStore:
    """Named real scalars/vectors.  Treated as immutable: updates return new stores."""

    def __init__(self, entries=None, domains=None):
        self._values: dict[str, np.ndarray] = {}
        self._domains: dict[str, str] = {}
        for name, value in (entries or {}).items():
            arr = np.array(value, dtype=float)
            if arr.ndim > 1:
                raise SchemaError(f"parameter {name!r}: only scalars and vectors are supported")
            if not np.all(np.isfinite(arr)):
                raise InvalidDistributionParams(f"parameter {name!r} has non-finite entries")
            arr.setflags(write=False)
            self._values[name] = arr
            self._domains[name] = (domains or {}).get(name, "real")
        for name, dom in self._domains.items():
            if dom not in ("real", "probability"):
                raise SchemaError(f"parameter {name!r}: unknown domain {dom!r}")

    def names(self) -> list[str]:
        return sorted(self._values)

    def __contains__(self, name):
        return name in self._values

    def __getitem__(self, name) -> np.ndarray:
        return self._values[name]

    def shape(self, name) -> tuple:
        return self._values[name].shape

    def domain(self, name) -> str:
        return self._domains[name]

    def replace(self, updates: Mapping[str, object]) -> "ParamStore":
        merged = dict(self._values)
        for k, v in updates.items():
            if k not in merged:
                raise KeyError(k)
            merged[k] = np.array(v, dtype=float).reshape(merged[k].shape)
        return ParamStore(merged, self._domains)

    def as_dict(self) -> dict:
        return {k: v.tolist() for k, v in sorted(self._values.items())}

    def domains(self) -> dict:
        return dict(self._domains)

    def scalars(self, name, tape=None):
        """Values as Python scalars / lists, or as tape leaves when ``tape`` is given."""
        arr = self._values[name]
        if arr.ndim == 0:
            return float(arr) if tape is None else tape.param(name, None, float(arr))
        if tape is None:
            return [float(x) for x in arr]
        return [tape.param(name, i, float(x)) for i, x in enumerate(arr)]

    def __eq__(self, other):
        if not isinstance(other, ParamStore):
            return NotImplemented
        return (
            self._domains == other._domains
            and self._values.keys() == other._values.keys()
            and all(np.array_equal(self._values[k], other._values[k]) for k in self._values)
        )

    def __repr__(self):
        return f"ParamStore({self.as_dict()})"


@dataclass
class ScgModel:
    """Declared (unvalidated) stochastic computation graph."""

    stochastic: dict[str, DistributionSpec] = field(default_factory=dict)
    deterministic: dict[str, Expr] = field(default_factory=dict)
    costs: dict[str, Expr] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)
    params: ParamStore = field(default_factory=ParamStore)
    tied: list[frozenset] = field(default_factory=list)
    estimators: dict = field(default_factory=dict)

    def add_stochastic(self, name, kind, parents=(), k=None, **dist):
        self.stochastic[name] = DistributionSpec.make(kind, k=k, **dist)
        self.edges.extend((p, name) for p in parents)
        return self

    def add_deterministic(self, name, expr, parents=()):
        self.deterministic[name] = compile_expr(expr)
        self.edges.extend((p, name) for p in parents)
        return self

    def add_cost(self, name, expr, parents=()):
        self.costs[name] = compile_expr(expr)
        self.edges.extend((p, name) for p in parents)
        return self


class ValidatedScg:
    """An SCG whose structure has been checked; carries derived graph data."""

    def __init__(self, model: ScgModel, order, parents, children):
        self.model = model
        self.order: tuple[str, ...] = tuple(order)
        self.parents: dict[str, tuple[str, ...]] = parents
        self.children: dict[str, tuple[str, ...]] = children
        self.stochastic = frozenset(model.stochastic)
        self.deterministic = frozenset(model.deterministic)
        self.costs = frozenset(model.costs)
        self.stochastic_order = tuple(n for n in self.order if n in self.stochastic)
        self.cost_order = tuple(sorted(self.costs))
        self._stoch_parents = {n: self._compute_stoch_parents(n) for n in self.order}
        self._descendants = self._compute_descendants()
        self.cardinality: dict[str, int | None] = {}
        for n in self.stochastic_order:
            self.cardinality[n] = self._cardinality(n)
        self.tied_of = {}
        for group in model.tied:
            for name in group:
                self.tied_of[name] = group

    @property
    def params(self) -> ParamStore:
        return self.model.params

    def spec(self, node) -> DistributionSpec:
        return self.model.stochastic[node]

    def kind(self, node) -> str:
        if node in self.stochastic:
            return self.model.stochastic[node].kind
        if node in self.deterministic:
            return "deterministic"
        if node in self.costs:
            return "cost"
        raise UnknownNode(node)

    def _compute_stoch_parents(self, node):
        """Stochastic nodes feeding ``node`` through deterministic-only paths."""
        out = set()
        stack = list(self.parents.get(node, ()))
        seen = set()
        while stack:
            p = stack.pop()
            if p in seen:
                continue
            seen.add(p)
            if p in self.stochastic:
                out.add(p)
            else:
                stack.extend(self.parents.get(p, ()))
        return tuple(sorted(out))

    def stochastic_parents(self, node) -> tuple[str, ...]:
        return self._stoch_parents[node]

    def _compute_descendants(self):
        desc: dict[str, frozenset] = {}
        for n in reversed(self.order):
            acc = set()
            for c in self.children.get(n, ()):
                acc.add(c)
                acc |= desc[c]
            desc[n] = frozenset(acc)
        return desc

    def descendants(self, node) -> frozenset:
        if node not in self._descendants:
            raise UnknownNode(node)
        return self._descendants[node]

    def reaches(self, src, dst) -> bool:
        return dst in self.descendants(src)

    def check_cost(self, f):
        if f not in self.costs:
            raise UnknownCost(f)

    def _cardinality(self, node):
        spec = self.model.stochastic[node]
        if spec.kind == "gaussian":
            return None
        if spec.kind == "dirac":
            card = 1
            for p in self.parents[node]:
                c = self.cardinality.get(p) if p in self.stochastic else None
                if c is None:
                    return None
                card *= c
            return card
        return spec.k

    def support(self, node):
        """Outcomes of a discrete stochastic node (dirac excluded: its value is its parents)."""
        spec = self.model.stochastic[node]
        if spec.kind in ("bernoulli", "categorical"):
            return range(spec.k)
        raise ValueError(f"{node} has no enumerable support of its own")

    def is_discrete(self, node) -> bool:
        return self.cardinality.get(node) is not None

    def expr_for(self, node) -> Expr:
        if node in self.deterministic:
            return self.model.deterministic[node]
        return self.model.costs[node]


def validate_model(raw: ScgModel) -> ValidatedScg:
    """Check structure and compute a stable topological order."""
    groups = (raw.stochastic, raw.deterministic, raw.costs)
    names: set[str] = set()
    for g in groups:
        dup = names & set(g)
        if dup:
            raise SchemaError(f"duplicate node name(s): {sorted(dup)}")
        names |= set(g)

    parents: dict[str, list[str]] = {n: [] for n in names}
    children: dict[str, list[str]] = {n: [] for n in names}
    for u, v in raw.edges:
        for end in (u, v):
            if end not in names:
                raise DanglingReference(f"edge {u!r} -> {v!r} references undeclared node {end!r}")
        if u in raw.costs:
            raise DanglingReference(f"cost {u!r} cannot feed node {v!r}")
        if u not in parents[v]:
            parents[v].append(u)
            children[u].append(v)

    if set(raw.params.names()) & names:
        clash = sorted(set(raw.params.names()) & names)
        raise SchemaError(f"parameter names collide with node names: {clash}")

    for n in names:
        if n in raw.stochastic:
            spec = raw.stochastic[n]
            spec.check_slots()
            refs = spec.names()
        elif n in raw.deterministic:
            refs = raw.deterministic[n].names
        else:
            refs = raw.costs[n].names
        for r in sorted(refs):
            if r not in parents[n] and r not in raw.params:
                raise DanglingReference(f"node {n!r} references {r!r}, which is neither a parent nor a parameter")

    order = _toposort(names, parents, children)
    _check_tied(raw)
    _check_static_shapes(raw)
    return ValidatedScg(
        raw,
        order,
        {n: tuple(sorted(ps)) for n, ps in parents.items()},
        {n: tuple(sorted(cs)) for n, cs in children.items()},
    )


def _toposort(names, parents, children):
    indeg = {n: len(parents[n]) for n in names}
    heap = [n for n in names if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(order) != len(names):
        remaining = sorted(n for n in names if indeg[n] > 0)
        raise CycleDetected(remaining[0], _find_cycle(remaining, parents))
    return order


def _find_cycle(remaining, parents):
    rem = set(remaining)
    # walk backwards along parents inside the unsorted remainder until a repeat
    node = remaining[0]
    path, seen = [], {}
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = min(p for p in parents[node] if p in rem)
    cycle = path[seen[node]:]
    cycle.reverse()
    return cycle + [cycle[0]]


def _check_tied(raw: ScgModel):
    seen: set[str] = set()
    for group in raw.tied:
        group = set(group)
        if len(group) < 2:
            raise SchemaError(f"tied group {sorted(group)} needs at least two members")
        for name in group:
            if name not in raw.params:
                raise DanglingReference(f"tied group references unknown parameter {name!r}")
        if seen & group:
            raise SchemaError(f"parameter(s) {sorted(seen & group)} appear in two tied groups")
        seen |= group
        ref = sorted(group)[0]
        for name in sorted(group):
            if raw.params.shape(name) != raw.params.shape(ref):
                raise SchemaError(f"tied parameters {ref!r} and {name!r} differ in shape")
            if not np.array_equal(raw.params[name], raw.params[ref]):
                raise SchemaError(f"tied parameters {ref!r} and {name!r} differ in value")


def _check_static_shapes(raw: ScgModel):
    for n, spec in raw.stochastic.items():
        if spec.kind != "categorical":
            continue
        src = next(iter(spec.params.values()))
        # a bare parameter reference can be checked before any sampling
        if src.source.strip() in raw.params:
            shape = raw.params.shape(src.source.strip())
            if shape != (spec.k,):
                raise InvalidDistributionParams(
                    f"categorical {n!r}: parameter {src.source!r} has shape {shape}, expected ({spec.k},)"
                )


def check_probability(p: float, node: str):
    # closed interval: a degenerate coin is a valid (if unlearnable) distribution
    if not (0.0 <= p <= 1.0):
        raise InvalidDistributionParams(f"bernoulli {node!r}: probability {p!r} outside [0, 1]")
