"""Exact computations on small discrete SCGs by brute-force enumeration."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .errors import ContinuousNodePresent, EnumerationTooLarge, ZeroProbabilityCondition
from .graph import ParamStore, ValidatedScg
from .sampling import ancestral_sample

DEFAULT_CAP = 10**6


@dataclass
class EnumerationResult:
    """Joint assignments of the stochastic nodes with their exact probabilities.

    ``rows`` holds ``(assignment, probability, cost_values)`` in lexicographic
    order of the stochastic values taken in topological node order.
    Zero-probability assignments are omitted.
    """

    rows: list
    total_probability: float

    def __iter__(self):
        return ((a, p) for a, p, _ in self.rows)

    def __len__(self):
        return len(self.rows)


def outcome_space_size(scg: ValidatedScg) -> int:
    size = 1
    for n in scg.stochastic_order:
        spec = scg.spec(n)
        if spec.kind == "gaussian":
            raise ContinuousNodePresent(f"{n} is continuous; exact enumeration needs discrete nodes")
        if spec.kind != "dirac":
            size *= spec.k
    return size


def _outcome_probs(spec, ev, node):
    if spec.kind == "bernoulli":
        p = ad.value_of(dist.bernoulli_prob(ev, node))
        return [1.0 - p, p]
    return [ad.value_of(p) for p in dist.categorical_probs(ev, spec.k, node)]


def enumerate_traces(scg: ValidatedScg, params: ParamStore | None = None, cap: int = DEFAULT_CAP) -> EnumerationResult:
    params = scg.params if params is None else params
    size = outcome_space_size(scg)
    if size > cap:
        raise EnumerationTooLarge(f"{size} joint outcomes exceed the cap of {cap}")
    pvals = {n: params.scalars(n) for n in params.names()}
    order = scg.order
    rows = []

    def visit(i, values, prob):
        if i == len(order):
            costs = {f: float(values[f]) for f in scg.cost_order}
            assign = {n: values[n] for n in scg.stochastic_order}
            rows.append((assign, prob, costs))
            return
        n = order[i]
        lookup = lambda name: values[name] if name in values else pvals[name]
        if n in scg.stochastic:
            spec = scg.spec(n)
            if spec.kind == "dirac":
                values[n] = tuple(values[p] for p in scg.parents[n])
                visit(i + 1, values, prob)
                del values[n]
                return
            ev = dist.evaluate_params(spec, lookup)
            for outcome, q in enumerate(_outcome_probs(spec, ev, n)):
                if q > 0.0:
                    values[n] = outcome
                    visit(i + 1, values, prob * q)
            values.pop(n, None)
            return
        expr = scg.model.deterministic[n] if n in scg.deterministic else scg.model.costs[n]
        values[n] = ad.value_of(expr(lookup))
        visit(i + 1, values, prob)
        del values[n]

    visit(0, {}, 1.0)
    total = math.fsum(p for _, p, _ in rows)
    return EnumerationResult(rows, total)


def exact_expected_cost(scg, params=None, enum: EnumerationResult | None = None, cost=None) -> float:
    """J = sum over assignments of probability times total cost (or one cost)."""
    enum = enum or enumerate_traces(scg, params)
    if cost is None:
        return math.fsum(p * sum(c.values()) for _, p, c in enum.rows)
    scg.check_cost(cost)
    return math.fsum(p * c[cost] for _, p, c in enum.rows)


def exact_q(scg, x, assignment: dict, f, params=None, enum: EnumerationResult | None = None) -> float:
    """E[f | scope assignment] by restricted enumeration.

    ``x`` is the owner, kept for interface symmetry: the conditioning set
    is exactly the keys of ``assignment``.
    """
    scg.check_cost(f)
    enum = enum or enumerate_traces(scg, params)
    num = den = 0.0
    for a, p, c in enum.rows:
        if all(a[k] == v for k, v in assignment.items()):
            num += p * c[f]
            den += p
    if den == 0.0:
        raise ZeroProbabilityCondition(f"Q_{x}: assignment {assignment} has probability 0")
    return num / den


def conditional_expectation(enum: EnumerationResult, condition: dict, fn) -> float:
    """E[fn(assignment, costs) | condition] over an enumeration."""
    num = den = 0.0
    for a, p, c in enum.rows:
        if all(a[k] == v for k, v in condition.items()):
            num += p * fn(a, c)
            den += p
    if den == 0.0:
        raise ZeroProbabilityCondition(f"condition {condition} has probability 0")
    return num / den


def exact_grad(scg: ValidatedScg, params: ParamStore | None = None, enum: EnumerationResult | None = None) -> dict:
    """Gradient of the enumerated expected cost, differentiated on the tape."""
    params = scg.params if params is None else params
    enum = enum or enumerate_traces(scg, params)
    grads = {n: np.zeros(params.shape(n)) for n in params.names()}
    for a, p, _ in enum.rows:
        tr = ancestral_sample(scg, params, assignment=a)
        logp = ad.total(tr.log_probs.values())
        term = ad.mul(ad.exp(logp), ad.total(tr.cost_score.values()))
        if not ad.is_var(term):
            continue
        for name, g in ad.backward(tr.tape, term, params).items():
            grads[name] += g
    return grads


def finite_diff(j_fn, params: ParamStore, h: float = 1e-5) -> dict:
    """Central differences (J(θ+h) − J(θ−h)) / 2h for every coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for name in params.names():
        base = np.array(params[name], dtype=float)
        g = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            g[idx] = (j_fn(params.replace({name: up})) - j_fn(params.replace({name: dn}))) / (2 * h)
        out[name] = g
    return out


def optimal_expected_cost(scg: ValidatedScg, params: ParamStore | None = None) -> float:
    """Infimum of J over deterministic conditional policies.

    Every non-dirac stochastic node picks one outcome per joint value of its
    stochastic parents; with full conditional tables of logits this is the
    infimum over parameterizations.  Solved by exhaustive search.
    """
    params = scg.params if params is None else params
    outcome_space_size(scg)
    nodes = [n for n in scg.stochastic_order if scg.spec(n).kind != "dirac"]
    best = math.inf
    pvals = {n: params.scalars(n) for n in params.names()}

    def run(policy):
        values = {}
        lookup = lambda name: values[name] if name in values else pvals[name]
        for n in scg.order:
            if n in scg.stochastic:
                if scg.spec(n).kind == "dirac":
                    values[n] = tuple(values[p] for p in scg.parents[n])
                else:
                    key = tuple(values[p] for p in scg.stochastic_parents(n))
                    values[n] = policy[n][key]
            elif n in scg.deterministic:
                values[n] = ad.value_of(scg.model.deterministic[n](lookup))
            else:
                values[n] = ad.value_of(scg.model.costs[n](lookup))
        return sum(values[f] for f in scg.cost_order)

    # each policy is deterministic, so the expected cost is a single rollout
    keys = {}
    for n in nodes:
        parents = scg.stochastic_parents(n)
        keys[n] = list(itertools.product(*[_values_of(scg, p) for p in parents]))
    choices = [(n, key) for n in nodes for key in keys[n]]
    ranges = [range(scg.spec(n).k) for n, _ in choices]
    for combo in itertools.product(*ranges):
        policy = {n: {} for n in nodes}
        for (n, key), c in zip(choices, combo):
            policy[n][key] = c
        best = min(best, run(policy))
    return float(best)


def _values_of(scg, node):
    spec = scg.spec(node)
    if spec.kind == "dirac":
        return [tuple(v) for v in itertools.product(*[_values_of(scg, p) for p in scg.parents[node]])]
    return list(range(spec.k))


def gauss_hermite(fn, mean: float, scale: float, n: int = 64) -> float:
    """E[fn(Z)] for Z ~ N(mean, scale^2) by probabilists' Gauss–Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / math.sqrt(2 * math.pi)
    return float(sum(wi * fn(mean + scale * xi) for xi, wi in zip(x, w)))
