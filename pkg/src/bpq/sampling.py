"""Ancestral sampling over a validated SCG.

A forward pass keeps two views of every deterministic value:

* the *score view*, where stochastic values are constants and only the
  parameters are live.  Log-probabilities and direct cost gradients use it.
* the *live view*, where reparameterized draws stay differentiable so that
  pathwise gradients reach the parameters upstream of the draw.

Nodes whose two views coincide store one value only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff as ad
from . import distributions as dist
from .autodiff import Tape
from .errors import NotReparameterizable
from .graph import ParamStore, ValidatedScg
from .rng import CounterRng


@dataclass
class RelaxedDraw:
    """Noise and pre-threshold values for a node sampled through its relaxation."""

    temperature: float
    u: object  # uniform noise (float, or list for categorical)
    z: object  # pre-threshold value(s), live on the tape
    soft: object  # sigmoid / softmax of z / temperature
    v: object  # independent uniforms for the conditional draw given the hard value


@dataclass
class Trace:
    values: dict
    log_probs: dict
    cost_values: dict
    total_cost: float
    tape: Tape | None = None
    noise: dict = field(default_factory=dict)
    score: dict = field(default_factory=dict)
    live: dict = field(default_factory=dict)
    cost_score: dict = field(default_factory=dict)
    cost_live: dict = field(default_factory=dict)
    dist_params: dict = field(default_factory=dict)
    relaxed: dict = field(default_factory=dict)
    params: ParamStore | None = None
    step: int = 0
    scg: ValidatedScg | None = None

    def live_value(self, node):
        if node in self.live:
            return self.live[node]
        return self.score.get(node, self.values[node])

    def summary(self) -> dict:
        return {
            "values": {k: ad.value_of(v) for k, v in sorted(self.values.items())},
            "log_probs": {k: ad.value_of(v) for k, v in sorted(self.log_probs.items())},
            "cost_values": dict(sorted(self.cost_values.items())),
            "total_cost": self.total_cost,
        }


def _param_lookup(params: ParamStore, tape):
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = params.scalars(name, tape)
        return cache[name]

    return get


def ancestral_sample(
    scg: ValidatedScg,
    params: ParamStore | None = None,
    rng: CounterRng | None = None,
    step: int = 0,
    *,
    tape: bool = True,
    reparam=(),
    relax=None,
    assignment=None,
    noise=None,
) -> Trace:
    """Sample every node in topological order.

    ``reparam`` names gaussian nodes drawn as ``mean + scale * eps``;
    ``relax`` maps discrete nodes to a temperature and draws them by
    thresholding logistic / Gumbel noise, which keeps the same law for the
    hard value.  ``assignment`` forces stochastic values (no draws) and
    ``noise`` forces the noise of reparameterized or relaxed nodes.
    """
    params = scg.params if params is None else params
    relax = dict(relax or {})
    reparam = frozenset(reparam)
    assignment = assignment or {}
    noise_in = noise or {}
    t = Tape() if tape else None
    pget = _param_lookup(params, t)

    values: dict = {}
    score: dict = {}
    live: dict = {}
    log_probs: dict = {}
    noise_out: dict = {}
    dist_params: dict = {}
    relaxed: dict = {}
    cost_score: dict = {}
    cost_live: dict = {}

    def score_lookup(name):
        if name in score:
            return score[name]
        if name in values:
            return values[name]
        return pget(name)

    def live_lookup(name):
        if name in live:
            return live[name]
        return score_lookup(name)

    stochastic, deterministic = scg.stochastic, scg.deterministic
    for n in scg.order:
        ps = scg.parents[n]
        pathwise = any(p in live for p in ps)
        if n in stochastic:
            spec = scg.spec(n)
            ev = dist.evaluate_params(spec, score_lookup)
            dist_params[n] = ev
            if spec.kind == "dirac":
                val = tuple(values[p] for p in ps)
                if pathwise:
                    live[n] = tuple(live_lookup(p) for p in ps)
                log_probs[n] = 0.0
                values[n] = val
                continue
            ev_live = dist.evaluate_params(spec, live_lookup) if pathwise else ev
            if n in assignment:
                val = assignment[n]
            elif n in reparam:
                if spec.kind != "gaussian":
                    raise NotReparameterizable(f"{n}: {spec.kind} has no pathwise transform")
                eps = noise_in[n] if n in noise_in else float(rng.stream(n, step).standard_normal())
                noise_out[n] = eps
                live[n] = dist.reparam_eval(spec, ev_live, eps, n)
                val = ad.value_of(live[n])
            elif n in relax:
                val = _relaxed_draw(n, spec, ev_live, relax[n], rng, step, noise_in, noise_out, relaxed)
            else:
                val = dist.sample_eval(spec, ev, rng.stream(n, step), n)
            values[n] = val
            log_probs[n] = dist.log_prob_eval(spec, ev, val, n)
        elif n in deterministic:
            expr = scg.model.deterministic[n]
            s = expr(score_lookup)
            score[n] = s
            values[n] = ad.value_of(s)
            if pathwise:
                live[n] = expr(live_lookup)
        else:
            expr = scg.model.costs[n]
            s = expr(score_lookup)
            cost_score[n] = s
            cost_live[n] = expr(live_lookup) if pathwise else s
            values[n] = float(ad.value_of(s))

    cost_values = {f: values[f] for f in scg.cost_order}
    return Trace(
        values=values,
        log_probs=log_probs,
        cost_values=cost_values,
        total_cost=float(sum(cost_values.values())),
        tape=t,
        noise=noise_out,
        score=score,
        live=live,
        cost_score=cost_score,
        cost_live=cost_live,
        dist_params=dist_params,
        relaxed=relaxed,
        params=params,
        step=step,
        scg=scg,
    )


def _relaxed_draw(n, spec, ev, temperature, rng, step, noise_in, noise_out, relaxed):
    given = noise_in.get(n)
    if spec.kind == "bernoulli":
        if given is not None:
            u, v = given
        else:
            gen = rng.stream(n, step)
            u, v = _open_uniform(gen), _open_uniform(gen)
        z, b, soft = dist.relaxed_bernoulli(ev, u, temperature, n)
    elif spec.kind == "categorical":
        if given is not None:
            u, v = given
        else:
            gen = rng.stream(n, step)
            u = [_open_uniform(gen) for _ in range(spec.k)]
            v = [_open_uniform(gen) for _ in range(spec.k)]
        z, b, soft = dist.relaxed_categorical(spec, ev, u, temperature, n)
    else:
        raise NotReparameterizable(f"{n}: {spec.kind} has no relaxation")
    noise_out[n] = (u, v)
    relaxed[n] = RelaxedDraw(temperature, u, z, soft, v)
    return b


def _open_uniform(gen) -> float:
    u = gen.random()
    while u == 0.0:
        u = gen.random()
    return float(u)


def reevaluate(scg: ValidatedScg, trace: Trace, overrides: dict, targets=None) -> dict:
    """Recompute deterministic nodes and costs with some stochastic values replaced.

    Stochastic nodes keep their sampled (hard) values except those in
    ``overrides``; the substituted values flow only through deterministic
    paths.  Returns cost name -> (possibly live) value for ``targets``
    (default: every cost reachable from an overridden node).
    """
    reach = set()
    for o in overrides:
        reach |= scg.descendants(o)
    if targets is None:
        targets = [f for f in scg.cost_order if f in reach]
    memo = dict(overrides)
    pget = _param_lookup(trace.params, trace.tape)

    def lookup(name):
        if name in memo:
            return memo[name]
        if name in reach and name in scg.deterministic:
            memo[name] = scg.model.deterministic[name](lookup)
            return memo[name]
        if name in reach and scg.kind(name) == "dirac":
            memo[name] = tuple(lookup(p) for p in scg.parents[name])
            return memo[name]
        if name in trace.score:
            return trace.score[name]
        if name in trace.values:
            return trace.values[name]
        return pget(name)

    out = {}
    for f in targets:
        out[f] = scg.model.costs[f](lookup) if f in reach else trace.cost_score[f]
    return out
