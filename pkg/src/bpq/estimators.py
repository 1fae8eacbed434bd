"""Per-node differentiable surrogate objectives for the gradient estimators.

Every estimator returns a :class:`SurrogateObjective`: a scalar on the
trace's tape whose backward pass yields the estimate.  Score-term
coefficients are plain floats, so no gradient reaches the learning signal.

Node-local quantities are rebuilt from the score view of the trace: the
distribution parameters of a node are evaluated with its parents held at
their sampled values, so a node's surrogate only moves its own parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .errors import (
    ConfigError,
    DegenerateVariance,
    NoAnalyticMean,
    NotReparameterizable,
    TemperatureNonPositive,
)
from .network import scope as cost_scope_of
from .oracle import enumerate_traces, exact_q

FAMILIES = (
    "reinforce",
    "baseline_cv",
    "taylor_cv",
    "reparam",
    "relaxed_reparam",
    "cv_reparam",
    "cv_reparam_relaxed",
    "q_control_variate",
)
SIGNALS = ("learned_q", "actual_return", "exact_q")
_RELAXABLE = ("bernoulli", "categorical")


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class NodeEstimator:
    """Estimator choice for one stochastic node.

    ``baseline`` is the constant c of baseline_cv and b of q_control_variate;
    ``scale`` is a of q_control_variate.  ``cv`` holds quadratic coefficients
    (c0, c1, c2) for the cv_reparam families; for relaxed nodes the
    quadratic acts on sigmoid(z / temperature).
    """

    family: str = "reinforce"
    signal: str = "learned_q"
    temperature: float = 0.5
    baseline: float = 0.0
    scale: float = 1.0
    cv: tuple = (0.0, 0.0, 0.0)

    def check(self, scg=None, node=None):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown estimator family {self.family!r}")
        if self.signal not in SIGNALS:
            raise ConfigError(f"unknown signal source {self.signal!r}")
        if not self.temperature > 0:
            raise TemperatureNonPositive(f"temperature must be > 0, got {self.temperature!r}")
        for name in ("baseline", "scale"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"{name} must be a finite number, got {v!r}")
        if len(self.cv) != 3 or not all(math.isfinite(float(c)) for c in self.cv):
            raise ConfigError(f"cv needs three finite coefficients, got {self.cv!r}")
        if scg is None:
            return self
        kind = scg.spec(node).kind
        if self.family in ("reparam", "cv_reparam") and kind != "gaussian":
            raise NotReparameterizable(f"{node}: {self.family} needs a gaussian node, got {kind}")
        if self.family in ("relaxed_reparam", "cv_reparam_relaxed") and kind not in _RELAXABLE:
            raise NotReparameterizable(f"{node}: {self.family} needs a bernoulli or categorical node, got {kind}")
        if self.family == "q_control_variate" and kind not in ("gaussian",) + _RELAXABLE:
            raise NotReparameterizable(f"{node}: {kind} has neither a pathwise transform nor a relaxation")
        if self.family == "taylor_cv" and kind not in ("gaussian",) + _RELAXABLE:
            raise NoAnalyticMean(f"{node}: {kind} has no analytic mean")
        return self

    def sampling(self, kind):
        """'reparam', 'relax' or None: how the node must be drawn."""
        if self.family in ("reparam", "cv_reparam"):
            return "reparam"
        if self.family in ("relaxed_reparam", "cv_reparam_relaxed"):
            return "relax"
        if self.family == "q_control_variate":
            return "reparam" if kind == "gaussian" else "relax"
        return None


@dataclass
class EstimatorConfig:
    default: NodeEstimator = field(default_factory=NodeEstimator)
    nodes: dict = field(default_factory=dict)

    def for_node(self, node) -> NodeEstimator:
        return self.nodes.get(node, self.default)

    def validate(self, scg) -> "EstimatorConfig":
        self.default.check()
        for n in self.nodes:
            if n not in scg.stochastic:
                raise ConfigError(f"estimator given for {n!r}, which is not a stochastic node")
        for n in scg.stochastic_order:
            if scg.spec(n).kind != "dirac":
                self.for_node(n).check(scg, n)
        return self

    def sampling_plan(self, scg):
        """(reparam node set, relax temperatures) for :func:`ancestral_sample`."""
        reparam, relax = set(), {}
        for n in scg.stochastic_order:
            kind = scg.spec(n).kind
            if kind == "dirac":
                continue
            est = self.for_node(n)
            how = est.sampling(kind)
            if how == "reparam":
                reparam.add(n)
            elif how == "relax":
                relax[n] = est.temperature
        return frozenset(reparam), relax

    def with_override(self, text: str) -> "EstimatorConfig":
        node, est = parse_override(text, self)
        nodes = dict(self.nodes)
        if node == "*":
            return EstimatorConfig(est, nodes)
        nodes[node] = est
        return EstimatorConfig(self.default, nodes)

    @classmethod
    def from_dict(cls, data: dict | None) -> "EstimatorConfig":
        data = dict(data or {})
        default = _estimator_from(data.pop("default", {}), NodeEstimator())
        nodes = {n: _estimator_from(v, default) for n, v in data.items()}
        return cls(default, nodes)

    def to_dict(self) -> dict:
        out = {"default": _estimator_dict(self.default)}
        for n in sorted(self.nodes):
            out[n] = _estimator_dict(self.nodes[n])
        return out


_FIELDS = {"family", "signal", "temperature", "baseline", "scale", "cv"}
_ALIASES = {"a": "scale", "b": "baseline", "c": "baseline", "t": "temperature", "lambda_t": "temperature"}


def _estimator_from(entry, base: NodeEstimator) -> NodeEstimator:
    if isinstance(entry, str):
        entry = {"family": entry}
    if not isinstance(entry, dict):
        raise ConfigError(f"estimator entry must be a family name or an object, got {entry!r}")
    kw = {}
    for k, v in entry.items():
        k = _ALIASES.get(k, k)
        if k not in _FIELDS:
            raise ConfigError(f"unknown estimator field {k!r}")
        if k == "cv":
            v = tuple(float(c) for c in v)
        elif k in ("temperature", "baseline", "scale"):
            v = float(v)
        kw[k] = v
    return replace(base, **kw).check()


def _estimator_dict(e: NodeEstimator) -> dict:
    return {"family": e.family, "signal": e.signal, "temperature": e.temperature,
            "baseline": e.baseline, "scale": e.scale, "cv": list(e.cv)}


def parse_override(text: str, config: EstimatorConfig | None = None):
    """``node=family[:key=val,...]`` -> (node, NodeEstimator); ``*`` sets the default."""
    if "=" not in text:
        raise ConfigError(f"estimator override {text!r} is not of the form node=family[:key=val,...]")
    node, rest = text.split("=", 1)
    node = node.strip()
    family, _, opts = rest.partition(":")
    entry = {"family": family.strip()}
    for item in filter(None, (o.strip() for o in opts.split(","))):
        if "=" not in item:
            raise ConfigError(f"estimator option {item!r} is not key=val")
        k, v = (s.strip() for s in item.split("=", 1))
        entry[k] = [float(c) for c in v.split("/")] if k == "cv" else (v if k == "signal" else float(v))
    config = config or EstimatorConfig()
    base = config.default if node == "*" else config.for_node(node)
    return node, _estimator_from(entry, replace(base, family=entry["family"]))


# --------------------------------------------------------------- objectives


@dataclass
class SurrogateObjective:
    """Scalar surrogate plus its parts (score / pathwise / correction / cost)."""

    value: object
    components: dict = field(default_factory=dict)
    tape: object = None
    per_node: dict = field(default_factory=dict)

    def forward(self) -> float:
        return float(ad.value_of(self.value))

    def gradients(self, params) -> dict:
        if not ad.is_var(self.value):
            return {n: np.zeros(params.shape(n)) for n in params.names()}
        return ad.backward(self.value.tape, self.value, params)


def _objective(trace, **parts) -> SurrogateObjective:
    parts = {k: v for k, v in parts.items() if v is not None}
    return SurrogateObjective(ad.total(parts.values()), parts, trace.tape)


def combine(objs, trace=None) -> SurrogateObjective:
    """Sum of surrogates; components add up by name."""
    objs = list(objs)
    comps: dict = {}
    for o in objs:
        for k, v in o.components.items():
            comps[k] = ad.add(comps[k], v) if k in comps else v
    tape = trace.tape if trace is not None else next((o.tape for o in objs if o.tape is not None), None)
    return SurrogateObjective(ad.total(o.value for o in objs), comps, tape)


# ------------------------------------------------------------------ signals


class Signal:
    """A learning signal: its value at the sample and a differentiable form in the node value."""

    def __init__(self, value: float, fn=None, name=""):
        self.value = float(value)
        self._fn = fn
        self.name = name

    def at(self, z):
        if self._fn is None:
            raise ConfigError(f"signal {self.name!r} cannot be evaluated at a substituted value")
        return self._fn(z)

    __call__ = at


def _as_float(signal) -> float:
    return signal.value if isinstance(signal, Signal) else float(ad.value_of(signal))


def _fn_at_sample(f, trace, node) -> float:
    if isinstance(f, Signal):
        return f.value
    return float(ad.value_of(f(trace.values[node])))


def reachable_costs(scg, node) -> list:
    desc = scg.descendants(node)
    return [f for f in scg.cost_order if f in desc]


def downstream_return(trace, node) -> float:
    """Sum of the sampled costs reachable from ``node``."""
    return math.fsum(trace.cost_values[f] for f in reachable_costs(_scg_of(trace), node))


def _scg_of(trace):
    scg = getattr(trace, "scg", None)
    if scg is None:
        raise ConfigError("trace does not carry its graph")
    return scg


def propagate(scg, trace, node, z, targets=None, score_paths=True):
    """Costs reachable from ``node`` with its value replaced by ``z``.

    Deterministic descendants are recomputed; reparameterized descendants
    are redrawn from their stored noise; other stochastic descendants keep
    their values and, with ``score_paths``, contribute R·(log p − stop(log p)),
    which is zero in value but carries the gradient of their density with
    respect to ``z``.  Parameters are constants: only ``z`` is live.
    """
    desc = scg.descendants(node)
    params = trace.params
    memo = {node: z}
    held = []

    def lookup(name):
        if name in memo:
            return memo[name]
        if name not in desc:
            return trace.values[name] if name in trace.values else params.scalars(name)
        if name in scg.deterministic:
            memo[name] = scg.model.deterministic[name](lookup)
        elif name in scg.costs:
            memo[name] = scg.model.costs[name](lookup)
        else:
            spec = scg.spec(name)
            if spec.kind == "dirac":
                memo[name] = tuple(lookup(p) for p in scg.parents[name])
            elif name in trace.noise and spec.kind == "gaussian":
                ev = dist.evaluate_params(spec, lookup)
                memo[name] = dist.reparam_eval(spec, ev, trace.noise[name], name)
            else:
                memo[name] = trace.values[name]
                held.append(name)
        return memo[name]

    targets = reachable_costs(scg, node) if targets is None else targets
    out = ad.total(lookup(f) for f in targets)
    if score_paths:
        for y in scg.stochastic_order:
            if y not in desc or scg.spec(y).kind == "dirac" or y in trace.noise and scg.spec(y).kind == "gaussian":
                continue
            lookup(y)
            if y not in held:
                continue
            ev = dist.evaluate_params(scg.spec(y), lookup)
            lp = dist.log_prob_eval(scg.spec(y), ev, trace.values[y], y)
            if ad.is_var(lp):
                r = math.fsum(trace.cost_values[f] for f in reachable_costs(scg, y) if f in targets)
                out = ad.add(out, ad.mul(r, ad.sub(lp, ad.stop_gradient(lp))))
    return out


def _discrete_mix(z, k, fn_of_outcome):
    """Σ_i w_i fn(i) with w the one-hot of a hard value or the soft vector itself."""
    from .qlearning import _one_hot

    w = _one_hot(z, k)
    return ad.total(ad.mul(wi, fn_of_outcome(i)) for i, wi in enumerate(w))


def learned_q_signal(trace, node, net, qs) -> Signal:
    """Sum of the node's Q-functions, with only the node's own value substituted."""
    scg = net.scg
    mine = net.nodes_of(node)

    def evaluate(z, tape):
        total = 0.0
        for qn in mine:
            if qn.learned:
                assign = {m: (z if m == node else trace.values[m]) for m in qn.scope}
                q = qs[qn.id]
                total = ad.add(total, q.value_tape(assign) if tape else q.value(assign))
            if qn.direct_costs:
                total = ad.add(total, propagate(scg, trace, node, z, sorted(qn.direct_costs), score_paths=False))
        return total

    value = ad.value_of(evaluate(trace.values[node], False))
    return Signal(value, lambda z: evaluate(z, True), f"Q[{node}]")


def actual_return_signal(trace, node) -> Signal:
    scg = _scg_of(trace)
    return Signal(downstream_return(trace, node), lambda z: propagate(scg, trace, node, z), f"R[{node}]")


class ExactQ:
    """Exact Q-function values from one enumeration of a discrete SCG."""

    def __init__(self, scg, params=None):
        self.scg = scg
        self.params = scg.params if params is None else params
        self.enum = enumerate_traces(scg, self.params)
        self._memo: dict = {}

    def value(self, node, values) -> float:
        total = 0.0
        for f in reachable_costs(self.scg, node):
            sc = cost_scope_of(self.scg, node, f)
            key = (node, f, tuple(values[m] for m in sc))
            if key not in self._memo:
                self._memo[key] = exact_q(self.scg, node, {m: values[m] for m in sc}, f, enum=self.enum)
            total += self._memo[key]
        return total

    def signal(self, trace, node) -> Signal:
        spec = self.scg.spec(node)

        def at(z):
            def q_of(i):
                vals = dict(trace.values)
                vals[node] = i
                return self.value(node, vals)

            return _discrete_mix(z, spec.k, q_of)

        return Signal(self.value(node, trace.values), at, f"exactQ[{node}]")


def make_signal(trace, node, mode, net=None, qs=None, exact: ExactQ | None = None) -> Signal:
    if mode == "learned_q":
        if net is None or qs is None:
            raise ConfigError("learned_q signals need a network and its approximators")
        return learned_q_signal(trace, node, net, qs)
    if mode == "actual_return":
        return actual_return_signal(trace, node)
    if mode == "exact_q":
        if exact is None:
            raise ConfigError("exact_q signals need an ExactQ table")
        return exact.signal(trace, node)
    raise ConfigError(f"unknown signal source {mode!r}")


# ------------------------------------------------------------- node values


def _spec(trace, node):
    return _scg_of(trace).spec(node)


def local_reparam(trace, node):
    """Pathwise value mean + scale·eps with parents held at their samples."""
    spec = _spec(trace, node)
    if spec.kind != "gaussian":
        raise NotReparameterizable(f"{node}: {spec.kind} has no pathwise transform")
    eps = trace.noise.get(node)
    if not isinstance(eps, float):
        raise NotReparameterizable(f"{node} was not drawn through its pathwise transform")
    return dist.reparam_eval(spec, trace.dist_params[node], eps, node)


def _relaxed_parts(trace, node, temperature):
    """(z, soft value, conditional z̃) rebuilt from the stored noise."""
    if temperature <= 0:
        raise TemperatureNonPositive(f"{node}: temperature must be > 0, got {temperature!r}")
    spec = _spec(trace, node)
    draw = trace.relaxed.get(node)
    if spec.kind not in _RELAXABLE:
        raise NotReparameterizable(f"{node}: {spec.kind} has no relaxation")
    if draw is None:
        raise NotReparameterizable(f"{node} was not drawn through its relaxation")
    ev = trace.dist_params[node]
    b = trace.values[node]
    if spec.kind == "bernoulli":
        z, _, soft = dist.relaxed_bernoulli(ev, draw.u, temperature, node)
        zt = dist.conditional_bernoulli_noise(ev, b, draw.v, node)
    else:
        z, _, soft = dist.relaxed_categorical(spec, ev, draw.u, temperature, node)
        zt = dist.conditional_categorical_noise(spec, ev, b, draw.v, node)
    return z, soft, zt


def soften(z, temperature):
    """Relaxed value sigmoid(z/T), or softmax(z/T) for a vector."""
    if isinstance(z, (list, tuple)):
        return dist.softmax([ad.div(x, temperature) for x in z])
    return ad.sigmoid(ad.div(z, temperature))


def quadratic_cv(coeffs, temperature=None):
    """c(z) = c0 + c1·s + c2·s², s = z, or sigmoid(z/T) when a temperature is given."""
    c0, c1, c2 = (float(c) for c in coeffs)

    def c(z):
        s = z if temperature is None else soften(z, temperature)
        if isinstance(s, (list, tuple)):
            raise ConfigError("quadratic control variates act on scalar values")
        return ad.add(c0, ad.add(ad.mul(c1, s), ad.mul(c2, ad.mul(s, s))))

    return c


# --------------------------------------------------------------- estimators


def reinforce(trace, node, signal) -> SurrogateObjective:
    """signal · log p(x | parents), with the signal held constant."""
    coef = _as_float(signal)
    return _objective(trace, score=ad.mul(coef, trace.log_probs[node]))


def baseline_cv(trace, node, signal, c=0.0) -> SurrogateObjective:
    """(signal − c) · log p; ``c`` is a number or a function of the trace."""
    base = c(trace) if callable(c) else c
    coef = _as_float(signal) - float(ad.value_of(base))
    return _objective(trace, score=ad.mul(coef, trace.log_probs[node]))


def taylor_cv(trace, node, f) -> SurrogateObjective:
    """Control variate from the linearization of ``f`` at the node's conditional mean.

    The score coefficient is f(x) − c(x); the correction f′(μ)·μ(θ) carries
    the gradient of E[c] = f(μ).  Discrete values are one-hot vectors, whose
    mean is the probability vector.
    """
    spec = _spec(trace, node)
    ev = trace.dist_params[node]
    if spec.kind == "categorical":
        mu = dist.categorical_probs(ev, spec.k, node)
        x = [1.0 if i == trace.values[node] else 0.0 for i in range(spec.k)]
    elif spec.kind in ("bernoulli", "gaussian"):
        mu = [dist.mean_eval(spec, ev, node)]
        x = [float(trace.values[node])]
    else:
        raise NoAnalyticMean(f"{node}: {spec.kind} has no analytic mean")
    mu_bar = [float(ad.value_of(m)) for m in mu]
    tape = trace.tape
    probe = [tape.input(m) for m in mu_bar]
    f_mu = f(probe if spec.kind == "categorical" else probe[0])
    slope = ad.grad_wrt(f_mu, probe)
    c_x = float(ad.value_of(f_mu)) + math.fsum(g * (xi - m) for g, xi, m in zip(slope, x, mu_bar))
    coef = _fn_at_sample(f, trace, node) - c_x
    correction = ad.total(ad.mul(g, m) for g, m in zip(slope, mu) if g != 0.0)
    return _objective(trace, score=ad.mul(coef, trace.log_probs[node]), correction=correction)


def reparam(trace, node, f) -> SurrogateObjective:
    """f evaluated at the pathwise value; gradients flow through mean + scale·eps."""
    return _objective(trace, pathwise=f(local_reparam(trace, node)))


def relaxed_reparam(trace, node, temperature, f) -> SurrogateObjective:
    """f evaluated at the relaxed value; biased for any positive temperature."""
    _, soft, _ = _relaxed_parts(trace, node, temperature)
    return _objective(trace, pathwise=f(soft))


def cv_reparam(trace, node, signal, c) -> SurrogateObjective:
    """(f − c(z)) · log p + c(z(ε; θ)) for a differentiable control variate c."""
    z = local_reparam(trace, node)
    coef = _as_float(signal) - float(ad.value_of(c(ad.value_of(z))))
    return _objective(trace, score=ad.mul(coef, trace.log_probs[node]), pathwise=c(z))


def cv_reparam_relaxed(trace, node, signal, c, temperature=0.5) -> SurrogateObjective:
    """(f(b) − c(z̃)) · log p(b) − c(z̃) + c(z) with z̃ drawn given the hard value b.

    ``c`` acts on pre-threshold values.  z̃ uses the truncated-noise
    construction: the uniform behind the threshold is restricted to the
    interval that yields b (Gumbel top-k conditioning for categoricals).
    """
    z, _, zt = _relaxed_parts(trace, node, temperature)
    c_zt = c(zt)
    coef = _as_float(signal) - float(ad.value_of(c_zt))
    return _objective(trace, score=ad.mul(coef, trace.log_probs[node]),
                      correction=ad.neg(c_zt), pathwise=c(z))


def q_control_variate(trace, node, R, q, a=1.0, b=0.0, temperature=None) -> SurrogateObjective:
    """(R − a·Q(z) − b) · log p + a·Q(z(ε; θ)).

    For discrete nodes (with a temperature) Q acts on relaxed values and the
    relaxed three-term form is used with c(z) = a·Q(soft(z)) + b.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ConfigError("scale and baseline must be finite")
    spec = _spec(trace, node)
    if spec.kind != "gaussian":
        if temperature is None:
            raise NotReparameterizable(f"{node}: {spec.kind} needs a relaxation temperature")
        return cv_reparam_relaxed(trace, node, R, lambda z: ad.add(ad.mul(a, q(soften(z, temperature))), b), temperature)
    z = local_reparam(trace, node)
    coef = _as_float(R) - a * float(ad.value_of(q(ad.value_of(z)))) - b
    path = ad.mul(a, q(z)) if a != 0.0 else None
    return _objective(trace, score=ad.mul(coef, trace.log_probs[node]), pathwise=path)


def fit_scale_baseline(samples, q_values=None):
    """Variance-minimizing (a, b) for R − (a·Q + b).

    ``samples`` is a sequence of (R, Q) pairs, or the R values with the Q
    values passed separately.
    """
    if q_values is None:
        arr = np.asarray(list(samples), dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DegenerateVariance("expected (R, Q) pairs")
        r, qv = arr[:, 0], arr[:, 1]
    else:
        r, qv = np.asarray(samples, dtype=float), np.asarray(q_values, dtype=float)
    if len(r) < 2 or len(r) != len(qv):
        raise DegenerateVariance("need at least two paired samples")
    var = float(np.var(qv))
    if var <= 1e-300 * max(1.0, float(np.mean(qv * qv))):
        raise DegenerateVariance("control variate has zero sample variance")
    cov = float(np.mean((r - r.mean()) * (qv - qv.mean())))
    a = cov / var
    return a, float(r.mean() - a * qv.mean())


def ppo_clip_objective(ratio, q_value, eps_clip: float):
    """max(r·Q, clip(r, 1−ε, 1+ε)·Q), the pessimistic bound for cost minimization."""
    if not 0 < eps_clip < 1:
        raise ConfigError(f"clip range must lie in (0, 1), got {eps_clip!r}")
    if not ad.value_of(ratio) > 0:
        raise ConfigError(f"probability ratio must be positive, got {ad.value_of(ratio)!r}")
    plain = ad.mul(ratio, q_value)
    clipped = ad.mul(ad.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip), q_value)
    return plain if ad.value_of(plain) >= ad.value_of(clipped) else clipped


def ppo_surrogate(trace, node, old_log_prob: float, q_value, eps_clip=0.2):
    """Clipped objective for one node with r = p_θ(x) / p_old(x)."""
    ratio = ad.exp(ad.sub(trace.log_probs[node], float(old_log_prob)))
    return _objective(trace, score=ppo_clip_objective(ratio, float(ad.value_of(q_value)), eps_clip))


# ---------------------------------------------------------------- assembly


def node_surrogate(trace, node, est: NodeEstimator, signal: Signal) -> SurrogateObjective:
    fam = est.family
    if fam == "reinforce":
        return reinforce(trace, node, signal)
    if fam == "baseline_cv":
        return baseline_cv(trace, node, signal, est.baseline)
    if fam == "taylor_cv":
        return taylor_cv(trace, node, signal)
    if fam == "reparam":
        return reparam(trace, node, signal)
    if fam == "relaxed_reparam":
        return relaxed_reparam(trace, node, est.temperature, signal)
    if fam == "cv_reparam":
        return cv_reparam(trace, node, signal, quadratic_cv(est.cv))
    if fam == "cv_reparam_relaxed":
        return cv_reparam_relaxed(trace, node, signal, quadratic_cv(est.cv, est.temperature), est.temperature)
    if fam == "q_control_variate":
        return q_control_variate(trace, node, downstream_return(trace, node), signal,
                                 est.scale, est.baseline, est.temperature)
    raise ConfigError(f"unknown estimator family {fam!r}")


def build_surrogate(trace, qs, net, config: EstimatorConfig | None = None, exact: ExactQ | None = None,
                    signals: dict | None = None) -> SurrogateObjective:
    """Sum of per-node surrogates and the directly differentiable cost terms.

    The cost terms hold every stochastic value fixed, so they carry exactly
    the gradients of parameters that enter the costs themselves.  Tied
    parameters share tape leaves only by name; their gradients are summed
    by the optimizer.  ``signals`` may supply ready-made per-node signals.
    """
    scg = _scg_of(trace)
    config = config or EstimatorConfig()
    parts = []
    per_node = {}
    for n in scg.stochastic_order:
        if scg.spec(n).kind == "dirac":
            continue
        est = config.for_node(n)
        if signals and n in signals:
            sig = signals[n]
        else:
            sig = make_signal(trace, n, est.signal, net, qs, exact)
        obj = node_surrogate(trace, n, est, sig)
        per_node[n] = obj
        parts.append(obj)
    costs = ad.total(trace.cost_score[f] for f in scg.cost_order)
    parts.append(SurrogateObjective(costs, {"cost": costs}, trace.tape))
    out = combine(parts, trace)
    out.per_node = per_node
    return out
