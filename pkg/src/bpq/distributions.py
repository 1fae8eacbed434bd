"""Log-probabilities, sampling and pathwise transforms for the supported kinds.

Functions here take *evaluated* distribution parameters (the dict returned by
:func:`evaluate_params`), whose entries are floats, tape Vars or lists of them.
"""
from __future__ import annotations

import math

from . import autodiff as ad
from .errors import (
    InvalidDistributionParams,
    NoAnalyticMean,
    NotReparameterizable,
    OutOfSupport,
    TemperatureNonPositive,
)
from .graph import DistributionSpec, check_probability

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def evaluate_params(spec: DistributionSpec, lookup) -> dict:
    return {slot: expr(lookup) for slot, expr in spec.params.items()}


def _check_value_is_int(value, k, node):
    v = ad.value_of(value)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v) or not 0 <= v < k:
        raise OutOfSupport(f"{node or 'node'}: value {v!r} not in {{0..{k - 1}}}")
    return int(v)


def bernoulli_prob(ev, node=""):
    if "logit" in ev:
        return ad.sigmoid(ev["logit"])
    p = ev["p"]
    check_probability(ad.value_of(p), node)
    return p


def bernoulli_logit(ev, node=""):
    if "logit" in ev:
        return ev["logit"]
    p = bernoulli_prob(ev, node)
    pv = ad.value_of(p)
    if pv <= 0.0 or pv >= 1.0:
        raise InvalidDistributionParams(f"{node}: degenerate probability {pv!r} has no finite logit")
    return ad.log(p) - ad.log(1.0 - p)


def categorical_logprobs(ev, k, node=""):
    """Normalized log-probabilities as a list of scalars."""
    if "logits" in ev:
        logits = _as_vector(ev["logits"], k, node)
        lse = ad.logsumexp(logits)
        return [ad.sub(l, lse) for l in logits]
    probs = categorical_probs(ev, k, node)
    return [ad.log(p) if ad.value_of(p) > 0 else None for p in probs]


def categorical_probs(ev, k, node=""):
    if "logits" in ev:
        return [ad.exp(lp) for lp in categorical_logprobs(ev, k, node)]
    probs = _as_vector(ev["probs"], k, node)
    vals = [ad.value_of(p) for p in probs]
    if any(v < 0 for v in vals) or abs(sum(vals) - 1.0) > 1e-9:
        raise InvalidDistributionParams(f"categorical {node!r}: probabilities {vals} are not a distribution")
    return probs


def _as_vector(x, k, node):
    if not isinstance(x, (list, tuple)) or len(x) != k:
        n = len(x) if isinstance(x, (list, tuple)) else 1
        raise InvalidDistributionParams(f"categorical {node!r}: expected {k} entries, got {n}")
    return list(x)


def gaussian_params(ev, node="", allow_zero_scale=False):
    mean, scale = ev["mean"], ev["scale"]
    s = ad.value_of(scale)
    if s < 0 or (s == 0 and not allow_zero_scale) or math.isnan(s):
        raise InvalidDistributionParams(f"gaussian {node!r}: scale {s!r} must be positive")
    return mean, scale


def log_prob_eval(spec: DistributionSpec, ev, value, node="", parent_values=None):
    """log p(value | evaluated params); a Var when the params live on a tape."""
    kind = spec.kind
    if kind == "bernoulli":
        v = _check_value_is_int(value, 2, node)
        if "logit" in ev:
            l = ev["logit"]
            return ad.log(ad.sigmoid(l if v == 1 else ad.neg(l)))
        p = bernoulli_prob(ev, node)
        q = p if v == 1 else ad.sub(1.0, p)
        if ad.value_of(q) <= 0.0:
            raise OutOfSupport(f"{node}: value {v} has probability 0")
        return ad.log(q)
    if kind == "categorical":
        v = _check_value_is_int(value, spec.k, node)
        lp = categorical_logprobs(ev, spec.k, node)[v]
        if lp is None:
            raise OutOfSupport(f"{node}: value {v} has probability 0")
        return lp
    if kind == "gaussian":
        mean, scale = gaussian_params(ev, node)
        z = ad.div(ad.sub(value, mean), scale)
        return ad.sub(ad.neg(ad.add(HALF_LOG_2PI, ad.log(scale))), ad.mul(0.5, ad.mul(z, z)))
    if kind == "dirac":
        if parent_values is not None and ad.value_of(value) != ad.value_of(tuple(parent_values)):
            raise OutOfSupport(f"{node}: dirac value {value!r} differs from its parents {parent_values!r}")
        return 0.0
    raise InvalidDistributionParams(f"unknown kind {kind!r}")


def sample_eval(spec: DistributionSpec, ev, gen, node="", parent_values=None):
    """Draw a value (plain Python) from evaluated params."""
    kind = spec.kind
    if kind == "bernoulli":
        p = ad.value_of(bernoulli_prob(ev, node))
        return 1 if gen.random() < p else 0
    if kind == "categorical":
        probs = [ad.value_of(p) for p in categorical_probs(ev, spec.k, node)]
        u = gen.random()
        acc = 0.0
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                return i
        return max(i for i, p in enumerate(probs) if p > 0)
    if kind == "gaussian":
        mean, scale = gaussian_params(ev, node)
        return ad.value_of(mean) + ad.value_of(scale) * float(gen.standard_normal())
    if kind == "dirac":
        return tuple(ad.value_of(v) for v in parent_values)
    raise InvalidDistributionParams(f"unknown kind {kind!r}")


def mean_eval(spec: DistributionSpec, ev, node=""):
    """E[value | params] for kinds with a scalar analytic mean."""
    if spec.kind == "bernoulli":
        return bernoulli_prob(ev, node)
    if spec.kind == "gaussian":
        return gaussian_params(ev, node)[0]
    raise NoAnalyticMean(f"{node}: {spec.kind} has no scalar analytic mean")


def reparam_eval(spec: DistributionSpec, ev, eps, node=""):
    """Location-scale transform ``mean + scale * eps`` (gaussian only)."""
    if spec.kind != "gaussian":
        raise NotReparameterizable(f"{node}: {spec.kind} has no pathwise transform")
    mean, scale = gaussian_params(ev, node, allow_zero_scale=True)
    return ad.add(mean, ad.mul(scale, eps))


def _logit_u(u):
    return ad.sub(ad.log(u), ad.log(ad.sub(1.0, u)))


def relaxed_bernoulli(ev, u, temperature, node=""):
    """Logistic-noise relaxation: z = logit(p) + logit(u), hard b = [z > 0], soft sigmoid(z / T)."""
    if temperature <= 0:
        raise TemperatureNonPositive(f"{node}: temperature must be > 0, got {temperature!r}")
    z = ad.add(bernoulli_logit(ev, node), math.log(u) - math.log1p(-u))
    b = 1 if ad.value_of(z) > 0 else 0
    soft = ad.sigmoid(ad.div(z, temperature))
    return z, b, soft


def conditional_bernoulli_noise(ev, b, v, node=""):
    """Logistic pre-threshold value drawn given the hard outcome ``b``.

    The uniform noise is truncated to the interval that produces ``b``:
    (1 - p, 1) for b = 1 and (0, 1 - p) for b = 0, rescaled from ``v``.
    """
    p = bernoulli_prob(ev, node)
    if b == 1:
        u = ad.add(ad.sub(1.0, p), ad.mul(v, p))
    else:
        u = ad.mul(v, ad.sub(1.0, p))
    return ad.add(bernoulli_logit(ev, node), _logit_u(u))


def relaxed_categorical(spec, ev, us, temperature, node=""):
    """Gumbel-max relaxation: z_i = log pi_i + g_i, hard argmax, soft softmax(z / T)."""
    if temperature <= 0:
        raise TemperatureNonPositive(f"{node}: temperature must be > 0, got {temperature!r}")
    logp = categorical_logprobs(ev, spec.k, node)
    if any(lp is None for lp in logp):
        raise InvalidDistributionParams(f"{node}: zero-probability category cannot be relaxed")
    z = [ad.add(lp, -math.log(-math.log(u))) for lp, u in zip(logp, us)]
    zv = [ad.value_of(x) for x in z]
    b = max(range(len(zv)), key=lambda i: (zv[i], -i))
    return z, b, softmax([ad.div(x, temperature) for x in z])


def conditional_categorical_noise(spec, ev, b, vs, node=""):
    """Gumbel vector conditioned on its argmax being ``b``."""
    logp = categorical_logprobs(ev, spec.k, node)
    top = -math.log(-math.log(vs[b]))
    out = []
    for i, (lp, v) in enumerate(zip(logp, vs)):
        if i == b:
            out.append(ad.add(top, 0.0) if not ad.is_var(lp) else ad.add(ad.mul(lp, 0.0), top))
        else:
            pi = ad.exp(lp)
            inner = ad.sub(ad.div(-math.log(v), pi), math.log(vs[b]))
            out.append(ad.neg(ad.log(inner)))
    return out


def softmax(xs):
    lse = ad.logsumexp(xs)
    return [ad.exp(ad.sub(x, lse)) for x in xs]


def log_prob(spec: DistributionSpec, value, parent_values: dict, params, tape=None, node=""):
    """Exact log-density / log-mass of ``value`` given parent values and a ParamStore."""
    ev = evaluate_params(spec, _lookup(parent_values, params, tape))
    pv = [parent_values[p] for p in sorted(parent_values)] if spec.kind == "dirac" else None
    return log_prob_eval(spec, ev, value, node, pv)


def reparam_sample(spec: DistributionSpec, parent_values: dict, params, gen, tape=None, node=""):
    """Pathwise sample ``(value, noise)``; value is a Var when ``tape`` is given."""
    if spec.kind != "gaussian":
        raise NotReparameterizable(f"{node or 'node'}: {spec.kind} has no pathwise transform")
    ev = evaluate_params(spec, _lookup(parent_values, params, tape))
    eps = float(gen.standard_normal())
    return reparam_eval(spec, ev, eps, node), eps


def _lookup(parent_values, params, tape):
    def lookup(name):
        if name in parent_values:
            return parent_values[name]
        return params.scalars(name, tape)

    return lookup
