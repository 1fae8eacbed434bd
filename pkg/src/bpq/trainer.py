"""Training loop: sample, update the Q-functions, step the parameters."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContinuousNodePresent, NonFiniteGradient, NumericalError
from .estimators import EstimatorConfig, ExactQ, build_surrogate
from .graph import ParamStore, ValidatedScg
from .oracle import exact_expected_cost, outcome_space_size
from .qlearning import TargetNetworkState, lambda_update, slow_track_update, td_sweep
from .replay import ReplayBuffer, make_tuple, replay_update, tuple_layout
from .rng import CounterRng
from .sampling import ancestral_sample

PROB_FLOOR = 1e-4


@dataclass
class TrainConfig:
    iterations: int = 1000
    alpha_q: object = "default"  # float, "default" or "visit"
    alpha_theta: float = 0.1
    lam: float | None = None  # None: one-step updates, else λ-return
    gamma: float = 1.0
    estimators: EstimatorConfig = field(default_factory=EstimatorConfig)
    replay: int = 0  # buffer capacity per Q node, 0 disables replay
    replay_m: int = 4
    target_alpha: float | None = None  # slow-tracking rate for upstream Q copies
    warmup: int = 0  # iterations that only update the Q-functions
    seed: int = 0
    log_every: int = 100
    exact_every: int = 0  # evaluate the exact J every n iterations (0: never)

    def check(self):
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations!r}")
        if not self.alpha_theta > 0:
            raise ConfigError(f"alpha_theta must be positive, got {self.alpha_theta!r}")
        if not (self.alpha_q in ("default", "visit") or (isinstance(self.alpha_q, (int, float)) and self.alpha_q > 0)):
            raise ConfigError(f"alpha_q must be positive, 'default' or 'visit', got {self.alpha_q!r}")
        if self.lam is not None and not 0 <= self.lam <= 1:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma!r}")
        if self.replay < 0 or self.replay_m < 1:
            raise ConfigError("replay capacity must be >= 0 and m >= 1")
        if self.target_alpha is not None and not 0 < self.target_alpha <= 1:
            raise ConfigError(f"target tracking rate must lie in (0, 1], got {self.target_alpha!r}")
        if self.warmup < 0 or self.log_every < 1 or self.exact_every < 0:
            raise ConfigError("warmup, log_every and exact_every must be non-negative (log_every >= 1)")
        return self


@dataclass
class MetricsRecord:
    iteration: int
    total_cost: float
    td_errors: dict
    grad_norm: float
    exact_j: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    params: ParamStore
    metrics: list
    qs: dict


def sgd_step(params: ParamStore, grads: dict, alpha: float, tied=(), constraints=None) -> ParamStore:
    """θ ← θ − α g, with tied groups moved together and probabilities kept in the open interval.

    ``constraints`` maps parameter names to their domain and defaults to
    the store's own domains.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name!r} is not finite: {np.asarray(g).tolist()}")
    domains = params.domains() if constraints is None else dict(params.domains(), **constraints)
    summed = {n: np.asarray(grads.get(n, 0.0), dtype=float) for n in params.names()}
    for group in tied:
        total = sum(summed[n] for n in group)
        for n in group:
            summed[n] = total
    updates = {}
    for n in params.names():
        new = np.asarray(params[n], dtype=float) - alpha * summed[n]
        if domains.get(n) == "probability":
            new = np.clip(new, PROB_FLOOR, 1.0 - PROB_FLOOR)
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"parameter {n!r} became non-finite: {new.tolist()}")
        updates[n] = new
    return params.replace(updates)


def _enumerable(scg) -> bool:
    try:
        outcome_space_size(scg)
    except ContinuousNodePresent:
        return False
    return True


def _needs_exact(config: TrainConfig, scg) -> bool:
    return any(config.estimators.for_node(n).signal == "exact_q" for n in scg.stochastic_order)


def train(scg: ValidatedScg, net, qs: dict, config: TrainConfig, params: ParamStore | None = None,
          sink=None) -> TrainResult:
    """Run the sample / critic / parameter loop for ``config.iterations`` steps.

    ``qs`` is updated in place.  Each emitted :class:`MetricsRecord` is
    appended to the result and passed to ``sink`` when given.
    """
    config.check()
    config.estimators.validate(scg)
    params = scg.params if params is None else params
    rng = CounterRng(config.seed)
    reparam, relax = config.estimators.sampling_plan(scg)
    exact_needed = _needs_exact(config, scg)
    enumerable = _enumerable(scg)
    tied = [tuple(sorted(g)) for g in scg.model.tied]

    buffers = {}
    if config.replay:
        for node in net.learned_nodes():
            buffers[node.id] = ReplayBuffer(config.replay, tuple_layout(net, node.id), node.id)
    track = None
    target_qs = None
    if config.target_alpha is not None:
        track = TargetNetworkState.start({k: q.weights for k, q in qs.items()})
        target_qs = {k: q.copy() for k, q in qs.items()}

    metrics = []
    for it in range(config.iterations):
        trace = ancestral_sample(scg, params, rng, it, reparam=reparam, relax=relax)
        before = {k: q.weights.copy() for k, q in qs.items()} if track is not None else None

        if config.lam is None:
            errs = td_sweep(net, qs, trace, config.alpha_q, config.gamma, target_qs)
        else:
            errs = lambda_update(net, qs, trace, config.alpha_q, config.lam, config.gamma, target_qs)
        if buffers:
            for nid, buf in buffers.items():
                buf.store(make_tuple(net, nid, trace))
                t = buf.sample(rng.stream("replay-pick:" + nid, it))
                replay_update(qs[nid], t, net, target_qs or qs, params, rng, config.replay_m,
                              config.alpha_q, config.gamma, it)
        if track is not None:
            inc = {k: qs[k].weights - before[k] for k in qs}
            track = slow_track_update(track, inc, config.target_alpha)
            for k, w in track.theta.items():
                target_qs[k].weights = w.copy()

        grad_norm = 0.0
        if it >= config.warmup:
            exact = ExactQ(scg, params) if exact_needed else None
            surrogate = build_surrogate(trace, qs, net, config.estimators, exact)
            grads = surrogate.gradients(params)
            grad_norm = math.sqrt(math.fsum(float(np.sum(np.square(g))) for g in grads.values()))
            params = sgd_step(params, grads, config.alpha_theta, tied)

        last = it == config.iterations - 1
        if it % config.log_every == 0 or last:
            exact_j = None
            if enumerable and config.exact_every and (it % config.exact_every == 0 or last):
                exact_j = exact_expected_cost(scg, params)
            rec = MetricsRecord(it, trace.total_cost, {k: abs(float(v)) for k, v in sorted(errs.items())},
                                grad_norm, exact_j)
            metrics.append(rec)
            if sink is not None:
                sink(rec)
    return TrainResult(params, metrics, qs)
