"""Q-function approximators and the update machinery over a network of Q-functions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .errors import ConfigError, EmptyTargets, NonFiniteTarget, ScopeMismatch
from .network import BpqNetwork
from .rng import CounterRng

DEFAULT_ALPHA = {"tabular": 0.1, "linear": 0.01, "mlp": 0.01}


# ----------------------------------------------------------------- features


def _one_hot(value, k):
    """One-hot of a hard index, or the soft vector itself for relaxed values."""
    if isinstance(value, list) and len(value) == k:
        return list(value)
    v = ad.value_of(value)
    if isinstance(v, (int, np.integer)) or (isinstance(v, float) and float(v).is_integer() and not ad.is_var(value)):
        i = int(v)
        if not 0 <= i < k:
            raise ScopeMismatch(f"value {v!r} outside 0..{k - 1}")
        return [1.0 if j == i else 0.0 for j in range(k)]
    if k == 2:
        # a relaxed binary value b in [0, 1] interpolates between the two cells
        return [ad.sub(1.0, value), value]
    raise ScopeMismatch(f"cannot encode {v!r} over {k} categories")


def _mixed_radix(value, cards):
    idx = 0
    for v, c in zip(value, cards):
        idx = idx * c + int(v)
    return idx


@dataclass
class QApproximator:
    """Surrogate cost ``Q_w`` over a sorted scope.

    ``cards`` gives each scope member's cardinality (None for continuous);
    dirac members carry the cardinalities of the nodes they collect in
    ``radix``.
    """

    node_id: str
    owner: str
    scope: tuple
    kind: str
    cards: dict
    weights: np.ndarray
    hidden: tuple = ()
    radix: dict = field(default_factory=dict)
    visits: np.ndarray | None = None

    # -- construction

    @classmethod
    def create(cls, node_id, owner, scope, kind, scg, hidden=(8,), rng: CounterRng | None = None):
        scope = tuple(sorted(scope))
        cards = {m: scg.cardinality.get(m) for m in scope}
        radix = {}
        for m in scope:
            if scg.kind(m) == "dirac" and cards[m] is not None:
                radix[m] = tuple(scg.cardinality[p] for p in scg.parents[m])
        if kind == "tabular":
            if any(c is None for c in cards.values()):
                raise ConfigError(f"{node_id}: tabular Q needs discrete scope, got {cards}")
            size = int(np.prod([cards[m] for m in scope])) if scope else 1
            w = np.zeros(size)
            q = cls(node_id, owner, scope, kind, cards, w, (), radix, np.zeros(size))
            return q
        dim = sum(2 if cards[m] is None else cards[m] for m in scope)
        if kind == "linear":
            return cls(node_id, owner, scope, kind, cards, np.zeros(dim + 1), (), radix)
        if kind == "mlp":
            hidden = tuple(hidden)
            sizes = [dim] + list(hidden) + [1]
            n = sum(sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1))
            gen = (rng or CounterRng(0)).stream("qinit:" + node_id, 0)
            w = gen.uniform(-0.05, 0.05, size=n)
            return cls(node_id, owner, scope, kind, cards, w, hidden, radix)
        raise ConfigError(f"unknown approximator kind {kind!r}")

    def copy(self) -> "QApproximator":
        return QApproximator(
            self.node_id, self.owner, self.scope, self.kind, self.cards, self.weights.copy(),
            self.hidden, self.radix, None if self.visits is None else self.visits.copy(),
        )

    # -- features

    def _check(self, assignment):
        missing = [m for m in self.scope if m not in assignment]
        if missing:
            raise ScopeMismatch(f"{self.node_id}: assignment lacks scope member(s) {missing}")

    def _var_features(self, m, value):
        c = self.cards[m]
        if c is None:
            return [value, ad.mul(value, value)]
        if m in self.radix and isinstance(ad.value_of(value), tuple):
            value = _mixed_radix(ad.value_of(value), self.radix[m])
        return _one_hot(value, c)

    def features(self, assignment) -> list:
        self._check(assignment)
        if self.kind == "tabular":
            out = [1.0]
            for m in self.scope:
                oh = self._var_features(m, assignment[m])
                out = [ad.mul(a, b) for a in out for b in oh]
            return out
        feats = [] if self.kind == "mlp" else [1.0]
        for m in self.scope:
            feats.extend(self._var_features(m, assignment[m]))
        return feats

    def _hard_cell(self, assignment):
        """Table index when every scope value is a hard outcome, else None."""
        idx = 0
        for m in self.scope:
            if m not in assignment:
                self._check(assignment)
            v = assignment[m]
            if ad.is_var(v) or isinstance(v, list):
                return None
            if isinstance(v, tuple):
                v = _mixed_radix(v, self.radix[m])
            elif isinstance(v, float):
                if not v.is_integer():
                    return None
            iv = int(v)
            if iv != v or not 0 <= iv < self.cards[m]:
                raise ScopeMismatch(f"{self.node_id}: {m}={v!r} is not a valid outcome")
            idx = idx * self.cards[m] + iv
        return idx

    def _hard(self, assignment) -> bool:
        return self._hard_cell(assignment) is not None

    def cell(self, assignment) -> int:
        """Table index of a hard assignment (tabular only)."""
        self._check(assignment)
        idx = 0
        for m in self.scope:
            v = ad.value_of(assignment[m])
            if isinstance(v, tuple):
                v = _mixed_radix(v, self.radix[m])
            iv = int(v)
            if iv != v or not 0 <= iv < self.cards[m]:
                raise ScopeMismatch(f"{self.node_id}: {m}={v!r} is not a valid outcome")
            idx = idx * self.cards[m] + iv
        return idx

    # -- evaluation

    def _layers(self):
        dim = sum(2 if self.cards[m] is None else self.cards[m] for m in self.scope)
        sizes = [dim] + list(self.hidden) + [1]
        out, pos = [], 0
        for i in range(len(sizes) - 1):
            n_in, n_out = sizes[i], sizes[i + 1]
            W = self.weights[pos:pos + n_in * n_out].reshape(n_out, n_in)
            pos += n_in * n_out
            b = self.weights[pos:pos + n_out]
            pos += n_out
            out.append((W, b))
        return out

    def value(self, assignment) -> float:
        if self.kind == "tabular":
            c = self._hard_cell(assignment)
            if c is not None:
                return float(self.weights[c])
        x = np.array([ad.value_of(f) for f in self.features(assignment)], dtype=float)
        if self.kind != "mlp":
            return float(self.weights @ x)
        h = x
        layers = self._layers()
        for W, b in layers[:-1]:
            h = np.tanh(W @ h + b)
        W, b = layers[-1]
        return float((W @ h + b)[0])

    def value_tape(self, assignment):
        """Q with weights as constants; differentiable w.r.t. Var-valued inputs."""
        feats = self.features(assignment)
        if self.kind != "mlp":
            return ad.affine([float(w) for w in self.weights], feats)
        h = feats
        layers = self._layers()
        for W, b in layers[:-1]:
            h = [ad.tanh(ad.affine(list(map(float, row)), h, float(bi))) for row, bi in zip(W, b)]
        W, b = layers[-1]
        return ad.affine(list(map(float, W[0])), h, float(b[0]))

    def grad_w(self, assignment) -> np.ndarray:
        """∂Q/∂w at a (hard or soft) assignment."""
        if self.kind == "tabular":
            c = self._hard_cell(assignment)
            if c is None:
                return np.array([ad.value_of(f) for f in self.features(assignment)], dtype=float)
            g = np.zeros(len(self.weights))
            g[c] = 1.0
            return g
        x = np.array([ad.value_of(f) for f in self.features(assignment)], dtype=float)
        if self.kind == "linear":
            return x
        layers = self._layers()
        acts = [x]
        h = x
        for W, b in layers[:-1]:
            h = np.tanh(W @ h + b)
            acts.append(h)
        grads = []
        delta = np.array([1.0])
        for li in range(len(layers) - 1, -1, -1):
            W, b = layers[li]
            a_in = acts[li]
            grads.append((np.outer(delta, a_in), delta.copy()))
            if li > 0:
                delta = (W.T @ delta) * (1.0 - acts[li] ** 2)
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    def to_json(self) -> dict:
        return {
            "version": 1,
            "node": self.node_id,
            "owner": self.owner,
            "scope": list(self.scope),
            "kind": self.kind,
            "hidden": list(self.hidden),
            "weights": self.weights.tolist(),
        }

    def load_json(self, data: dict):
        if data.get("version") != 1 or data.get("kind") != self.kind or tuple(data.get("scope", ())) != self.scope:
            raise ConfigError(f"{self.node_id}: checkpoint does not match this approximator")
        w = np.array(data["weights"], dtype=float)
        if w.shape != self.weights.shape:
            raise ConfigError(f"{self.node_id}: checkpoint has {w.shape} weights, expected {self.weights.shape}")
        self.weights = w


def q_eval(q: QApproximator, assignment, tape: bool = False):
    """Evaluate ``q``; with ``tape`` the result is differentiable in Var-valued inputs."""
    return q.value_tape(assignment) if tape else q.value(assignment)


def make_approximators(net: BpqNetwork, kind="tabular", hidden=(8,), rng=None, kinds=None) -> dict:
    """One approximator per learned QNode, keyed by node id."""
    kinds = kinds or {}
    qs = {}
    for node in net.learned_nodes():
        k = kinds.get(node.owner, kinds.get(node.id, kind))
        qs[node.id] = QApproximator.create(node.id, node.owner, node.scope, k, net.scg, hidden, rng)
    return qs


# ------------------------------------------------------------ update targets


def combine_upstream(targets) -> float:
    """Average values sharing a cost source, then sum across sources."""
    targets = list(targets)
    if not targets:
        raise EmptyTargets("no upstream values to combine")
    groups: dict = {}
    for source, value in targets:
        groups.setdefault(source, []).append(value)
    total = 0.0
    for source in sorted(groups, key=lambda s: sorted(s) if isinstance(s, frozenset) else [s]):
        vals = groups[source]
        total += math.fsum(vals) / len(vals)
    return total


def _scope_values(node, values):
    return {m: values[m] for m in node.scope}


def node_value(net: BpqNetwork, qs, node_id, values, costs, components=None) -> float:
    """Full value of a QNode (learned part plus directly evaluated costs).

    ``components`` restricts the sum to the given cost sources; the learned
    part counts when any of its sources is included.
    """
    node = net.nodes[node_id]
    if node.is_root:
        return float(costs[node.owner])
    total = 0.0
    learned = node.learned_sources
    if learned and (components is None or learned & components):
        total += qs[node_id].value(_scope_values(node, values))
    for g in sorted(node.direct_costs):
        if components is None or g in components:
            total += float(costs[g])
    return total


def edge_value(net, qs, edge, values, costs) -> float:
    return node_value(net, qs, edge.src, values, costs, edge.label)


def group_values(net, qs, node_id, values, costs) -> list:
    """(group, per-owner summed value) pairs feeding ``node_id``."""
    out = []
    for group, owners in net.groups(node_id).items():
        for owner, edges in owners.items():
            out.append((group, math.fsum(edge_value(net, qs, e, values, costs) for e in edges)))
    return out


def node_target(net, qs, node_id, values, costs, gamma=1.0) -> float:
    """One-step sample target ``γ · combine(upstream values)``."""
    return gamma * combine_upstream(group_values(net, qs, node_id, values, costs))


def trace_costs(trace) -> dict:
    return dict(trace.cost_values)


def sample_update(q: QApproximator, target, assignment, alpha="default") -> np.ndarray:
    """One SGD step on ½(target − Q)²; returns (and stores) the new weights.

    ``alpha="visit"`` uses 1/n with n the visit count of the tabular cell.
    """
    t = float(target)
    if not math.isfinite(t):
        raise NonFiniteTarget(f"{q.node_id}: target {target!r}")
    return apply_td(q, t - q.value(assignment), assignment, alpha)


def apply_td(q: QApproximator, delta, assignment, alpha="default") -> np.ndarray:
    """w ← w + α δ ∇Q for a given error δ."""
    if not math.isfinite(delta):
        raise NonFiniteTarget(f"{q.node_id}: TD error {delta!r}")
    cell = q._hard_cell(assignment) if q.kind == "tabular" else None
    if alpha == "visit":
        if q.kind != "tabular":
            raise ConfigError("visit-count step sizes need a tabular approximator")
        if cell is None:
            cell = q.cell(assignment)
        q.visits[cell] += 1
        a = 1.0 / q.visits[cell]
    else:
        a = DEFAULT_ALPHA[q.kind] if alpha == "default" else float(alpha)
        if a <= 0:
            raise ConfigError(f"step size must be positive, got {a!r}")
    if cell is not None:
        # one-hot gradient: only the visited cell moves
        w = q.weights.copy()
        w[cell] += a * delta
        q.weights = w
    else:
        q.weights = q.weights + a * delta * q.grad_w(assignment)
    return q.weights


def td_sweep(net, qs, trace, alpha="default", gamma=1.0, target_qs=None) -> dict:
    """One-step updates of every learned QNode, roots first; returns TD errors.

    ``target_qs`` (slow-tracking copies) supplies upstream values when given.
    """
    src = target_qs if target_qs is not None else qs
    errs = {}
    costs = trace.cost_values
    for node in net.learned_nodes():
        assign = _scope_values(node, trace.values)
        target = node_target(net, src, node.id, trace.values, costs, gamma)
        delta = target - qs[node.id].value(assign)
        apply_td(qs[node.id], delta, assign, alpha)
        errs[node.id] = delta
    return errs


def lambda_return_propagate(net: BpqNetwork, qs, trace, lam=0.9, gamma=1.0, target_qs=None) -> dict:
    """Errors δ for every learned QNode, accumulated from the roots down.

    δ_N = (γ·target_N − Q̂_N) + γλ·combine(upstream δ), where upstream δ of a
    root or a directly evaluated cost is 0 and δs are grouped exactly like
    the values they correct.
    """
    src = target_qs if target_qs is not None else qs
    values, costs = trace.values, trace.cost_values
    delta: dict = {}
    for nid in net.order():
        node = net.nodes[nid]
        if node.is_root or not node.learned:
            continue
        q_hat = qs[nid].value(_scope_values(node, values))
        td = node_target(net, src, nid, values, costs, gamma) - q_hat
        ups = []
        for group, owners in net.groups(nid).items():
            for owner, edges in owners.items():
                d = 0.0
                for e in edges:
                    s = net.nodes[e.src]
                    if not s.is_root and s.learned and s.learned_sources & e.label:
                        d += delta[e.src]
                ups.append((group, d))
        delta[nid] = td + gamma * lam * (combine_upstream(ups) if ups else 0.0)
    return delta


def lambda_update(net, qs, trace, alpha="default", lam=0.9, gamma=1.0, target_qs=None) -> dict:
    """Synchronous λ-return pass: all δ first, then every approximator steps."""
    deltas = lambda_return_propagate(net, qs, trace, lam, gamma, target_qs)
    for nid, d in deltas.items():
        node = net.nodes[nid]
        apply_td(qs[nid], d, _scope_values(node, trace.values), alpha)
    return deltas


# ------------------------------------------------------------ advantage


def advantage(net: BpqNetwork, qs, node_id, trace, sibling: str = "sample", params=None) -> float:
    """Q_N centred by the Q-functions it feeds.

    For each consumer M of N the baseline is Q̂_M minus the contributions of
    M's other update groups (siblings); with several consumers the
    baselines are averaged.  Sibling contributions use their sampled values
    (``sample``) or, for discrete sibling owners, their conditional
    expectation under the current distribution (``expectation``).
    """
    if sibling not in ("sample", "expectation"):
        raise ConfigError(f"unknown sibling handling {sibling!r}")
    values, costs = trace.values, trace.cost_values
    outs = net.outgoing(node_id)
    if not outs:
        raise ScopeMismatch(f"{node_id} feeds no other Q-function")
    terms = []
    for e in outs:
        m = net.nodes[e.dst]
        own = edge_value(net, qs, e, values, costs)
        q_m = qs[m.id].value(_scope_values(m, values))
        terms.append(own + _sibling_total(net, qs, m.id, e, trace, sibling, params) - q_m)
    return math.fsum(terms) / len(terms)


def _sibling_total(net, qs, m_id, e, trace, sibling, params):
    """Contribution of M's target that does not come from e's owner or its averaging peers."""
    owner_e = net.nodes[e.src].owner
    total = 0.0
    for group, owners in net.groups(m_id).items():
        parts = []
        for owner, edges in owners.items():
            if group == e.group:
                if owner != owner_e:
                    continue
                val = 0.0
                for s in edges:
                    if s == e:
                        continue
                    val += _edge_maybe_expected(net, qs, s, trace, sibling, params, owner_e)
                parts.append(val)
            else:
                parts.append(math.fsum(_edge_maybe_expected(net, qs, s, trace, sibling, params, owner_e) for s in edges))
        if parts:
            total += math.fsum(parts) / len(parts)
    return total


def _edge_maybe_expected(net, qs, s, trace, sibling, params, exclude_owner):
    owner = net.nodes[s.src].owner
    if sibling == "expectation" and owner in net.scg.stochastic and owner != exclude_owner:
        return _expected_edge(net, qs, s, trace, params)
    return edge_value(net, qs, s, trace.values, trace.cost_values)


def _expected_edge(net, qs, edge, trace, params):
    """E over the source owner's outcome (given its sampled parents) of the edge value."""
    from .sampling import reevaluate

    scg = net.scg
    owner = net.nodes[edge.src].owner
    spec = scg.spec(owner)
    if spec.kind not in ("bernoulli", "categorical"):
        raise ConfigError(f"expectation over {owner} needs a bernoulli or categorical node")
    ev = {k: ad.value_of(v) for k, v in trace.dist_params[owner].items()}
    probs = [1.0 - dist.bernoulli_prob(ev), dist.bernoulli_prob(ev)] if spec.kind == "bernoulli" else dist.categorical_probs(ev, spec.k)
    total = 0.0
    for outcome, p in enumerate(probs):
        p = ad.value_of(p)
        if p == 0.0:
            continue
        vals = dict(trace.values)
        vals[owner] = outcome
        new_costs = dict(trace.cost_values)
        for f, v in reevaluate(scg, trace, {owner: outcome}).items():
            new_costs[f] = float(ad.value_of(v))
        total += p * edge_value(net, qs, edge, vals, new_costs)
    return total


# ---------------------------------------------------------- slow tracking


@dataclass
class TargetNetworkState:
    """Target parameters θ that trail the learned ones by a residual Δθ."""

    theta: dict
    delta: dict

    @classmethod
    def start(cls, params: dict) -> "TargetNetworkState":
        return cls({k: np.array(v, dtype=float) for k, v in params.items()},
                   {k: np.zeros_like(np.array(v, dtype=float)) for k, v in params.items()})

    def learned(self) -> dict:
        return {k: self.theta[k] + self.delta[k] for k in self.theta}


def slow_track_update(state: TargetNetworkState, increment: dict, alpha: float) -> TargetNetworkState:
    """Δθ += Δ; θ += αΔθ; Δθ *= (1 − α).  θ + Δθ moves by exactly Δ."""
    if not 0 < alpha <= 1:
        raise ConfigError(f"tracking rate must lie in (0, 1], got {alpha!r}")
    theta, delta = {}, {}
    for k in state.theta:
        d = state.delta[k] + np.asarray(increment.get(k, 0.0), dtype=float)
        theta[k] = state.theta[k] + alpha * d
        delta[k] = d - alpha * d
    return TargetNetworkState(theta, delta)
