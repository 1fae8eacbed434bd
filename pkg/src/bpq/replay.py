"""Graph-based experience replay for Q-function nodes."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .errors import EmptyBuffer, LayoutMismatch
from .network import BpqNetwork
from .qlearning import apply_td, combine_upstream, edge_value
from .rng import CounterRng


@dataclass(frozen=True)
class ExperienceTuple:
    node_id: str
    layout: tuple
    values: tuple
    step: int = 0

    def as_dict(self) -> dict:
        return dict(zip(self.layout, self.values))


class ReplayBuffer:
    """Fixed-capacity FIFO of experience tuples with uniform sampling."""

    def __init__(self, capacity: int, layout: tuple, node_id: str = ""):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self.layout = tuple(layout)
        self.node_id = node_id
        self._items: deque = deque(maxlen=self.capacity)
        self.inserted = 0

    def __len__(self):
        return len(self._items)

    def contents(self) -> list:
        return list(self._items)

    def store(self, t: ExperienceTuple):
        if tuple(t.layout) != self.layout:
            raise LayoutMismatch(f"tuple layout {t.layout} differs from buffer layout {self.layout}")
        self._items.append(t)
        self.inserted += 1

    def sample(self, gen: np.random.Generator) -> ExperienceTuple:
        if not self._items:
            raise EmptyBuffer(f"replay buffer {self.node_id!r} is empty")
        return self._items[int(gen.integers(len(self._items)))]


def replay_store(buf: ReplayBuffer, t: ExperienceTuple):
    buf.store(t)


def replay_sample(buf: ReplayBuffer, gen) -> ExperienceTuple:
    return buf.sample(gen)


def resampled_children(net: BpqNetwork, node_id) -> tuple:
    """Stochastic owners whose Q values feed ``node_id`` (redrawn on replay)."""
    owners = {net.nodes[e.src].owner for e in net.incoming(node_id)}
    return tuple(n for n in net.scg.stochastic_order if n in owners)


def tuple_layout(net: BpqNetwork, node_id) -> tuple:
    """Stored values for a node: its scope plus what re-drawing its children needs."""
    scg = net.scg
    node = net.nodes[node_id]
    kids = set(resampled_children(net, node_id))
    need = set(node.scope) | {node.owner}
    for e in net.incoming(node_id):
        src = net.nodes[e.src]
        if src.is_root:
            need |= set(scg.stochastic_parents(src.owner))
            continue
        need |= set(scg.stochastic_parents(src.owner)) | set(src.scope)
        for g in src.direct_costs:
            need |= set(scg.stochastic_parents(g))
    return tuple(n for n in scg.stochastic_order if n in need and n not in kids)


def make_tuple(net, node_id, trace) -> ExperienceTuple:
    layout = tuple_layout(net, node_id)
    return ExperienceTuple(node_id, layout, tuple(trace.values[n] for n in layout), trace.step)


def evaluate_partial(scg, params, stoch_values: dict, names) -> dict:
    """Values of deterministic nodes / costs (and dirac nodes) from stochastic values."""
    memo = dict(stoch_values)

    def lookup(name):
        if name in memo:
            return memo[name]
        if name in scg.deterministic:
            memo[name] = ad.value_of(scg.model.deterministic[name](lookup))
        elif name in scg.costs:
            memo[name] = float(ad.value_of(scg.model.costs[name](lookup)))
        elif name in scg.stochastic and scg.kind(name) == "dirac":
            memo[name] = tuple(lookup(p) for p in scg.parents[name])
        elif name in scg.stochastic:
            raise KeyError(f"value of {name!r} is not available")
        else:
            memo[name] = params.scalars(name)
        return memo[name]

    return {n: lookup(n) for n in names}


def replay_update(q, t: ExperienceTuple, net: BpqNetwork, qs, params=None, rng: CounterRng | None = None,
                  m: int = 4, alpha="default", gamma: float = 1.0, step: int = 0) -> np.ndarray:
    """Redraw the node's children m times under the current parameters and step on the mean loss.

    The loss is the average of (target_i − Q_w(stored scope))²; its gradient
    equals a TD step toward the mean of the m targets.
    """
    scg = net.scg
    params = scg.params if params is None else params
    rng = rng or CounterRng(0)
    base = t.as_dict()
    kids = resampled_children(net, t.node_id)
    node = net.nodes[t.node_id]
    targets = []
    for i in range(m):
        gen = rng.stream("replay:" + t.node_id, step, i)
        values = dict(base)
        for y in kids:
            spec = scg.spec(y)
            if spec.kind == "dirac":
                values[y] = tuple(values[p] for p in scg.parents[y])
                continue
            ctx = evaluate_partial(scg, params, values, [p for p in scg.parents[y]])
            lookup = lambda name, ctx=ctx: ctx[name] if name in ctx else params.scalars(name)
            ev = dist.evaluate_params(spec, lookup)
            values[y] = dist.sample_eval(spec, ev, gen, y)
        costs = _needed_costs(net, t.node_id, scg, params, values)
        groups = []
        for group, owners in net.groups(t.node_id).items():
            for owner, edges in owners.items():
                groups.append((group, sum(edge_value(net, qs, e, values, costs) for e in edges)))
        targets.append(gamma * combine_upstream(groups))
    assign = {k: base[k] for k in node.scope}
    delta = float(np.mean(targets)) - q.value(assign)
    return apply_td(q, delta, assign, alpha)


def _needed_costs(net, node_id, scg, params, values):
    names = set()
    for e in net.incoming(node_id):
        src = net.nodes[e.src]
        if src.is_root:
            names.add(src.owner)
        names |= set(src.direct_costs) & set(e.label)
    avail = {k: v for k, v in values.items() if k in scg.stochastic}
    return evaluate_partial(scg, params, avail, sorted(names))
