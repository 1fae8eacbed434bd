"""Ancestor / frontier / scope sets and construction of the Q-function network.

A network is described by three tables over (owner X, cost f) pairs:

* ``rules[(X, f)]``: the owners whose Q-functions for ``f`` serve as update
  sources for ``Q_X^f`` (stochastic children reaching ``f``, or ``f`` itself
  when X feeds the cost directly);
* ``scopes[(X, f)]``: the scope of ``Q_X^f``;
* ``blocks[X]``: a partition of the costs seen by X; each block becomes one
  summed Q-function.

Every QNode and edge is derived from these tables, so per-cost networks,
merged networks and reduced trees share one representation.
"""
from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import lru_cache

from .errors import CostUnreachable, UnknownNode
from .graph import ValidatedScg


# ---------------------------------------------------------------- set algebra


@lru_cache(maxsize=64)
def _ancestor_table(scg: ValidatedScg) -> dict:
    table = {n: set() for n in scg.order}
    for n in scg.order:
        for p in scg.parents[n]:
            table[n] |= table[p]
            if p in scg.stochastic:
                table[n].add(p)
    return {n: frozenset(v) for n, v in table.items()}


def ancestors(scg: ValidatedScg, x) -> frozenset:
    """Stochastic nodes with a directed path to ``x`` (``x`` excluded)."""
    if x not in scg.stochastic:
        raise UnknownNode(f"{x!r} is not a stochastic node")
    return _ancestor_table(scg)[x]


def frontier(scg: ValidatedScg, v, f) -> tuple:
    """Members of ``v`` with a path to cost ``f`` avoiding other stochastic members of ``v``."""
    scg.check_cost(f)
    v = set(v)
    for u in v:
        if u not in scg.stochastic:
            raise UnknownNode(f"{u!r} is not a stochastic node")
    out = []
    for u in sorted(v):
        seen = {u}
        queue = deque(scg.children[u])
        hit = False
        while queue:
            n = queue.popleft()
            if n == f:
                hit = True
                break
            if n in seen or n in scg.costs or (n in scg.stochastic and n in v):
                continue
            seen.add(n)
            queue.extend(scg.children[n])
        if hit:
            out.append(u)
    return tuple(out)


def scope(scg: ValidatedScg, x, f) -> tuple:
    """Frontier of ``An_x ∪ {x}`` toward ``f``."""
    scg.check_cost(f)
    if not scg.reaches(x, f):
        raise CostUnreachable(f"cost {f!r} is not reachable from {x!r}")
    return frontier(scg, ancestors(scg, x) | {x}, f)


def cost_scope(scg: ValidatedScg, f) -> tuple:
    """Arguments of the root Q_f: stochastic nodes feeding f through deterministic paths."""
    scg.check_cost(f)
    return scg.stochastic_parents(f)


# ------------------------------------------------------------------ structures


@dataclass(frozen=True)
class QNode:
    id: str
    owner: str
    scope: tuple
    cost_sources: frozenset
    is_root: bool = False
    direct_costs: frozenset = frozenset()

    @property
    def learned_sources(self) -> frozenset:
        if self.is_root:
            return frozenset()
        return self.cost_sources - self.direct_costs

    @property
    def learned(self) -> bool:
        return bool(self.learned_sources)


@dataclass(frozen=True)
class QEdge:
    """Update-rule edge: ``src`` provides the ``label`` costs to ``dst``'s ``group``."""

    src: str
    dst: str
    label: frozenset
    group: frozenset
    free: tuple


@dataclass
class BpqNetwork:
    scg: ValidatedScg
    nodes: dict
    edges: tuple
    rules: dict = field(repr=False)
    scopes: dict = field(repr=False)
    blocks: dict = field(repr=False)
    absorb_immediate: bool = False
    node_of: dict = field(default_factory=dict, repr=False)
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    # -- queries

    @property
    def costs(self) -> frozenset:
        return frozenset(f for (_, f) in self.rules) | frozenset(n.owner for n in self.nodes.values() if n.is_root)

    def qnodes(self):
        return [self.nodes[k] for k in sorted(self.nodes)]

    def roots(self):
        return [n for n in self.qnodes() if n.is_root]

    def learned_nodes(self):
        if "learned" not in self._memo:
            self._memo["learned"] = [self.nodes[i] for i in self.order() if self.nodes[i].learned]
        return list(self._memo["learned"])

    def nodes_of(self, owner):
        return [n for n in self.qnodes() if n.owner == owner]

    def incoming(self, node_id):
        return [e for e in self.edges if e.dst == node_id]

    def outgoing(self, node_id):
        return [e for e in self.edges if e.src == node_id]

    def groups(self, node_id) -> dict:
        """group -> owner -> list of incoming edges (deterministic ordering)."""
        key = ("groups", node_id)
        if key not in self._memo:
            self._memo[key] = self._groups(node_id)
        return self._memo[key]

    def _groups(self, node_id) -> dict:
        out: dict = {}
        for e in self.incoming(node_id):
            owner = self.nodes[e.src].owner
            out.setdefault(e.group, {}).setdefault(owner, []).append(e)
        return {g: dict(sorted(out[g].items())) for g in sorted(out, key=sorted)}

    def order(self):
        """Node ids with every update source before the nodes it updates (roots first)."""
        if "order" not in self._memo:
            self._memo["order"] = self._order()
        return list(self._memo["order"])

    def _order(self):
        indeg = {k: 0 for k in self.nodes}
        succ = defaultdict(list)
        for e in self.edges:
            indeg[e.dst] += 1
            succ[e.src].append(e.dst)
        ready = sorted(k for k, d in indeg.items() if d == 0)
        out = []
        while ready:
            k = ready.pop(0)
            out.append(k)
            for d in sorted(set(succ[k])):
                indeg[d] -= sum(1 for e in self.edges if e.src == k and e.dst == d)
                if indeg[d] == 0:
                    ready.append(d)
            ready.sort()
        return out

    def update_pattern(self) -> dict:
        return {
            k: [{"group": sorted(g), "owners": list(owners)} for g, owners in self.groups(k).items()]
            for k in sorted(self.nodes)
            if not self.nodes[k].is_root
        }

    # -- export

    def to_json(self) -> dict:
        return {
            "qnodes": [
                {
                    "id": n.id,
                    "owner": n.owner,
                    "scope": list(n.scope),
                    "cost_sources": sorted(n.cost_sources),
                    "direct_costs": sorted(n.direct_costs),
                    "is_root": n.is_root,
                }
                for n in self.qnodes()
            ],
            "edges": [
                {"src": e.src, "dst": e.dst, "label": sorted(e.label), "group": sorted(e.group), "free": list(e.free)}
                for e in self.edges
            ],
            "update_pattern": self.update_pattern(),
        }

    def to_dot(self) -> str:
        lines = ["digraph bpq {", "  rankdir=LR;"]
        for n in self.qnodes():
            shape = "box" if n.is_root else "ellipse"
            label = f"{n.id}\\n({', '.join(n.scope)})"
            if n.direct_costs:
                label += f"\\n+ {', '.join(sorted(n.direct_costs))}"
            lines.append(f'  "{n.id}" [shape={shape}, label="{label}"];')
        for e in self.edges:
            lines.append(f'  "{e.src}" -> "{e.dst}" [label="{",".join(sorted(e.label))}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _node_id(owner, sources):
    return f"Q[{owner}|{','.join(sorted(sources))}]"


def _is_trivial(scg, rules, scopes, x, g) -> bool:
    """Q_x^g equals g exactly: its only rule is the root and no variable is left to average."""
    if rules[(x, g)] != frozenset({g}):
        return False
    known = ancestors(scg, x) | {x}
    return set(cost_scope(scg, g)) <= known


def _assemble(scg, rules, scopes, blocks, absorb_immediate=False) -> BpqNetwork:
    costs = sorted({f for (_, f) in rules} | {f for (x, f) in scopes})
    nodes: dict = {}
    node_of: dict = {}  # (owner, cost) -> node id
    for f in costs:
        nodes[f] = QNode(f, f, cost_scope(scg, f), frozenset({f}), is_root=True)
        node_of[(f, f)] = f

    for x in scg.stochastic_order:
        xb = [frozenset(b) for b in blocks.get(x, ()) if b]
        if not xb:
            continue
        direct, learned = [], []
        for b in sorted(xb, key=sorted):
            if absorb_immediate and len(b) == 1 and _is_trivial(scg, rules, scopes, x, next(iter(b))):
                direct.append(b)
            else:
                learned.append(b)
        groups = [[b] for b in learned]
        if direct:
            if groups:
                groups[0].extend(direct)
            else:
                groups = [direct]
        for parts in groups:
            sources = frozenset().union(*parts)
            dcosts = frozenset().union(*[b for b in parts if b in direct]) if direct else frozenset()
            lsrc = sources - dcosts
            scope_from = lsrc if lsrc else dcosts
            sc = sorted(set().union(*[scopes[(x, f)] for f in scope_from]))
            nid = _node_id(x, sources)
            nodes[nid] = QNode(nid, x, tuple(sc), sources, False, dcosts)
            for f in sources:
                node_of[(x, f)] = nid

    edge_labels: dict = {}
    for nid, node in sorted(nodes.items()):
        if node.is_root:
            continue
        x = node.owner
        for f in sorted(node.learned_sources):
            c = rules[(x, f)]
            group = frozenset(g for g in node.learned_sources if rules[(x, g)] == c)
            for y in sorted(c):
                src = node_of[(y, f)]
                key = (src, nid, group)
                edge_labels.setdefault(key, set()).add(f)
    edges = []
    for (src, dst, group), label in sorted(edge_labels.items(), key=lambda kv: (kv[0][1], kv[0][0], sorted(kv[0][2]))):
        free = tuple(m for m in nodes[src].scope if m not in ancestors(scg, nodes[dst].owner) | {nodes[dst].owner})
        edges.append(QEdge(src, dst, frozenset(label), group, free))
    net = BpqNetwork(scg, nodes, tuple(edges), dict(rules), dict(scopes), {k: [frozenset(b) for b in v] for k, v in blocks.items()}, absorb_immediate, node_of)
    _check_components(net)
    return net


def _check_components(net: BpqNetwork):
    """Each edge label must consist of whole components of its source node."""
    for e in net.edges:
        src = net.nodes[e.src]
        if src.is_root:
            continue
        learned = src.learned_sources
        if learned & e.label and not learned <= e.label:
            raise AssertionError(f"edge {e.src}->{e.dst} splits a merged Q-function: {sorted(e.label)}")


def build_percost_network(scg: ValidatedScg, f) -> BpqNetwork:
    """Reversed SCG restricted to nodes reaching ``f``, rooted at ``Q_f``."""
    scg.check_cost(f)
    rules, scopes, blocks = {}, {}, {}
    owners = [x for x in scg.stochastic_order if scg.reaches(x, f)]
    direct = set(scg.stochastic_parents(f))
    for x in owners:
        src = {y for y in owners if x in scg.stochastic_parents(y)}
        if x in direct:
            src.add(f)
        rules[(x, f)] = frozenset(src)
        scopes[(x, f)] = scope(scg, x, f)
        blocks[x] = [frozenset({f})]
    return _assemble(scg, rules, scopes, blocks)


def build_all_percost(scg: ValidatedScg) -> list:
    return [build_percost_network(scg, f) for f in scg.cost_order]


def merge_networks(nets, scope_policy: str = "identical", absorb_immediate: bool = False) -> BpqNetwork:
    """Fuse Q-functions of different costs wherever their update rules line up.

    Starting from the coarsest allowed partition at each owner (one block,
    or one block per distinct scope under ``scope_policy="identical"``),
    blocks are split until every block is consumed identically by every
    downstream owner: same consuming owners, same consuming block and same
    rule-source set.  The result is the coarsest such partition, so the
    merged targets are exactly the sums of the per-cost targets.
    """
    nets = list(nets)
    if not nets:
        raise ValueError("merge_networks needs at least one network")
    if len(nets) == 1 and not absorb_immediate:
        return nets[0]
    if scope_policy not in ("identical", "union"):
        raise ValueError(f"unknown scope policy {scope_policy!r}")
    scg = nets[0].scg
    rules, scopes = {}, {}
    for net in nets:
        if net.scg is not scg:
            raise ValueError("networks were built from different SCGs")
        for key, val in net.rules.items():
            if key in rules and rules[key] != val:
                raise ValueError(f"conflicting rules for {key}")
            rules[key] = val
        scopes.update(net.scopes)
    return _assemble(scg, rules, scopes, _refine(scg, rules, scopes, scope_policy, absorb_immediate), absorb_immediate)


def _refine(scg, rules, scopes, scope_policy, absorb_immediate):
    costs_at = defaultdict(set)
    for (x, f) in rules:
        costs_at[x].add(f)
    consumers = defaultdict(set)  # (y, f) -> owners using y as a source for f
    for (x, f), src in rules.items():
        for y in src:
            consumers[(y, f)].add(x)

    blocks = {}
    for x in scg.stochastic_order:
        if x not in costs_at:
            continue
        initial = defaultdict(set)
        for f in sorted(costs_at[x]):
            if absorb_immediate and _is_trivial(scg, rules, scopes, x, f):
                key = ("trivial", f)
            elif scope_policy == "identical":
                key = ("scope", scopes[(x, f)])
            else:
                key = ("all",)
            initial[key].add(f)
        blocks[x] = [frozenset(b) for _, b in sorted(initial.items(), key=lambda kv: repr(kv[0]))]

    def block_index():
        idx = {}
        for x, bs in blocks.items():
            for i, b in enumerate(bs):
                for f in b:
                    idx[(x, f)] = i
        return idx

    changed = True
    while changed:
        changed = False
        idx = block_index()
        for y in scg.stochastic_order:
            if y not in blocks:
                continue
            new = []
            for b in blocks[y]:
                parts = defaultdict(set)
                for f in b:
                    sig = tuple(sorted((x, idx[(x, f)], tuple(sorted(rules[(x, f)]))) for x in consumers[(y, f)]))
                    parts[sig].add(f)
                if len(parts) > 1:
                    changed = True
                new.extend(frozenset(p) for _, p in sorted(parts.items()))
            blocks[y] = sorted(new, key=sorted)
            if changed:
                idx = block_index()
    return blocks


def reduce_to_tree(net: BpqNetwork, strategy: str = "shortest-path") -> BpqNetwork:
    """Keep one source owner per update group so every Q-function gets one copy of each cost.

    ``shortest-path`` keeps the source closest (in hops) to a root;
    ``chain`` keeps the farthest one, which lines rules up along long
    shared paths and gives later merging more to fuse.  Ties go to the
    lexicographically smallest owner.
    """
    if strategy not in ("shortest-path", "chain"):
        raise ValueError(f"unknown strategy {strategy!r}")
    scg = net.scg
    rules = dict(net.rules)
    dist = {n.id: 0 for n in net.roots()}
    for nid in net.order():
        node = net.nodes[nid]
        if node.is_root:
            continue
        kept = []
        for group, owners in net.groups(nid).items():
            def owner_dist(o):
                return min(dist[e.src] for e in owners[o])

            if strategy == "shortest-path":
                choice = min(owners, key=lambda o: (owner_dist(o), o))
            else:
                choice = min(owners, key=lambda o: (-owner_dist(o), o))
            kept.append(owner_dist(choice))
            for f in group:
                rules[(node.owner, f)] = frozenset({choice})
        dist[nid] = 1 + (min(kept) if strategy == "shortest-path" else max(kept)) if kept else 0
    return _assemble(scg, rules, net.scopes, net.blocks, net.absorb_immediate)


def build_network(scg: ValidatedScg, reduce: str | None = None, merge: bool = True,
                  scope_policy: str = "identical", absorb_immediate: bool = False) -> BpqNetwork:
    """Per-cost networks, optionally reduced to trees, then merged."""
    nets = build_all_percost(scg)
    if reduce:
        nets = [reduce_to_tree(n, reduce) for n in nets]
    if merge:
        return merge_networks(nets, scope_policy, absorb_immediate)
    if len(nets) == 1:
        return nets[0]
    return _combine_unmerged(scg, nets)


def _combine_unmerged(scg, nets):
    rules, scopes, blocks = {}, {}, defaultdict(list)
    for net in nets:
        rules.update(net.rules)
        scopes.update(net.scopes)
        for x, bs in net.blocks.items():
            blocks[x].extend(bs)
    return _assemble(scg, rules, scopes, dict(blocks))
