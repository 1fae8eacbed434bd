"""Command-line entry point and the JSON model-file reader.

Commands: validate, build-net, train, grad-check, variance-bench.  Output is
JSON (one document, or one record per line for training metrics); pass
``--pretty`` for indented output.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import BpqError, ParseError, SchemaError
from .estimators import EstimatorConfig, ExactQ, build_surrogate, reachable_costs
from .graph import ParamStore, ScgModel, ValidatedScg, validate_model
from .network import build_network, scope
from .oracle import exact_grad, outcome_space_size
from .qlearning import make_approximators
from .rng import CounterRng
from .sampling import ancestral_sample
from .trainer import TrainConfig, train

TOP_KEYS = ("nodes", "edges", "costs", "params", "tied")
_SLOT_KEYS = ("p", "logit", "probs", "logits", "mean", "scale")


# -------------------------------------------------------------- model files


def _need(obj, key, where):
    if key not in obj:
        raise SchemaError(f"{where}: missing required key {key!r}")
    return obj[key]


def _name(entry, where):
    name = _need(entry, "name", where)
    if not isinstance(name, str) or not name.isidentifier():
        raise SchemaError(f"{where}.name: {name!r} is not a valid identifier")
    return name


def parse_model_dict(doc) -> ScgModel:
    """Build an :class:`ScgModel` from a decoded model document."""
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object")
    for key in TOP_KEYS:
        _need(doc, key, "model")
    extra = set(doc) - set(TOP_KEYS) - {"estimators", "description"}
    if extra:
        raise SchemaError(f"model: unknown top-level key(s) {sorted(extra)}")

    model = ScgModel()
    values, domains = {}, {}
    if not isinstance(doc["params"], dict):
        raise SchemaError("params: expected an object mapping names to values")
    for pname, entry in doc["params"].items():
        where = f"params.{pname}"
        if isinstance(entry, dict):
            values[pname] = _need(entry, "value", where)
            domains[pname] = entry.get("domain", "real")
        else:
            values[pname] = entry
        if not isinstance(values[pname], (int, float, list)) or isinstance(values[pname], bool):
            raise SchemaError(f"{where}: value must be a number or a list of numbers")
    model.params = ParamStore(values, domains)

    seen = set()

    def claim(name, where):
        if name in seen:
            raise SchemaError(f"{where}: duplicate node name {name!r}")
        seen.add(name)

    if not isinstance(doc["nodes"], list):
        raise SchemaError("nodes: expected a list")
    for i, entry in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{where}: expected an object")
        name = _name(entry, where)
        claim(name, where)
        ntype = _need(entry, "type", where)
        if ntype == "stochastic":
            kind = _need(entry, "dist", where)
            slots = {k: entry[k] for k in _SLOT_KEYS if k in entry}
            unknown = set(entry) - set(_SLOT_KEYS) - {"name", "type", "dist", "k"}
            if unknown:
                raise SchemaError(f"{where}: unknown key(s) {sorted(unknown)}")
            try:
                model.add_stochastic(name, kind, (), k=entry.get("k"), **slots)
            except BpqError as exc:
                raise SchemaError(f"{where}: {exc}") from exc
        elif ntype == "deterministic":
            try:
                model.add_deterministic(name, _need(entry, "expr", where))
            except ParseError as exc:
                raise ParseError(f"{where}.expr: {exc}") from exc
        else:
            raise SchemaError(f"{where}.type: expected 'stochastic' or 'deterministic', got {ntype!r}")

    if not isinstance(doc["costs"], list):
        raise SchemaError("costs: expected a list")
    for i, entry in enumerate(doc["costs"]):
        where = f"costs[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{where}: expected an object")
        name = _name(entry, where)
        claim(name, where)
        try:
            model.add_cost(name, _need(entry, "expr", where))
        except ParseError as exc:
            raise ParseError(f"{where}.expr: {exc}") from exc

    if not isinstance(doc["edges"], list):
        raise SchemaError("edges: expected a list")
    for i, e in enumerate(doc["edges"]):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(x, str) for x in e)):
            raise SchemaError(f"edges[{i}]: expected a [parent, child] pair of names")
        model.edges.append((e[0], e[1]))

    if not isinstance(doc["tied"], list):
        raise SchemaError("tied: expected a list of parameter-name lists")
    for i, group in enumerate(doc["tied"]):
        if not (isinstance(group, list) and all(isinstance(x, str) for x in group)):
            raise SchemaError(f"tied[{i}]: expected a list of parameter names")
        model.tied.append(frozenset(group))
    est = doc.get("estimators", {})
    if not isinstance(est, dict):
        raise SchemaError("estimators: expected an object")
    model.estimators = dict(est)
    return model


def parse_model_file(path) -> ScgModel:
    """Read a JSON model file; syntax errors report line and column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_model_dict(doc)


def model_to_dict(model: ScgModel) -> dict:
    """Inverse of :func:`parse_model_dict` (up to key order)."""
    nodes = []
    for name, spec in model.stochastic.items():
        entry = {"name": name, "type": "stochastic", "dist": spec.kind}
        if spec.kind == "categorical":
            entry["k"] = spec.k
        entry.update({slot: e.source for slot, e in spec.params.items()})
        nodes.append(entry)
    for name, e in model.deterministic.items():
        nodes.append({"name": name, "type": "deterministic", "expr": e.source})
    params = {}
    for n in model.params.names():
        v = model.params.as_dict()[n]
        dom = model.params.domain(n)
        params[n] = v if dom == "real" else {"value": v, "domain": dom}
    doc = {
        "nodes": nodes,
        "edges": [list(e) for e in model.edges],
        "costs": [{"name": n, "expr": e.source} for n, e in model.costs.items()],
        "params": params,
        "tied": [sorted(g) for g in model.tied],
    }
    if model.estimators:
        doc["estimators"] = model.estimators
    return doc


def fixture_names() -> list:
    root = resources.files("bpq") / "fixtures"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def fixture_path(name: str):
    return resources.files("bpq") / "fixtures" / f"{name}.json"


def load_fixture(name: str) -> ValidatedScg:
    return validate_model(parse_model_file(fixture_path(name)))


def load_model(path) -> ValidatedScg:
    p = Path(path)
    if not p.exists() and not p.suffix and (fixture_path(str(path))).is_file():
        return load_fixture(str(path))
    return validate_model(parse_model_file(p))


# ------------------------------------------------------------------ helpers


def _dump(obj, pretty=False) -> str:
    return json.dumps(obj, sort_keys=True, indent=2 if pretty else None)


def _estimator_config(scg, specs) -> EstimatorConfig:
    cfg = EstimatorConfig.from_dict(scg.model.estimators)
    for s in specs or ():
        cfg = cfg.with_override(s)
    return cfg.validate(scg)


def _flatten(grads: dict) -> list:
    out = []
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=float)
        for idx in np.ndindex(g.shape):
            out.append((name, list(idx), float(g[idx])))
    return out


def _is_exact_family(cfg, scg) -> bool:
    return all(cfg.for_node(n).family in ("reinforce", "baseline_cv", "taylor_cv")
               for n in scg.stochastic_order if scg.spec(n).kind != "dirac")


def _with_signal(cfg: EstimatorConfig, signal: str) -> EstimatorConfig:
    from dataclasses import replace

    return EstimatorConfig(replace(cfg.default, signal=signal),
                           {n: replace(e, signal=signal) for n, e in cfg.nodes.items()})


# ----------------------------------------------------------------- commands


def cmd_validate(args, out):
    scg = load_model(args.model)
    scopes = {}
    for x in scg.stochastic_order:
        scopes[x] = {f: list(scope(scg, x, f)) for f in reachable_costs(scg, x)}
    summary = {
        "nodes": {n: {"kind": scg.kind(n), "parents": list(scg.parents[n])} for n in scg.order},
        "order": list(scg.order),
        "edges": sorted([p, c] for c in scg.order for p in scg.parents[c]),
        "costs": list(scg.cost_order),
        "scopes": scopes,
        "params": scg.params.as_dict(),
    }
    out.write(_dump(summary, args.pretty) + "\n")
    return 0


def cmd_build_net(args, out):
    scg = load_model(args.model)
    net = build_network(scg, reduce=args.reduce, merge=not args.no_merge,
                        scope_policy=args.scope_policy, absorb_immediate=args.absorb)
    doc = {"network": net.to_json(), "dot": net.to_dot()}
    if args.out:
        Path(args.out).write_text(_dump(net.to_json(), args.pretty) + "\n")
        Path(args.out).with_suffix(".dot").write_text(net.to_dot())
    out.write(_dump(doc, args.pretty) + "\n")
    return 0


def cmd_train(args, out):
    scg = load_model(args.model)
    cfg = _estimator_config(scg, args.estimator)
    net = build_network(scg, reduce=args.reduce)
    qs = make_approximators(net, args.q_kind, rng=CounterRng(args.seed))
    alpha_q = args.alpha_q if args.alpha_q in ("default", "visit") else float(args.alpha_q)
    tc = TrainConfig(
        iterations=args.iters, alpha_q=alpha_q, alpha_theta=args.alpha_theta, lam=args.lam,
        gamma=args.gamma, estimators=cfg, replay=args.replay, replay_m=args.replay_m,
        target_alpha=args.target_alpha, warmup=args.warmup, seed=args.seed, log_every=args.log_every,
        exact_every=args.exact_every,
    )
    res = train(scg, net, qs, tc, sink=lambda r: out.write(r.to_json() + "\n"))
    final = {"final_params": res.params.as_dict()}
    out.write(_dump(final) + "\n")
    if args.out:
        ckpt = {"params": res.params.as_dict(), "qs": {k: q.to_json() for k, q in sorted(res.qs.items())}}
        Path(args.out).write_text(_dump(ckpt, args.pretty) + "\n")
    return 0


def grad_check(scg, cfg: EstimatorConfig, seed: int, samples: int = 10000) -> dict:
    """Estimator mean against the exact gradient.

    Discrete models whose estimators need no noise are averaged exactly over
    all outcomes with exact Q signals; otherwise the mean and its standard
    error come from ``samples`` seeded draws.
    """
    params = scg.params
    try:
        outcome_space_size(scg)
        enumerable = True
    except BpqError:
        enumerable = False
    oracle = _flatten(exact_grad(scg)) if enumerable else None
    if enumerable and _is_exact_family(cfg, scg):
        cfg = _with_signal(cfg, "exact_q")
        exact = ExactQ(scg)
        acc = {n: np.zeros(params.shape(n)) for n in params.names()}
        for a, p in exact.enum:
            tr = ancestral_sample(scg, assignment=a)
            for n, g in build_surrogate(tr, None, None, cfg, exact).gradients(params).items():
                acc[n] += p * g
        mode, est, err = "exact", _flatten(acc), None
    else:
        signal = "exact_q" if enumerable else "actual_return"
        cfg = _with_signal(cfg, signal)
        exact = ExactQ(scg) if enumerable else None
        reparam, relax = cfg.sampling_plan(scg)
        rng = CounterRng(seed)
        rows = []
        for i in range(samples):
            tr = ancestral_sample(scg, rng=rng, step=i, reparam=reparam, relax=relax)
            rows.append([v for _, _, v in _flatten(build_surrogate(tr, None, None, cfg, exact).gradients(params))])
        arr = np.array(rows)
        keys = _flatten({n: np.zeros(params.shape(n)) for n in params.names()})
        est = [(n, idx, float(m)) for (n, idx, _), m in zip(keys, arr.mean(0))]
        err = (arr.std(0, ddof=1) / math.sqrt(samples)).tolist()
        mode = "monte_carlo"
    table = []
    for i, (name, idx, val) in enumerate(est):
        row = {"param": name, "index": idx, "estimate": val}
        if oracle is not None:
            row["oracle"] = oracle[i][2]
            row["abs_err"] = abs(val - oracle[i][2])
        if err is not None:
            row["stderr"] = err[i]
        table.append(row)
    result = {"mode": mode, "rows": table}
    if oracle is not None:
        result["max_abs_err"] = max((r["abs_err"] for r in table), default=0.0)
    return result


def cmd_grad_check(args, out):
    scg = load_model(args.model)
    cfg = _estimator_config(scg, args.estimator)
    out.write(_dump(grad_check(scg, cfg, args.seed, args.samples), args.pretty) + "\n")
    return 0


def variance_bench(scg, configs: dict, seed: int, samples: int = 10000, pilot: int = 1000) -> dict:
    """Per-estimator mean, variance and bias over shared seeds.

    Every configuration sees the same seeds; those drawing every node the
    same way therefore share their traces.  Signals are sampled returns.
    A ``baseline_cv`` entry without an explicit baseline gets, per node,
    the fitted (a, b) of the return on a constant, i.e. the mean return
    over ``pilot`` draws from an independent seed range.
    """
    params = scg.params
    try:
        oracle = dict(((n, tuple(i)), v) for n, i, v in _flatten(exact_grad(scg)))
    except BpqError:
        oracle = None
    table = {}
    for label, cfg in configs.items():
        cfg = _with_signal(cfg, "actual_return")
        cfg = _fit_baselines(scg, cfg, seed, pilot)
        reparam, relax = cfg.sampling_plan(scg)
        rng = CounterRng(seed)
        rows = []
        for i in range(samples):
            tr = ancestral_sample(scg, rng=rng, step=i, reparam=reparam, relax=relax)
            rows.append([v for _, _, v in _flatten(build_surrogate(tr, None, None, cfg).gradients(params))])
        arr = np.array(rows)
        keys = _flatten({n: np.zeros(params.shape(n)) for n in params.names()})
        entry = {"mean": arr.mean(0).tolist(), "variance": arr.var(0, ddof=1).tolist(),
                 "total_variance": float(arr.var(0, ddof=1).sum()),
                 "coords": [[n, idx] for n, idx, _ in keys]}
        if oracle is not None:
            bias = [float(m - oracle[(n, tuple(idx))]) for (n, idx, _), m in zip(keys, arr.mean(0))]
            entry["bias"] = bias
        table[label] = entry
    return {"samples": samples, "seed": seed, "estimators": table}


def _fit_baselines(scg, cfg, seed, pilot):
    from dataclasses import replace

    targets = [n for n in scg.stochastic_order
               if scg.spec(n).kind != "dirac" and cfg.for_node(n).family == "baseline_cv" and n not in cfg.nodes]
    if not targets:
        return cfg
    rng = CounterRng(seed + 1_000_003)
    returns = {n: [] for n in targets}
    for i in range(pilot):
        tr = ancestral_sample(scg, rng=rng, step=i, tape=False)
        for n in targets:
            returns[n].append(math.fsum(tr.cost_values[f] for f in reachable_costs(scg, n)))
    nodes = dict(cfg.nodes)
    for n in targets:
        nodes[n] = replace(cfg.for_node(n), baseline=float(np.mean(returns[n])))
    return EstimatorConfig(cfg.default, nodes)


def cmd_variance_bench(args, out):
    scg = load_model(args.model)
    specs = args.estimator or ["*=reinforce", "*=baseline_cv"]
    configs = {}
    for s in specs:
        configs[s] = _estimator_config(scg, [s])
    out.write(_dump(variance_bench(scg, configs, args.seed, args.samples), args.pretty) + "\n")
    return 0


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpq", description="Q-function based gradient estimation on stochastic computation graphs")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required):
        sp.add_argument("--model", required=True, help="model file, or the name of a bundled fixture")
        sp.add_argument("--pretty", action="store_true", help="indent JSON output")
        sp.add_argument("--seed", type=int, required=seed_required)

    sp = sub.add_parser("validate", help="check a model and print its structure")
    common(sp, False)
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("build-net", help="emit the Q-function network as JSON and DOT")
    common(sp, False)
    sp.add_argument("--reduce", choices=("shortest-path", "chain"))
    sp.add_argument("--scope-policy", choices=("identical", "union"), default="identical")
    sp.add_argument("--absorb", action="store_true", help="evaluate immediate costs directly")
    sp.add_argument("--no-merge", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_build_net)

    sp = sub.add_parser("train", help="run the training loop, printing metrics as JSON lines")
    common(sp, True)
    sp.add_argument("--iters", type=int, default=1000)
    sp.add_argument("--estimator", action="append", metavar="SPEC")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--replay", type=int, default=0, metavar="N", help="replay buffer capacity (0 disables)")
    sp.add_argument("--replay-m", type=int, default=4)
    sp.add_argument("--alpha-q", default="default")
    sp.add_argument("--alpha-theta", type=float, default=0.1)
    sp.add_argument("--target-alpha", type=float)
    sp.add_argument("--warmup", type=int, default=0)
    sp.add_argument("--q-kind", choices=("tabular", "linear", "mlp"), default="tabular")
    sp.add_argument("--reduce", choices=("shortest-path", "chain"))
    sp.add_argument("--log-every", type=int, default=100)
    sp.add_argument("--exact-every", type=int, default=0)
    sp.add_argument("--out", "--checkpoint", dest="out", help="checkpoint file")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("grad-check", help="compare estimator means with the exact gradient")
    common(sp, True)
    sp.add_argument("--estimator", action="append", metavar="SPEC")
    sp.add_argument("--samples", type=int, default=10000)
    sp.set_defaults(fn=cmd_grad_check)

    sp = sub.add_parser("variance-bench", help="per-estimator variance and bias over shared seeds")
    common(sp, True)
    sp.add_argument("--estimator", action="append", metavar="SPEC",
                    help="one configuration per flag, e.g. '*=baseline_cv' or 'X=reinforce'")
    sp.add_argument("--samples", type=int, default=10000)
    sp.set_defaults(fn=cmd_variance_bench)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args, out)
    except BpqError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
