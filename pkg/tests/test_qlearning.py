import numpy as np
import pytest

from bpq.errors import ConfigError, EmptyTargets, NonFiniteTarget, ScopeMismatch
from bpq.graph import ParamStore, ScgModel, validate_model
from bpq.network import build_network
from bpq.oracle import enumerate_traces, exact_q
from bpq.qlearning import (
    QApproximator,
    TargetNetworkState,
    advantage,
    combine_upstream,
    lambda_return_propagate,
    make_approximators,
    q_eval,
    sample_update,
    slow_track_update,
    td_sweep,
)
from bpq.rng import CounterRng
from bpq.sampling import ancestral_sample
from conftest import fill_exact


def _coins(spec, cost, params=None):
    m = ScgModel(params=ParamStore(params or {"w": 0.3}))
    for n, ps in spec.items():
        m.add_stochastic(n, "bernoulli", parents=ps, logit=" + ".join(["w"] + [f"0.6 * {p}" for p in ps]))
    for f, (expr, ps) in cost.items():
        m.add_cost(f, expr, parents=ps)
    return validate_model(m)


def _randomize(qs, seed=0):
    gen = np.random.default_rng(seed)
    for q in qs.values():
        q.weights = gen.normal(size=q.weights.shape)
    return qs


def _node(net, owner):
    (n,) = net.nodes_of(owner)
    return n.id


class TestQEval:
    def test_zero_init(self, chain):
        net = build_network(chain)
        for node in net.learned_nodes():
            q = make_approximators(net)[node.id]
            assert q_eval(q, {m: 1 for m in q.scope}) == 0.0

    def test_linear_picks_feature(self):
        scg = _coins({"X": [], "Y": ["X"]}, {"f": ("X + Y", ["X", "Y"])})
        q = QApproximator.create("q", "Y", ("X", "Y"), "linear", scg)
        # features: bias, onehot(X), onehot(Y)
        for i in range(5):
            q.weights = np.eye(5)[i]
            feats = q.features({"X": 1, "Y": 0})
            assert q_eval(q, {"X": 1, "Y": 0}) == feats[i]

    def test_missing_member(self):
        scg = _coins({"X": [], "Y": ["X"]}, {"f": ("X + Y", ["X", "Y"])})
        for kind in ("tabular", "linear", "mlp"):
            q = QApproximator.create("q", "Y", ("X", "Y"), kind, scg)
            with pytest.raises(ScopeMismatch):
                q_eval(q, {"Y": 1})

    def test_tabular_needs_discrete_scope(self, gaussian_chain):
        x = gaussian_chain.stochastic_order[0]
        with pytest.raises(ConfigError):
            QApproximator.create("q", x, (x,), "tabular", gaussian_chain)

    def test_mlp_init_seeded(self):
        scg = _coins({"X": []}, {"f": ("X", ["X"])})
        a = QApproximator.create("q", "X", ("X",), "mlp", scg, rng=CounterRng(4))
        b = QApproximator.create("q", "X", ("X",), "mlp", scg, rng=CounterRng(4))
        assert np.array_equal(a.weights, b.weights)
        assert np.all(np.abs(a.weights) <= 0.05)

    @pytest.mark.parametrize("kind", ["linear", "mlp"])
    def test_grad_w_matches_differences(self, kind):
        scg = _coins({"X": [], "Y": ["X"]}, {"f": ("X + Y", ["X", "Y"])})
        q = QApproximator.create("q", "Y", ("X", "Y"), kind, scg, hidden=(3,))
        q.weights = np.random.default_rng(1).normal(size=q.weights.shape)
        a = {"X": 1, "Y": 0}
        g = q.grad_w(a)
        for i in range(len(q.weights)):
            w = q.weights.copy()
            q.weights = w + np.eye(len(w))[i] * 1e-6
            up = q.value(a)
            q.weights = w - np.eye(len(w))[i] * 1e-6
            dn = q.value(a)
            q.weights = w
            assert g[i] == pytest.approx((up - dn) / 2e-6, abs=1e-6)

    def test_checkpoint_round_trip(self):
        scg = _coins({"X": []}, {"f": ("X", ["X"])})
        q = QApproximator.create("q", "X", ("X",), "tabular", scg)
        q.weights = np.array([1.5, -2.0])
        r = QApproximator.create("q", "X", ("X",), "tabular", scg)
        r.load_json(q.to_json())
        assert np.array_equal(r.weights, q.weights)
        bad = dict(q.to_json(), weights=[1.0])
        with pytest.raises(ConfigError):
            r.load_json(bad)


class TestCombine:
    def test_singleton(self):
        assert combine_upstream([("f1", 2.0)]) == 2.0

    def test_average_then_sum(self):
        assert combine_upstream([("f1", 1.0), ("f2", 3.0), ("f2", 5.0)]) == 5.0

    def test_idempotent_average(self):
        assert combine_upstream([("f1", 0.7), ("f1", 0.7)]) == 0.7

    def test_empty(self):
        with pytest.raises(EmptyTargets):
            combine_upstream([])


class TestSampleUpdate:
    def _q(self):
        scg = _coins({"X": []}, {"f": ("X", ["X"])})
        return QApproximator.create("q", "X", ("X",), "tabular", scg)

    def test_direct_formula(self):
        q = self._q()
        sample_update(q, 1.0, {"X": 1}, 0.5)
        assert q.weights.tolist() == [0.0, 0.5]

    def test_zero_error(self):
        q = self._q()
        q.weights = np.array([0.2, 0.4])
        sample_update(q, 0.4, {"X": 1}, 0.3)
        assert q.weights.tolist() == [0.2, 0.4]

    def test_geometric_contraction(self):
        q = self._q()
        for n in range(1, 30):
            sample_update(q, 2.0, {"X": 0}, 0.4)
            assert abs(q.weights[0] - 2.0) == pytest.approx(2.0 * 0.6**n)

    def test_visit_counts_average(self):
        q = self._q()
        for t in (1.0, 2.0, 6.0):
            sample_update(q, t, {"X": 0}, "visit")
        assert q.weights[0] == pytest.approx(3.0)

    def test_non_finite_target(self):
        with pytest.raises(NonFiniteTarget):
            sample_update(self._q(), float("nan"), {"X": 0}, 0.1)

    def test_linear_sgd_step(self):
        scg = _coins({"X": []}, {"f": ("X", ["X"])})
        q = QApproximator.create("q", "X", ("X",), "linear", scg)
        sample_update(q, 1.0, {"X": 1}, 0.5)
        assert q.weights.tolist() == [0.5, 0.0, 0.5]


class TestLambdaReturn:
    def test_chain_full_return(self):
        scg = _coins({"X1": [], "X2": ["X1"], "X3": ["X2"]}, {"f": ("1 + 2 * X3", ["X3"])})
        net = build_network(scg)
        qs = _randomize(make_approximators(net), 2)
        for s in range(10):
            tr = ancestral_sample(scg, rng=CounterRng(s))
            for gamma in (1.0, 0.8):
                d = lambda_return_propagate(net, qs, tr, lam=1.0, gamma=gamma)
                q1 = qs[_node(net, "X1")].value({"X1": tr.values["X1"]})
                assert d[_node(net, "X1")] == pytest.approx(gamma**3 * tr.cost_values["f"] - q1, abs=1e-12)

    def test_two_parent_one_step(self):
        m = ScgModel(params=ParamStore({"w": 0.2}))
        m.add_stochastic("X1", "bernoulli", logit="w")
        m.add_stochastic("Y1", "bernoulli", parents=["X1"], logit="w + X1")
        m.add_stochastic("Y2", "bernoulli", parents=["X1"], logit="w - X1")
        m.add_stochastic("Z", "dirac", parents=["Y1", "Y2"])
        m.add_cost("f", "index(Z, 0) + 3 * index(Z, 1)", parents=["Z"])
        scg = validate_model(m)
        net = build_network(scg)
        qs = _randomize(make_approximators(net), 3)
        for s in range(10):
            tr = ancestral_sample(scg, rng=CounterRng(s))
            v = tr.values
            for gamma in (1.0, 0.9):
                d = lambda_return_propagate(net, qs, tr, lam=0.0, gamma=gamma)
                qy = [qs[_node(net, y)].value({k: v[k] for k in net.nodes[_node(net, y)].scope}) for y in ("Y1", "Y2")]
                qx = qs[_node(net, "X1")].value({"X1": v["X1"]})
                assert d[_node(net, "X1")] == pytest.approx(gamma * sum(qy) / 2 - qx, abs=1e-12)

    def test_one_step_matches_td_sweep_errors(self, chain):
        net = build_network(chain)
        qs = _randomize(make_approximators(net), 5)
        tr = ancestral_sample(chain, rng=CounterRng(1))
        d = lambda_return_propagate(net, qs, tr, lam=0.0)
        frozen = {k: q.copy() for k, q in qs.items()}
        errs = td_sweep(net, {k: q.copy() for k, q in qs.items()}, tr, alpha=0.5, target_qs=frozen)
        for k in d:
            assert d[k] == pytest.approx(errs[k], abs=1e-12)


class TestSlowTracking:
    def test_direct_formula(self):
        st = TargetNetworkState({"w": np.array(0.0)}, {"w": np.array(1.0)})
        st = slow_track_update(st, {"w": 0.0}, 0.1)
        assert float(st.theta["w"]) == pytest.approx(0.1)
        assert float(st.delta["w"]) == pytest.approx(0.9)

    def test_fixed_point(self):
        st = TargetNetworkState.start({"w": [1.0, 2.0]})
        st2 = slow_track_update(st, {}, 0.2)
        assert np.array_equal(st2.theta["w"], st.theta["w"])
        assert np.array_equal(st2.delta["w"], st.delta["w"])

    def test_geometric_catch_up(self):
        st = TargetNetworkState({"w": np.array(0.0)}, {"w": np.array(1.0)})
        for n in range(1, 50):
            st = slow_track_update(st, {}, 0.1)
            assert float(st.theta["w"]) == pytest.approx(1 - 0.9**n)

    def test_rate_checked(self):
        with pytest.raises(ConfigError):
            slow_track_update(TargetNetworkState.start({"w": 0.0}), {}, 0.0)


class TestAdvantage:
    def test_single_parent(self):
        scg = _coins({"X": [], "Y": ["X"]}, {"f": ("2 * Y", ["Y"])})
        net = build_network(scg)
        qs = _randomize(make_approximators(net), 7)
        for s in range(6):
            tr = ancestral_sample(scg, rng=CounterRng(s))
            v = tr.values
            want = qs[_node(net, "Y")].value({"Y": v["Y"]}) - qs[_node(net, "X")].value({"X": v["X"]})
            assert advantage(net, qs, _node(net, "Y"), tr) == pytest.approx(want, abs=1e-12)

    def test_two_parents_average(self):
        scg = _coins({"X1": [], "X2": [], "Y": ["X1", "X2"]}, {"f": ("2 * Y", ["Y"])})
        net = build_network(scg)
        qs = _randomize(make_approximators(net), 8)
        tr = ancestral_sample(scg, rng=CounterRng(0))
        v = tr.values
        base = (qs[_node(net, "X1")].value({"X1": v["X1"]}) + qs[_node(net, "X2")].value({"X2": v["X2"]})) / 2
        want = qs[_node(net, "Y")].value({"Y": v["Y"]}) - base
        assert advantage(net, qs, _node(net, "Y"), tr) == pytest.approx(want, abs=1e-12)

    def test_sibling_sample_subtracted(self):
        # Q_X's target sums Q_Y1 (cost f1) and Q_Y2 (cost f2); A_Y1 removes the sampled Q_Y2
        scg = _coins({"X": [], "Y1": ["X"], "Y2": ["X"]}, {"f1": ("Y1", ["Y1"]), "f2": ("3 * Y2", ["Y2"])})
        net = build_network(scg)
        qs = _randomize(make_approximators(net), 9)
        tr = ancestral_sample(scg, rng=CounterRng(3))
        v = tr.values
        qx = qs[_node(net, "X")].value({"X": v["X"]})
        qy1 = qs[_node(net, "Y1")].value({"Y1": v["Y1"]})
        qy2 = qs[_node(net, "Y2")].value({"Y2": v["Y2"]})
        assert advantage(net, qs, _node(net, "Y1"), tr) == pytest.approx(qy1 - (qx - qy2), abs=1e-12)

    def test_exact_q_advantage_is_centred(self):
        scg = _coins({"X": [], "Y": ["X"]}, {"f": ("1 + 2 * Y + X", ["X", "Y"])})
        net = build_network(scg)
        qs = fill_exact(net, make_approximators(net), scg)
        enum = enumerate_traces(scg)
        yid = [n.id for n in net.nodes_of("Y") if n.learned][0]
        for x in (0, 1):
            num = den = 0.0
            for a, p in enum:
                if a["X"] != x:
                    continue
                tr = ancestral_sample(scg, assignment=a, tape=False)
                num += p * advantage(net, qs, yid, tr)
                den += p
            assert abs(num / den) < 1e-10

    def test_expectation_mode(self):
        scg = _coins({"X": [], "Y1": ["X"], "Y2": ["X"]}, {"f1": ("Y1", ["Y1"]), "f2": ("3 * Y2", ["Y2"])})
        net = build_network(scg)
        qs = fill_exact(net, make_approximators(net), scg)
        tr = ancestral_sample(scg, rng=CounterRng(3))
        a = advantage(net, qs, _node(net, "Y1"), tr, sibling="expectation")
        # with exact Q the expected sibling term cancels the parent's f2 share
        qx = qs[_node(net, "X")].value({"X": tr.values["X"]})
        qy1 = qs[_node(net, "Y1")].value({"Y1": tr.values["Y1"]})
        p2 = qs[_node(net, "Y2")]
        e2 = exact_q(scg, "X", {"X": tr.values["X"]}, "f2")
        assert a == pytest.approx(qy1 - (qx - e2), abs=1e-10)
        assert p2.value({"Y2": 1}) == pytest.approx(3.0)

    def test_bad_mode(self, chain):
        net = build_network(chain)
        qs = make_approximators(net)
        tr = ancestral_sample(chain, rng=CounterRng(0))
        with pytest.raises(ConfigError):
            advantage(net, qs, net.learned_nodes()[-1].id, tr, sibling="both")

