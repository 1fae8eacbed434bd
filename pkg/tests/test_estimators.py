import math

import numpy as np
import pytest

from bpq import autodiff as ad
from bpq.errors import ConfigError, DegenerateVariance, NoAnalyticMean, NotReparameterizable, TemperatureNonPositive
from bpq.estimators import (
    EstimatorConfig,
    ExactQ,
    NodeEstimator,
    baseline_cv,
    build_surrogate,
    cv_reparam,
    cv_reparam_relaxed,
    fit_scale_baseline,
    parse_override,
    ppo_clip_objective,
    ppo_surrogate,
    q_control_variate,
    quadratic_cv,
    reinforce,
    relaxed_reparam,
    reparam,
    soften,
    taylor_cv,
)
from bpq.graph import ParamStore, ScgModel, validate_model
from bpq.network import build_network
from bpq.oracle import enumerate_traces, exact_grad
from bpq.qlearning import make_approximators
from bpq.rng import CounterRng
from bpq.sampling import ancestral_sample
from bpq.trainer import sgd_step


def _coin(theta=0.3, cost="X"):
    m = ScgModel(params=ParamStore({"theta": theta}, {"theta": "probability"}))
    m.add_stochastic("X", "bernoulli", p="theta")
    m.add_cost("f", cost, parents=["X"])
    return validate_model(m)


def _gauss(mu=0.7, s=1.3, cost="X * X"):
    m = ScgModel(params=ParamStore({"mu": mu, "s": s}))
    m.add_stochastic("X", "gaussian", mean="mu", scale="s")
    m.add_cost("f", cost, parents=["X"])
    return validate_model(m)


def _grad(obj, scg, name):
    return float(obj.gradients(scg.params)[name])


def _enumerated(scg, make):
    """Σ_x p(x) · gradient of the surrogate built on the trace forced to x."""
    total = 0.0
    for a, p in enumerate_traces(scg):
        tr = ancestral_sample(scg, assignment=a)
        total += p * _grad(make(tr), scg, "theta")
    return total


def _mc(scg, make, n, name, seed=0, **sample_kw):
    rng = CounterRng(seed)
    gs = np.empty(n)
    for i in range(n):
        tr = ancestral_sample(scg, rng=rng, step=i, **sample_kw)
        gs[i] = _grad(make(tr), scg, name)
    return gs.mean(), gs.std(ddof=1) / math.sqrt(n), gs


def _x(tr):
    return float(tr.values["X"])


class TestReinforce:
    def test_exact_mean_is_one(self):
        scg = _coin()
        assert _enumerated(scg, lambda tr: reinforce(tr, "X", _x(tr))) == pytest.approx(1.0, abs=1e-12)

    def test_zero_signal(self):
        scg = _coin()
        tr = ancestral_sample(scg, rng=CounterRng(0))
        assert _grad(reinforce(tr, "X", 0.0), scg, "theta") == 0.0

    def test_three_node_graph_matches_oracle(self, chain):
        ex = ExactQ(chain)
        want = exact_grad(chain)
        total = {n: np.zeros(chain.params.shape(n)) for n in chain.params.names()}
        cfg = EstimatorConfig(NodeEstimator("reinforce", "exact_q"))
        for a, p in ex.enum:
            tr = ancestral_sample(chain, assignment=a)
            for n, g in build_surrogate(tr, {}, None, cfg, ex).gradients(chain.params).items():
                total[n] += p * g
        for n in want:
            np.testing.assert_allclose(total[n], want[n], atol=1e-10)


class TestBaseline:
    def test_mean_baseline_keeps_expectation(self):
        scg = _coin()
        got = _enumerated(scg, lambda tr: baseline_cv(tr, "X", _x(tr), 0.3))
        assert got == pytest.approx(1.0, abs=1e-10)

    def test_zero_baseline_is_reinforce(self):
        scg = _coin()
        tr = ancestral_sample(scg, rng=CounterRng(1))
        a = _grad(baseline_cv(tr, "X", 1.7, 0.0), scg, "theta")
        b = _grad(reinforce(tr, "X", 1.7), scg, "theta")
        assert a == b

    def test_exact_variance_drops(self):
        scg = _coin()

        def second_moment(c):
            return sum(p * _grad(baseline_cv(ancestral_sample(scg, assignment=a), "X", a["X"], c), scg, "theta") ** 2
                       for a, p in enumerate_traces(scg))

        assert second_moment(0.3) - 1.0 < second_moment(0.0) - 1.0

    def test_callable_baseline(self):
        scg = _coin()
        tr = ancestral_sample(scg, rng=CounterRng(2))
        a = baseline_cv(tr, "X", 2.0, lambda t: 0.5)
        assert _grad(a, scg, "theta") == _grad(baseline_cv(tr, "X", 2.0, 0.5), scg, "theta")


class TestTaylor:
    def test_linear_cost_has_no_score_term(self):
        scg = _gauss(cost="3 * X + 1")
        rng = CounterRng(0)
        for i in range(5):
            tr = ancestral_sample(scg, rng=rng, step=i)
            obj = taylor_cv(tr, "X", lambda z: ad.add(ad.mul(3.0, z), 1.0))
            assert abs(ad.value_of(obj.components["score"])) < 1e-12
            assert _grad(obj, scg, "mu") == pytest.approx(3.0)

    def test_bernoulli_identity_is_zero_variance(self):
        scg = _coin()
        for a, _ in enumerate_traces(scg):
            tr = ancestral_sample(scg, assignment=a)
            assert _grad(taylor_cv(tr, "X", lambda z: z), scg, "theta") == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_square_cost(self):
        scg = _gauss()
        mean, se, _ = _mc(scg, lambda tr: taylor_cv(tr, "X", lambda z: ad.mul(z, z)), 20_000, "mu")
        assert abs(mean - 2 * 0.7) < 3 * se

    def test_categorical_uses_probability_vector(self):
        m = ScgModel(params=ParamStore({"w": [0.2, -0.4, 0.1]}))
        m.add_stochastic("X", "categorical", k=3, logits="w")
        m.add_cost("f", "index([1.0, 4.0, -2.0], X)", parents=["X"])
        scg = validate_model(m)
        vals = [1.0, 4.0, -2.0]
        total = np.zeros(3)
        for a, p in enumerate_traces(scg):
            tr = ancestral_sample(scg, assignment=a)
            f = lambda z: ad.total(ad.mul(v, zi) for v, zi in zip(vals, z)) if isinstance(z, list) else vals[int(z)]
            total += p * taylor_cv(tr, "X", f).gradients(scg.params)["w"]
        np.testing.assert_allclose(total, exact_grad(scg)["w"], atol=1e-12)

    def test_dirac_has_no_mean(self):
        m = ScgModel(params=ParamStore({"p": 0.5}))
        m.add_stochastic("A", "bernoulli", p="p")
        m.add_stochastic("Z", "dirac", parents=["A"])
        m.add_cost("f", "index(Z, 0)", parents=["Z"])
        scg = validate_model(m)
        with pytest.raises(NoAnalyticMean):
            NodeEstimator("taylor_cv").check(scg, "Z")


class TestReparam:
    def test_linear_cost_unit_gradient(self):
        scg = _gauss(s=1.0, cost="X")
        rng = CounterRng(0)
        for i in range(10):
            tr = ancestral_sample(scg, rng=rng, step=i, reparam={"X"})
            assert _grad(reparam(tr, "X", lambda z: z), scg, "mu") == 1.0

    def test_square_cost_monte_carlo(self):
        scg = _gauss()
        mean, se, _ = _mc(scg, lambda tr: reparam(tr, "X", lambda z: ad.mul(z, z)), 100_000, "mu", reparam={"X"})
        assert abs(mean - 2 * 0.7) < 3 * se

    def test_bernoulli_rejected(self):
        scg = _coin()
        tr = ancestral_sample(scg, rng=CounterRng(0))
        with pytest.raises(NotReparameterizable):
            reparam(tr, "X", lambda z: z)
        with pytest.raises(NotReparameterizable):
            NodeEstimator("reparam").check(scg, "X")


class TestRelaxed:
    def test_hard_threshold_limits(self):
        hi = [soften(0.5, t) for t in (1.0, 0.1, 0.01)]
        lo = [soften(-0.5, t) for t in (1.0, 0.1, 0.01)]
        assert hi == sorted(hi) and lo == sorted(lo, reverse=True)
        assert soften(0.5, 1e-4) == pytest.approx(1.0)
        assert soften(-0.5, 1e-4) == pytest.approx(0.0)

    def test_low_temperature_gradient(self):
        scg = _coin()
        mean, _, _ = _mc(scg, lambda tr: relaxed_reparam(tr, "X", 0.1, lambda b: b), 20_000, "theta",
                         relax={"X": 0.1})
        assert abs(mean - 1.0) < 0.05

    def test_bias_shrinks_with_temperature(self):
        scg = _coin()
        errs, ses = [], []
        for t in (1.0, 0.5, 0.1):
            mean, se, _ = _mc(scg, lambda tr, t=t: relaxed_reparam(tr, "X", t, lambda b: b), 20_000, "theta",
                              relax={"X": t})
            errs.append(abs(mean - 1.0))
            ses.append(se)
        for i in range(2):
            assert errs[i + 1] <= errs[i] + 3 * math.hypot(ses[i], ses[i + 1])

    def test_non_positive_temperature(self):
        with pytest.raises(TemperatureNonPositive):
            NodeEstimator("relaxed_reparam", temperature=0.0).check()
        scg = _coin()
        tr = ancestral_sample(scg, rng=CounterRng(0), relax={"X": 0.5})
        with pytest.raises(TemperatureNonPositive):
            relaxed_reparam(tr, "X", -1.0, lambda b: b)

    def test_hard_value_keeps_its_law(self):
        scg = _coin(0.3)
        rng = CounterRng(4)
        xs = [ancestral_sample(scg, rng=rng, step=i, relax={"X": 0.5}, tape=False).values["X"] for i in range(20_000)]
        assert abs(np.mean(xs) - 0.3) < 4 * math.sqrt(0.21 / 20_000)


class TestCvReparam:
    def test_zero_cv_is_reinforce(self):
        scg = _gauss()
        tr = ancestral_sample(scg, rng=CounterRng(0), reparam={"X"})
        a = cv_reparam(tr, "X", 2.5, quadratic_cv((0, 0, 0))).gradients(scg.params)
        b = reinforce(tr, "X", 2.5).gradients(scg.params)
        for n in a:
            assert a[n] == pytest.approx(b[n], abs=1e-15)

    def test_perfect_cv_is_reparam(self):
        scg = _gauss()
        tr = ancestral_sample(scg, rng=CounterRng(0), reparam={"X"})
        f = lambda z: ad.mul(z, z)
        a = cv_reparam(tr, "X", tr.cost_values["f"], f).gradients(scg.params)
        b = reparam(tr, "X", f).gradients(scg.params)
        for n in a:
            assert a[n] == pytest.approx(b[n], abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_quadratic_unbiased(self, seed):
        scg = _gauss()
        cv = np.random.default_rng(seed).normal(size=3)
        c = quadratic_cv(cv)
        mean, se, _ = _mc(scg, lambda tr: cv_reparam(tr, "X", tr.cost_values["f"], c), 20_000, "mu",
                          seed=seed, reparam={"X"})
        assert abs(mean - 1.4) < 3 * se


class TestCvReparamRelaxed:
    def test_zero_cv_is_reinforce(self):
        scg = _coin(0.4)
        tr = ancestral_sample(scg, rng=CounterRng(0), relax={"X": 0.5})
        a = _grad(cv_reparam_relaxed(tr, "X", _x(tr), quadratic_cv((0, 0, 0), 0.5), 0.5), scg, "theta")
        assert a == pytest.approx(_grad(reinforce(tr, "X", _x(tr)), scg, "theta"), abs=1e-15)

    def test_unbiased_and_lower_variance(self):
        scg = _coin(0.4)
        c = quadratic_cv((0.0, 1.0, 0.0), 0.5)
        n = 20_000
        mean, se, g = _mc(scg, lambda tr: cv_reparam_relaxed(tr, "X", _x(tr), c, 0.5), n, "theta",
                          relax={"X": 0.5})
        assert abs(mean - 1.0) < 3 * se
        _, _, g0 = _mc(scg, lambda tr: reinforce(tr, "X", _x(tr)), n, "theta", relax={"X": 0.5})
        assert g.var() < g0.var()


class TestQControlVariate:
    def test_zero_scale_is_baseline(self):
        scg = _gauss()
        tr = ancestral_sample(scg, rng=CounterRng(0), reparam={"X"})
        q = lambda z: ad.mul(z, z)
        a = q_control_variate(tr, "X", 3.0, q, a=0.0, b=0.8).gradients(scg.params)
        b = baseline_cv(tr, "X", 3.0, 0.8).gradients(scg.params)
        for n in a:
            assert a[n] == pytest.approx(b[n], abs=1e-15)

    def test_exact_q_removes_score_term(self):
        scg = _gauss()
        q = lambda z: ad.mul(z, z)
        rng = CounterRng(0)
        for i in range(5):
            tr = ancestral_sample(scg, rng=rng, step=i, reparam={"X"})
            obj = q_control_variate(tr, "X", tr.cost_values["f"], q)
            assert ad.value_of(obj.components["score"]) == pytest.approx(0.0, abs=1e-12)

    def test_discrete_needs_temperature(self):
        scg = _coin()
        tr = ancestral_sample(scg, rng=CounterRng(0))
        with pytest.raises(NotReparameterizable):
            q_control_variate(tr, "X", 1.0, lambda z: z)

    def test_optimal_scale_for_perfect_cv(self):
        gen = np.random.default_rng(0)
        r = gen.normal(size=500)
        a, b = fit_scale_baseline(list(zip(r, r)))
        assert a == pytest.approx(1.0) and b == pytest.approx(0.0, abs=1e-12)


class TestFitScaleBaseline:
    def test_affine_recovery(self):
        q = np.linspace(-1, 2, 30)
        a, b = fit_scale_baseline(2 * q + 3, q)
        assert a == pytest.approx(2.0) and b == pytest.approx(3.0)

    def test_orthogonal(self):
        q = np.array([1.0, -1.0, 1.0, -1.0])
        r = np.array([1.0, 1.0, -1.0, -1.0])
        a, _ = fit_scale_baseline(r, q)
        assert a == 0.0

    def test_constant_q(self):
        with pytest.raises(DegenerateVariance):
            fit_scale_baseline([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
        with pytest.raises(DegenerateVariance):
            fit_scale_baseline([(1.0, 2.0)])


class TestPpo:
    def test_examples(self):
        assert ppo_clip_objective(1.5, 2.0, 0.2) == pytest.approx(3.0)
        assert ppo_clip_objective(0.5, -1.0, 0.2) == pytest.approx(-0.5)
        for r in (0.8, 1.0, 1.2):
            assert ppo_clip_objective(r, 2.0, 0.2) == pytest.approx(r * 2.0)

    def test_clipped_branch_blocks_gradient(self):
        t = ad.Tape()
        r = t.param("r", None, 0.5)
        out = ppo_clip_objective(r, 2.0, 0.2)  # clipped branch 0.8·2 wins
        assert ad.value_of(out) == pytest.approx(1.6)
        assert ad.backward(t, out)["r"] == 0.0

    def test_surrogate_on_trace(self):
        scg = _coin(0.3)
        tr = ancestral_sample(scg, assignment={"X": 1})
        obj = ppo_surrogate(tr, "X", math.log(0.3), 2.0)
        # ratio 1 sits inside the clip range, so d/dθ (p/p_old)·Q = Q/p_old
        assert _grad(obj, scg, "theta") == pytest.approx(2.0 / 0.3)

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            ppo_clip_objective(1.0, 1.0, 1.5)
        with pytest.raises(ConfigError):
            ppo_clip_objective(0.0, 1.0, 0.2)


class TestBuildSurrogate:
    def test_single_node_is_reinforce(self):
        scg = _coin()
        tr = ancestral_sample(scg, rng=CounterRng(3))
        cfg = EstimatorConfig(NodeEstimator("reinforce", "actual_return"))
        a = build_surrogate(tr, {}, None, cfg)
        assert _grad(a, scg, "theta") == _grad(reinforce(tr, "X", tr.total_cost), scg, "theta")

    def test_tied_parameters_sum(self):
        m = ScgModel(params=ParamStore({"a": 0.3, "b": 0.3}), tied=[frozenset({"a", "b"})])
        m.add_stochastic("X", "bernoulli", logit="a")
        m.add_stochastic("Y", "bernoulli", logit="b")
        m.add_cost("f", "X + 2 * Y", parents=["X", "Y"])
        scg = validate_model(m)
        tr = ancestral_sample(scg, rng=CounterRng(0))
        cfg = EstimatorConfig(NodeEstimator("reinforce", "actual_return"))
        g = build_surrogate(tr, {}, None, cfg).gradients(scg.params)
        # both nodes reach the single cost, so each signal is the full return
        gx = reinforce(tr, "X", tr.total_cost).gradients(scg.params)["a"]
        gy = reinforce(tr, "Y", tr.total_cost).gradients(scg.params)["b"]
        assert g["a"] == pytest.approx(gx) and g["b"] == pytest.approx(gy)
        stepped = sgd_step(scg.params, g, 0.1, tied=[("a", "b")])
        assert stepped["a"] == stepped["b"] == pytest.approx(0.3 - 0.1 * (gx + gy))

    def test_direct_cost_params(self):
        m = ScgModel(params=ParamStore({"p": 0.4, "g": 1.5}, {"p": "probability"}))
        m.add_stochastic("X", "bernoulli", p="p")
        m.add_cost("f", "X + g * g", parents=["X"])
        scg = validate_model(m)
        tr = ancestral_sample(scg, rng=CounterRng(0))
        g = build_surrogate(tr, {}, None, EstimatorConfig(NodeEstimator("reinforce", "actual_return")))
        assert _grad(g, scg, "g") == pytest.approx(3.0)

    def test_learned_q_signal_reads_tables(self, chain):
        net = build_network(chain)
        qs = make_approximators(net)
        tr = ancestral_sample(chain, rng=CounterRng(0))
        g = build_surrogate(tr, qs, net).gradients(chain.params)
        # all-zero tables give zero score terms
        assert all(np.all(v == 0) for v in g.values())

    def test_stop_gradient_keeps_forward(self, two_cost):
        net = build_network(two_cost)
        qs = make_approximators(net)
        for q in qs.values():
            q.weights = np.random.default_rng(0).normal(size=q.weights.shape)
        tr = ancestral_sample(two_cost, rng=CounterRng(0))
        obj = build_surrogate(tr, qs, net)
        detached = ad.total(ad.stop_gradient(v) for v in obj.components.values())
        assert ad.value_of(detached) == pytest.approx(obj.forward(), abs=1e-12)
        for part in obj.per_node.values():
            score = part.components.get("score")
            if score is not None:
                assert ad.value_of(ad.stop_gradient(score)) == ad.value_of(score)


class TestConfig:
    def test_override_parsing(self):
        node, est = parse_override("X=q_control_variate:a=0.5,b=-1,t=0.3")
        assert node == "X" and est.family == "q_control_variate"
        assert (est.scale, est.baseline, est.temperature) == (0.5, -1.0, 0.3)
        node, est = parse_override("*=cv_reparam:cv=1/2/3")
        assert node == "*" and est.cv == (1.0, 2.0, 3.0)

    def test_bad_overrides(self):
        for text in ("X", "X=nope", "X=reinforce:zz=1", "X=reinforce:t"):
            with pytest.raises(ConfigError):
                parse_override(text)

    def test_round_trip(self):
        cfg = EstimatorConfig.from_dict({"default": "taylor_cv", "X": {"family": "baseline_cv", "c": 0.5}})
        again = EstimatorConfig.from_dict(cfg.to_dict())
        assert again.for_node("X") == cfg.for_node("X") and again.default == cfg.default

    def test_unknown_node(self, chain):
        with pytest.raises(ConfigError):
            EstimatorConfig(nodes={"nope": NodeEstimator()}).validate(chain)
