"""Gradient estimation on stochastic computation graphs with learned Q-functions.

Typical flow: parse or build a model, validate it, build the Q-function
network, create approximators, then train::

    scg = load_fixture("chain")
    net = build_network(scg)
    qs = make_approximators(net)
    result = train(scg, net, qs, TrainConfig(iterations=2000, seed=0))
"""
from .cli import load_fixture, parse_model_dict, parse_model_file
from .estimators import EstimatorConfig, NodeEstimator, SurrogateObjective, build_surrogate
from .graph import DistributionSpec, ParamStore, ScgModel, ValidatedScg, validate_model
from .network import BpqNetwork, build_network, frontier, merge_networks, reduce_to_tree, scope
from .oracle import enumerate_traces, exact_expected_cost, exact_grad, exact_q
from .qlearning import QApproximator, make_approximators
from .rng import CounterRng
from .sampling import Trace, ancestral_sample
from .trainer import TrainConfig, sgd_step, train

__all__ = [
    "BpqNetwork", "CounterRng", "DistributionSpec", "EstimatorConfig", "NodeEstimator", "ParamStore",
    "QApproximator", "ScgModel", "SurrogateObjective", "Trace", "TrainConfig", "ValidatedScg",
    "ancestral_sample", "build_network", "build_surrogate", "enumerate_traces", "exact_expected_cost",
    "exact_grad", "exact_q", "frontier", "load_fixture", "make_approximators", "merge_networks",
    "parse_model_dict", "parse_model_file", "reduce_to_tree", "scope", "sgd_step", "train",
    "validate_model",
]
