"""Exception hierarchy shared by every bpq module."""


class BpqError(Exception):
    """Base class for all library errors."""


# graph core
class CycleDetected(BpqError):
    def __init__(self, node, cycle=None):
        self.node = node
        self.cycle = list(cycle or [])
        path = " -> ".join(self.cycle) if self.cycle else node
        super().__init__(f"cycle through node {node!r}: {path}")


class DanglingReference(BpqError):
    pass


class InvalidDistributionParams(BpqError):
    pass


class NumericalError(BpqError):
    pass


class OutOfSupport(BpqError):
    pass


class NotReparameterizable(BpqError):
    pass


class UnknownNode(BpqError):
    pass


class UnknownCost(BpqError):
    pass


class CostUnreachable(BpqError):
    pass


# q-learning
class ScopeMismatch(BpqError):
    pass


class EmptyTargets(BpqError):
    pass


class NonFiniteTarget(BpqError):
    pass


class EmptyBuffer(BpqError):
    pass


class LayoutMismatch(BpqError):
    pass


# estimators
class NoAnalyticMean(BpqError):
    pass


class TemperatureNonPositive(BpqError):
    pass


class DegenerateVariance(BpqError):
    pass


# trainer
class NonFiniteGradient(BpqError):
    pass


class ConfigError(BpqError):
    pass


# oracle
class ContinuousNodePresent(BpqError):
    pass


class EnumerationTooLarge(BpqError):
    pass


class ZeroProbabilityCondition(BpqError):
    pass


# model files
class ParseError(BpqError):
    pass


class SchemaError(BpqError):
    pass
