"""Exception hierarchy.

Each error class carries the CLI exit code it maps to: 1 for usage/config
problems, 2 for bad input data, 3 for violated internal invariants.
"""


class AffMapError(Exception):
    exit_code = 2


class ConfigError(AffMapError):
    exit_code = 1


class DataError(AffMapError):
    exit_code = 2


class InvariantViolation(AffMapError):
    exit_code = 3


class DomainError(DataError, ValueError):
    """Input outside the domain of an operation (empty field, bad shape, ...)."""


class ShapeMismatch(DomainError):
    pass


# geometry
class BehindCamera(DataError):
    pass


class NonPositiveDepth(DataError):
    pass


class EmptySparseSet(DataError):
    pass


class ZeroMedian(DataError):
    pass


class InvalidDepth(DataError):
    pass


# interaction
class NoIntersection(DataError):
    pass


class MissingObject(DataError):
    pass


class MissingHand(DataError):
    pass


# multilabel
class InvalidK(DomainError):
    pass


class ModeMismatch(DomainError):
    pass


# metrics
class AllZeroMap(DomainError):
    pass


# mapping / planner
class EmptyCloud(DataError):
    pass


class AffordanceNotFound(DataError):
    pass


class NoPath(DataError):
    pass


class BlockedEndpoint(DataError):
    pass


# synth
class InvalidSpec(ConfigError):
    pass
