"""Exception hierarchy.

Two families matter to callers: :class:`ConfigError` (bad arguments, bad
domains) and :class:`EstimationError` (the data cannot support the requested
statistic). The CLI maps them to exit codes 2 and 3.
"""


class DonutRDError(Exception):
    """Base class for all package errors."""

    name = "error"


class ConfigError(DonutRDError, ValueError):
    name = "config-error"


class InvalidInputError(ConfigError):
    name = "invalid-input"


class DomainError(ConfigError):
    name = "domain-error"


class EmptyRangeError(ConfigError):
    name = "empty-range"


class DegenerateKernelRangeError(ConfigError):
    name = "degenerate-kernel-range"


class SchemaError(ConfigError):
    name = "schema-error"


class EstimationError(DonutRDError):
    name = "estimation-error"


class InsufficientDataError(EstimationError):
    name = "insufficient-data"


class InsufficientSupportError(EstimationError):
    name = "insufficient-support"

    def __init__(self, message, side=None):
        super().__init__(message)
        self.side = side


class InsufficientInnerSupportError(InsufficientSupportError):
    name = "insufficient-inner-support"


class InsufficientNeighborsError(EstimationError):
    name = "insufficient-neighbors"


class NoFeasibleBandwidthError(EstimationError):
    name = "no-feasible-bandwidth"


class DegenerateVarianceError(EstimationError):
    name = "degenerate-variance"


class DegenerateTestError(EstimationError):
    name = "degenerate-test"
