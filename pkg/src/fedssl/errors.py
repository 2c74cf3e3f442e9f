"""Exception hierarchy shared across the package."""


class FedSSLError(Exception):
    """Base class for all package errors."""

    category = "error"


class DimensionError(FedSSLError, ValueError):
    category = "dimension"


class DomainError(FedSSLError, ValueError):
    category = "domain"


class NonFiniteError(FedSSLError, FloatingPointError):
    category = "non-finite"


class ContractError(FedSSLError, RuntimeError):
    category = "contract"


class DegenerateBatchError(FedSSLError, ValueError):
    category = "degenerate-batch"


class SpecError(FedSSLError, ValueError):
    category = "spec"


class PartitionError(FedSSLError, RuntimeError):
    category = "partition"


class IntegrityError(FedSSLError, ValueError):
    category = "integrity"


class AggregationError(FedSSLError, ValueError):
    category = "aggregation"


class RoundError(FedSSLError, RuntimeError):
    category = "round"


class MetricError(FedSSLError, ValueError):
    category = "metric"


class ConfigError(FedSSLError, ValueError):
    category = "config"
