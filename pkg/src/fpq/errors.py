"""Exception types shared across the package."""


class QuantDomainError(ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class ContractError(ValueError):
    """Arguments violate a structural precondition (shapes, arities, kinds)."""


class MetricUnavailableError(RuntimeError):
    """The requested reconstruction metric cannot be computed for this layer."""
