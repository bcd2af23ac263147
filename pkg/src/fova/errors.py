class ConfigurationError(ValueError):
    """Invalid sizes, ranges or configuration values."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""
