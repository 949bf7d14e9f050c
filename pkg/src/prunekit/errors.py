"""Exception types shared across the package."""


class PrunekitError(Exception):
    """Base class for all prunekit errors."""


class ContractViolation(PrunekitError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class NumericalFailure(PrunekitError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""

    def __init__(self, message, report=None):
        super().__init__(message)
        # partial RunReport (dict) when raised from a training run
        self.report = report


class ConfigError(PrunekitError, ValueError):
    """An experiment configuration could not be parsed or validated."""
