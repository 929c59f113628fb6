class ContractError(ValueError):
    """Arguments violate a shape or dimension contract."""


class InputError(ValueError):
    """Numerically invalid input (non-finite values and the like)."""


class PolicyFormatError(ValueError):
    """A serialised policy could not be parsed."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class IntegrationError(RuntimeError):
    """The simulated state became non-finite."""

    def __init__(self, step, message="non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ConfigError(ValueError):
    """Run configuration is missing, malformed or out of range."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class InfeasibleDesignError(RuntimeError):
    """The outer design problem has no feasible point within the search."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
