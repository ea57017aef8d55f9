"""Exception types shared across the package."""


class QSchedError(Exception):
    """Base class for all package errors."""


class ConfigError(QSchedError, ValueError):
    """Invalid configuration or parameter value."""


class ContractViolation(QSchedError, RuntimeError):
    """A caller broke an operation's precondition, or a dynamics invariant failed."""


class SourceExhausted(QSchedError, LookupError):
    """A scripted source ran out of values and was not set to repeat."""


class InfeasibleTarget(QSchedError, ValueError):
    """Requested traffic slackness cannot be reached."""
