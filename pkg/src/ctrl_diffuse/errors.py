"""Exception types shared across the package.

The CLI maps these onto its exit codes: :class:`ConfigError` -> 2 and
:class:`DivergenceError` -> 3.
"""


class CtrlDiffuseError(Exception):
    """Base class for all package errors."""


class DomainError(CtrlDiffuseError, ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class ConfigError(CtrlDiffuseError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(CtrlDiffuseError, ArithmeticError):
    """A linear-algebra step failed (singular or rank-deficient system)."""


class UnsupportedModeError(CtrlDiffuseError, ValueError):
    """The requested operation is not defined for this mode (e.g. eta = 0)."""


class DivergenceError(CtrlDiffuseError, ArithmeticError):
    """A rollout produced non-finite or exploding states."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
