"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: parse failures exit 1,
configuration violations exit 2, infeasible schedules and depth/size
limits exit 3.
"""


class TreeHarmonicsError(Exception):
    """Base class for all package errors."""


class ParseError(TreeHarmonicsError):
    """A file or literal could not be parsed."""


class ConfigError(TreeHarmonicsError):
    """A tree configuration violates a structural invariant."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        if where is not None:
            message = f"{message} (at {where})"
        super().__init__(message)


class AddressError(TreeHarmonicsError):
    """A vertex path is not valid for the tree it is used with."""


class DepthCapError(TreeHarmonicsError):
    """An operation would exceed the configured depth cap."""


class EnumerationLimitError(DepthCapError):
    """A level enumeration would materialize more vertices than allowed."""


class ModeMismatchError(TreeHarmonicsError):
    """Exact and float values were mixed in one computation."""


class ScheduleError(TreeHarmonicsError):
    """A schedule is malformed or incompatible with its tree."""


class InfeasibleScheduleError(ScheduleError):
    """A schedule cannot satisfy its transition budgets."""
