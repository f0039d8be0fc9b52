"""Exception types shared across the package.

Two failure families are distinguished so the command line tool can map
them to exit codes: bad inputs (exit 1) and numerical breakdowns
discovered mid-computation (exit 2).
"""


class VolecgiError(Exception):
    """Base class for all package errors."""


class UserInputError(VolecgiError):
    """Invalid user-supplied data: files, configuration, shapes, ranges."""


class NumericalError(VolecgiError):
    """A computation failed: singular system, no convergence, unstable filter."""
