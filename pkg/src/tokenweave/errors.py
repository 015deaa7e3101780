"""Exception taxonomy shared by all modules.

The CLI maps these onto its exit codes: ValidationError -> 3,
GuardError -> 4, InvariantError -> 5.
"""


class ValidationError(ValueError):
    """Bad input data, configuration, or arguments."""


class GuardError(RuntimeError):
    """A resource guard refused the request (table too large, missing file)."""


class InvariantError(RuntimeError):
    """An internal invariant was breached; indicates a bug, not bad input."""
