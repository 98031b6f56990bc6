"""Exception types shared across the package.

The CLI maps these onto exit codes: ContractViolation -> 1, I/O errors -> 2,
ConfigError -> 3.
"""


class ContractViolation(Exception):
    """A documented precondition, postcondition, or invariant was broken."""


class MissingRecordError(ContractViolation):
    """An attention record expected in the store is absent."""


class ConfigError(Exception):
    """A run configuration could not be parsed or validated."""
