"""Exception hierarchy.

The CLI maps these onto exit codes: input problems exit with 2, contract
violations with 3 and broken internal invariants with 4.
"""


class MixnutsError(Exception):
    exit_code = 4


class InvalidInputError(MixnutsError, ValueError):
    exit_code = 2


class DegenerateInputError(InvalidInputError):
    """Input is well-formed but numerically degenerate (e.g. constant logits)."""


class DimensionMismatchError(InvalidInputError):
    pass


class FormatError(InvalidInputError):
    """Malformed file. ``code`` distinguishes the failure kind."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionMismatchError(FormatError):
    code = "version"


class TruncatedFileError(FormatError):
    code = "truncated"


class DuplicateIdError(FormatError):
    code = "duplicate-id"


class ContractError(MixnutsError):
    exit_code = 3


class NotDifferentiableError(ContractError):
    pass


class CacheMismatchError(ContractError):
    pass


class InvariantError(MixnutsError):
    exit_code = 4


class IdMismatchError(InvalidInputError):
    """Two inputs that must cover the same example ids do not."""
