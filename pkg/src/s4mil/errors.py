"""Exception types shared across the package.

Every error that can surface at the CLI boundary carries a short machine
readable ``code`` so failures can be reported as a single parseable line.
"""


class S4MilError(Exception):
    """Base class for all package errors."""

    code = "error"


class ContractError(S4MilError):
    """A caller violated an operation precondition (shape, range, emptiness)."""

    code = "contract-violation"


class EmptyBagError(ContractError):
    """A bag with zero tokens was passed where at least one is required."""

    code = "empty-bag"


class NumericalError(S4MilError):
    """A computation produced or would produce non-finite values."""

    code = "numerical-error"


class ParseError(S4MilError):
    """A file did not conform to its documented binary or text format.

    ``offset`` is the byte offset at which the problem was detected, when
    meaningful.
    """

    code = "parse-error"

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedMetricError(S4MilError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""

    code = "undefined-metric"


class ConfigError(S4MilError):
    """Bad run configuration: unknown key, unparseable value, missing input."""

    code = "config-error"
