"""Exception hierarchy shared by every module.

The CLI maps each family onto an exit code: validation errors exit 2,
numeric divergence exits 3, I/O and parse problems exit 4.
"""


class ProOodError(Exception):
    exit_code = 1
    kind = "error"


class ValidationError(ProOodError, ValueError):
    """Bad parameter or schema; ``field`` names the offending input when known."""

    exit_code = 2
    kind = "validation"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DimensionError(ValidationError):
    kind = "dimension"


class ContractError(ValidationError):
    kind = "contract"


class DomainError(ValidationError):
    kind = "domain"


class SchemaError(ValidationError):
    kind = "schema"


class NumericError(ProOodError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 3
    kind = "numeric"


class DivergenceError(NumericError):
    kind = "divergence"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DataIOError(ProOodError, OSError):
    exit_code = 4
    kind = "io"


class ParseError(DataIOError):
    kind = "parse"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
