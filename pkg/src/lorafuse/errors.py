"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can print
one parseable line per failure.
"""


class LorafuseError(Exception):
    code = "ERROR"


class ShapeError(LorafuseError, ValueError):
    """Operand shapes do not conform."""

    code = "SHAPE"


class ContractError(LorafuseError, ValueError):
    """An argument violates a documented precondition."""

    code = "CONTRACT"


class ConfigError(LorafuseError, ValueError):
    """Components are wired together with incompatible configurations."""

    code = "CONFIG"


class RankMismatchError(LorafuseError, ValueError):
    """Adapter rank differs from the registry's uniform rank."""

    code = "RANK"


class DuplicateAdapterError(LorafuseError, ValueError):
    """Adapter id already registered."""

    code = "DUPLICATE"


class UnknownAdapterError(LorafuseError, KeyError):
    """Adapter id or layer name not found."""

    code = "LOOKUP"


class RoutingError(LorafuseError, ValueError):
    """A selected task label has no registered adapter."""

    code = "ROUTING"


class DataError(LorafuseError, ValueError):
    """Corpus or training data violates a requirement."""

    code = "DATA"


class DivergenceError(LorafuseError, ArithmeticError):
    """Training produced a non-finite loss."""

    code = "DIVERGE"

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ParseError(LorafuseError, ValueError):
    """A persisted file is malformed."""

    code = "PARSE"

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class MeasurementError(LorafuseError, RuntimeError):
    """The benchmark workload is too small for the timer resolution."""

    code = "MEASURE"
