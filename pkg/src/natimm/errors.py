"""Exception hierarchy. Each family maps onto one CLI exit code."""


class NatimmError(Exception):
    exit_code = 1


class ConfigError(NatimmError):
    exit_code = 1


class DataError(NatimmError):
    exit_code = 2


class IngestionError(DataError):
    """A JSONL record failed validation."""

    def __init__(self, line: int, field: str, reason: str):
        self.line = line
        self.field = field
        self.reason = reason
        super().__init__(f"line {line}: field {field!r}: {reason}")


class FormatError(DataError):
    """Checkpoint bytes are malformed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class StructuralError(DataError):
    pass


class NumericError(NatimmError):
    exit_code = 3


class CapacityError(NatimmError):
    exit_code = 4


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass
