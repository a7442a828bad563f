"""Exception hierarchy shared by every module.

Exceptions are grouped into three families so the CLI can map them onto
stable exit codes: I/O problems (exit 2), format/config problems (exit 3)
and data/precondition problems (exit 4).
"""


class SvdaError(Exception):
    pass


# --- I/O family (exit 2) ---

class IoError(SvdaError):
    pass


# --- format / config family (exit 3) ---

class FormatViolation(SvdaError):
    pass


class ParseError(FormatViolation):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(FormatViolation):
    pass


class UnsupportedFormat(FormatViolation):
    pass


class FormatError(FormatViolation):
    pass


class CorruptFile(FormatViolation):
    pass


class ConfigError(FormatViolation):
    pass


class CheckpointMismatch(FormatViolation):
    pass


class ShapeError(FormatViolation):
    pass


class IncompletePlan(FormatViolation):
    pass


# --- data / precondition family (exit 4) ---

class DataError(SvdaError):
    pass


class TooShort(DataError):
    pass


class DegenerateNoise(DataError):
    pass


class DegenerateRir(DataError):
    pass


class InvalidFactor(DataError):
    pass


class DegenerateTime(DataError):
    pass


class LabelError(DataError):
    pass


class NormError(DataError):
    pass


class EmptyBatch(DataError):
    pass


class TooFewPoints(DataError):
    pass


class EmptyResult(DataError):
    pass


class UnknownUtterance(DataError):
    pass


class NotEnoughData(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class AlignmentError(DataError):
    pass


class EmptyData(DataError):
    pass


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit-code convention."""
    if isinstance(exc, (IoError, FileNotFoundError, PermissionError, IsADirectoryError)):
        return 2
    if isinstance(exc, OSError):
        return 2
    if isinstance(exc, FormatViolation):
        return 3
    if isinstance(exc, DataError):
        return 4
    return 1
