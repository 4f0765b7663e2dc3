import pathlib
from typing import NewType, Optional
import zlib


StationId = NewType('StationId', str)
PhaseId = NewType('PhaseId', str)


class SigmonError(Exception):
    pass


class ConfigurationError(SigmonError):
    pass


class DomainError(SigmonError):
    pass


class DimensionError(SigmonError):
    pass


class CapacityError(SigmonError):
    pass


class FitFailure(SigmonError):
    pass


class ModelVersionError(SigmonError):
    pass


class InvariantError(SigmonError):
    pass


class ParseError(SigmonError):
    """Malformed input file. Carries enough position to point at the culprit."""

    def __init__(self, path: str, message: str, line: Optional[int] = None, field: Optional[str] = None) -> None:
        self.path = path
        self.line = line
        self.field = field
        where = path
        if line is not None:
            where += f":{line}"
        if field is not None:
            where += f": field '{field}'"
        super(ParseError, self).__init__(f"{where}: {message}")


def zlib_read(path: pathlib.Path) -> bytes:
    with open(str(path), "rb") as f:
        return zlib.decompress(f.read())
