from __future__ import annotations

from typing import Dict, Type

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_DATA_ERROR = 3
EXIT_RUNTIME_FAILURE = 4


class DetektorError(Exception):
    """Basisklasse aller fachlichen Fehler des Detektors."""


class InvalidInputError(DetektorError, ValueError):
    pass


class DegenerateConfigurationError(InvalidInputError):
    pass


class EmptyMaskError(InvalidInputError):
    pass


class ConfigurationError(DetektorError):
    pass


class DataLoadError(DetektorError):
    pass


class OutputExistsError(DataLoadError):
    pass


class UndefinedMetricError(DetektorError, ValueError):
    pass


_EXIT_CODES: Dict[Type[DetektorError], int] = {
    ConfigurationError: EXIT_BAD_CONFIG,
    DataLoadError: EXIT_DATA_ERROR,
    InvalidInputError: EXIT_DATA_ERROR,
    UndefinedMetricError: EXIT_DATA_ERROR,
}


def exit_code_for(exc: BaseException) -> int:
    # Reihenfolge der MRO entscheidet, damit Unterklassen die Zuordnung erben.
    for cls in type(exc).__mro__:
        code = _EXIT_CODES.get(cls)  # type: ignore[arg-type]
        if code is not None:
            return code
    return EXIT_RUNTIME_FAILURE


def with_frame_index(exc: DetektorError, frame_index: int) -> DetektorError:
    """Gleicher Fehlertyp, Meldung um den Frame-Index ergänzt."""
    return type(exc)(f"Frame {frame_index}: {exc}")
