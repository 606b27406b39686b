"""Exception taxonomy shared across the package.

Every error raised by library code derives from :class:`RpsflocError` so
callers (and the CLI) can map failures to exit codes without matching on
message text.
"""

from __future__ import annotations


class RpsflocError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RpsflocError):
    """A configuration value is malformed or inconsistent (usage error)."""


class DomainError(RpsflocError):
    """A numeric argument lies outside its documented domain."""


class ShapeError(RpsflocError):
    """An array has the wrong shape, dtype, or axis layout."""


class CapacityError(RpsflocError):
    """A requested scene cannot be realized (e.g. too many separated points)."""


class DataError(RpsflocError):
    """A file or stream cannot be parsed, or its checksum does not match."""


class DivergenceError(RpsflocError):
    """An iterative solve produced a non-finite objective.

    Carries the iteration index at which the divergence was detected.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
