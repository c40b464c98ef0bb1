"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class PeatClusterError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(PeatClusterError, ValueError):
    """Input data or configuration violates a precondition."""


class NumericalError(PeatClusterError, ArithmeticError):
    """A numerical stage failed; carries the offending location when known."""

    def __init__(self, message: str, location_id: str | None = None):
        self.location_id = location_id
        if location_id is not None:
            message = f"{message} (location {location_id})"
        super().__init__(message)


class DegenerateSRVFError(NumericalError):
    """An SRVF has zero variance and cannot be standardized."""
