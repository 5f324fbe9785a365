"""
Exception hierarchy for the assignment engine.

Every error carries an exit code so the command line can report a category
instead of a traceback, and the API can map it onto an HTTP status.
"""


class TransitError(Exception):
    """Base class for all engine errors"""

    exit_code = 1
    http_status = 500

    def __init__(self, message: str, details: list[str] | None = None):
        super().__init__(message)
        self.message = message
        self.details = details or []

    def __str__(self) -> str:
        if not self.details:
            return self.message
        shown = "\n  - ".join(self.details[:20])
        more = f"\n  ... {len(self.details) - 20} more" if len(self.details) > 20 else ""
        return f"{self.message}\n  - {shown}{more}"


class ConfigError(TransitError, ValueError):
    exit_code = 2
    http_status = 422


class NetworkError(TransitError, ValueError):
    exit_code = 3
    http_status = 422


class DataValidationError(TransitError, ValueError):
    exit_code = 4
    http_status = 422


class NotPositiveDefiniteError(TransitError, ArithmeticError):
    exit_code = 5


class SamplerError(TransitError, RuntimeError):
    exit_code = 6


class StoreError(TransitError, OSError):
    exit_code = 7
    http_status = 404


class ScoringError(TransitError, ValueError):
    exit_code = 8
    http_status = 400
