"""
Errors
Exception hierarchy shared by every stage of the lab
"""

from typing import Optional


class AnlError(Exception):
    """Base class for all lab errors"""


class ConfigError(AnlError):
    """Invalid configuration value or file"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DomainError(AnlError):
    """Mathematical domain violation (zero norm, non-finite value, shape mismatch)"""


class StageError(AnlError):
    """Failure inside a pipeline stage, tagged with the stage name"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
