from typing import Any, Dict, Optional


class LabError(Exception):
    """Base class for every error raised by dglab."""


class ConfigurationError(LabError, ValueError):
    """Bad configuration or violated precondition.

    ``field`` carries the dotted config path when the error is tied to one
    field, so nested loaders can prefix it with their own location.
    """

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        self.field = field
        self.detail = message
        super().__init__(f"{field}: {message}" if field else message)

    def within(self, prefix: str) -> "ConfigurationError":
        if not prefix:
            return self
        field = f"{prefix}.{self.field}" if self.field else prefix
        return ConfigurationError(self.detail, field=field)


class DegenerateInputError(LabError, ValueError):
    pass


class InternalError(LabError, RuntimeError):
    pass


class NonFiniteLossError(LabError, FloatingPointError):
    def __init__(self, message: str, record: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.record = record or {}
