"""Exception hierarchy.

Everything raised on purpose derives from :class:`TexEditError`, split into
problems with the request (``ValidationError`` family, CLI exit 2) and
failures while running (``RuntimeFailure`` family, CLI exit 3).
"""
from __future__ import annotations


class TexEditError(Exception):
    pass


class ValidationError(TexEditError, ValueError):
    """Bad inputs or configuration, detected before any model call.

    ``field`` names the offending setting (config key) when there is one.
    """

    def __init__(self, message: str = "", field: str | None = None):
        super().__init__(message)
        self.field = field


class ConfigurationError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class OrderingError(ValidationError):
    pass


class TokenError(ValidationError):
    pass


class UndefinedRegionError(ValidationError):
    """Metric region (mask or its complement) is empty."""


class SizeError(ValidationError):
    pass


class RuntimeFailure(TexEditError, RuntimeError):
    pass


class LoadError(RuntimeFailure):
    pass


class InjectionError(RuntimeFailure):
    def __init__(self, layer: int, kind: str, message: str):
        super().__init__(f"layer {layer} ({kind}): {message}")
        self.layer = layer
        self.kind = kind


class OrchestrationError(RuntimeFailure):
    pass


class PipelineError(RuntimeFailure):
    """Wraps any failure inside an edit run with the module and step that failed."""

    def __init__(self, module: str, step: int | None, cause: BaseException):
        where = f"step {step}" if step is not None else "setup"
        super().__init__(f"{module} failed at {where}: {cause}")
        self.module = module
        self.step = step
        self.cause = cause


def is_validation(exc: BaseException) -> bool:
    """True for request problems, including ones surfaced from inside a pipeline run (e.g. image size)."""
    return isinstance(exc, ValidationError) or isinstance(getattr(exc, "cause", None), ValidationError)


def error_field(exc: BaseException) -> str | None:
    return getattr(exc, "field", None) or getattr(getattr(exc, "cause", None), "field", None)
