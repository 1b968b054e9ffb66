from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from typing import Any, Callable

from pydantic import ValidationError as PydanticValidationError

from circov.core.logging import get_run_id


@dataclass
class AppError(Exception):
    exit_code: int
    code: str
    message: str
    details: dict[str, Any] | None = None

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class ValidationFailed(AppError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(2, "validation_error", message, details)


class StructuralError(AppError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(3, "structural_error", message, details)


class DomainError(AppError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(4, "domain_error", message, details)


class NumericalError(AppError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(5, "numerical_error", message, details)


class DiagnosticError(AppError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(6, "diagnostic_error", message, details)


class NotFound(AppError):
    def __init__(self, message: str = "Not found", details: dict[str, Any] | None = None):
        super().__init__(7, "not_found", message, details)


class OutputError(AppError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(8, "output_error", message, details)


def from_pydantic(exc: PydanticValidationError, message: str, source: str | None = None) -> ValidationFailed:
    rows = [
        {"loc": ".".join(str(p) for p in err.get("loc", ())), "message": err.get("msg", "")}
        for err in exc.errors()
    ]
    details: dict[str, Any] = {"errors": rows}
    if source:
        details["source"] = source
    return ValidationFailed(message, details)


def error_payload(exc: AppError) -> dict[str, Any]:
    return {
        "error": {
            "code": exc.code,
            "message": exc.message,
            "details": exc.details or {},
            "run_id": get_run_id(),
        }
    }


def install_exception_handlers(command: Callable[[], int], stream: Any = None) -> int:
    """Run a CLI command, translating failures into a JSON error document and an exit code."""
    out = stream or sys.stderr
    log = logging.getLogger("circov")
    try:
        return command()
    except AppError as exc:
        log.warning(
            "app_error",
            extra={"code": exc.code, "exit_code": exc.exit_code, "details": exc.details},
        )
        print(json.dumps(error_payload(exc), default=str, sort_keys=True), file=out)
        return exc.exit_code
    except Exception:
        log.exception("unhandled_error")
        payload = {
            "error": {
                "code": "internal_error",
                "message": "Internal error",
                "details": {},
                "run_id": get_run_id(),
            }
        }
        print(json.dumps(payload, sort_keys=True), file=out)
        return 1
