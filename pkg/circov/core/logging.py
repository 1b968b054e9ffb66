from __future__ import annotations

import logging
import time
import uuid
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator

from circov.core.config import settings

_run_id_ctx: ContextVar[str] = ContextVar("run_id", default="")

_RESERVED = {
    "args", "msg", "levelname", "levelno", "name", "pathname", "filename", "module",
    "exc_info", "exc_text", "stack_info", "lineno", "funcName", "created", "msecs",
    "relativeCreated", "thread", "threadName", "processName", "process", "taskName",
}


def get_run_id() -> str:
    return _run_id_ctx.get() or ""


@contextmanager
def run_context(command: str, run_id: str | None = None) -> Iterator[str]:
    rid = run_id or uuid.uuid4().hex[:12]
    token = _run_id_ctx.set(rid)
    start = time.perf_counter()
    status = "error"
    try:
        yield rid
        status = "ok"
    finally:
        duration_ms = int((time.perf_counter() - start) * 1000)
        logging.getLogger("circov.run").info(
            "command",
            extra={"command": command, "status": status, "duration_ms": duration_ms},
        )
        _run_id_ctx.reset(token)


class KeyValueFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        base = {
            "lvl": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
            "run_id": get_run_id(),
        }
        extra = {
            k: v
            for k, v in getattr(record, "__dict__", {}).items()
            if k not in _RESERVED and not k.startswith("_")
        }
        merged = {**base, **extra}
        parts = [f"{k}={v!r}" for k, v in merged.items() if v not in (None, "", [])]
        line = " ".join(parts)
        if record.exc_info:
            line = f"{line}\n{self.formatException(record.exc_info)}"
        return line


def configure_logging(level: str | None = None) -> None:
    root = logging.getLogger()
    root.setLevel(getattr(logging, (level or settings.log_level).upper(), logging.INFO))

    handler = logging.StreamHandler()
    handler.setLevel(root.level)
    handler.setFormatter(KeyValueFormatter())

    # replace handlers so repeated CLI invocations in one process don't duplicate lines
    root.handlers = [handler]

    logging.getLogger("jax").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
