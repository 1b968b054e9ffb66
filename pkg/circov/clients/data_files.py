from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Iterable, Sequence, TypeVar

import pandas as pd
from cachetools import LRUCache
from pydantic import BaseModel, ValidationError

from circov.core.config import settings
from circov.core.errors import NotFound, OutputError, ValidationFailed

M = TypeVar("M", bound=BaseModel)

_MAX_LISTED_ROWS = 50


class DataFileClient:
    """Reads and writes the CSV tables the pipeline exchanges, with a small parse cache."""

    def __init__(self, cache_enabled: bool = True) -> None:
        self._log = logging.getLogger("circov.files")
        self._cache_enabled = cache_enabled
        self._cache: LRUCache | None = LRUCache(maxsize=settings.cache_maxsize) if cache_enabled else None

    def _cache_get(self, key: tuple) -> pd.DataFrame | None:
        if not self._cache_enabled or self._cache is None:
            return None
        return self._cache.get(key)

    def _cache_set(self, key: tuple, val: pd.DataFrame) -> None:
        if not self._cache_enabled or self._cache is None:
            return
        self._cache[key] = val

    def read_table(self, path: Path, columns: Sequence[str], optional: Sequence[str] = ()) -> pd.DataFrame:
        if not path.is_file():
            raise NotFound("Input file not found", {"path": str(path)})
        stat = path.stat()
        key = (str(path.resolve()), stat.st_mtime_ns, stat.st_size, tuple(columns), tuple(optional))
        cached = self._cache_get(key)
        if cached is not None:
            return cached.copy()

        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
        except (pd.errors.ParserError, UnicodeDecodeError) as exc:
            raise ValidationFailed("File does not parse as CSV", {"path": str(path), "reason": str(exc)}) from exc
        frame.columns = [c.strip() for c in frame.columns]
        missing = [c for c in columns if c not in frame.columns]
        unknown = [c for c in frame.columns if c not in columns and c not in optional]
        if missing or unknown:
            raise ValidationFailed(
                "Unexpected CSV header",
                {"path": str(path), "expected": list(columns), "missing": missing, "unknown": unknown},
            )
        self._log.info("table_read", extra={"path": str(path), "rows": len(frame)})
        self._cache_set(key, frame)
        return frame.copy()

    def read_records(self, path: Path, model: type[M], columns: Sequence[str]) -> list[M]:
        frame = self.read_table(path, columns)
        return parse_records(frame.to_dict("records"), model, source=str(path))

    def write_table(self, path: Path, frame: pd.DataFrame) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=False, lineterminator="\n")
        except OSError as exc:
            raise OutputError("Cannot write output file", {"path": str(path), "reason": str(exc)}) from exc
        self._log.info("table_written", extra={"path": str(path), "rows": len(frame)})
        return path

    def write_records(self, path: Path, records: Iterable[BaseModel], columns: Sequence[str]) -> Path:
        rows = [r.model_dump(mode="json") for r in records]
        frame = pd.DataFrame(rows, columns=list(columns))
        return self.write_table(path, frame)


def parse_records(rows: list[dict[str, Any]], model: type[M], source: str = "") -> list[M]:
    """Validate every row, collecting all failures (row numbers are 1-based data rows)."""
    out: list[M] = []
    failures: list[dict[str, Any]] = []
    for n, row in enumerate(rows, start=1):
        cleaned = {k: (None if v == "" else v) for k, v in row.items()}
        try:
            out.append(model.model_validate(cleaned))
        except ValidationError as exc:
            for err in exc.errors():
                failures.append(
                    {
                        "row": n,
                        "field": ".".join(str(p) for p in err.get("loc", ())),
                        "message": err.get("msg", ""),
                    }
                )
    if failures:
        raise ValidationFailed(
            f"{len({f['row'] for f in failures})} invalid row(s)",
            {"source": source, "rows": failures[:_MAX_LISTED_ROWS], "total": len(failures)},
        )
    return out
