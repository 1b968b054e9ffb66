from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from circov.clients.data_files import DataFileClient, parse_records
from circov.core.errors import StructuralError, ValidationFailed
from circov.models.common import PopulationRow, ProgrammeCount, ReallocationRow
from circov.services.structure import Grid
from circov.utils.years import YearSpan

log = logging.getLogger("circov.programme")

PROGRAMME_COLUMNS: tuple[str, ...] = ("region", "year", "age_lo", "age_hi", "count")
REALLOCATION_COLUMNS: tuple[str, ...] = ("source", "dest", "share", "year_from", "year_to")
POPULATION_COLUMNS: tuple[str, ...] = ("region", "year", "age", "population")

_ROW_SUM_TOL = 1e-10


def merge_programme_counts(records: Iterable[ProgrammeCount], grid: Grid, warn: bool = True) -> list[ProgrammeCount]:
    """Validate against the grid, sum duplicate keys and reject overlapping bands."""
    problems: list[dict] = []
    groups: dict[tuple[str, int, int, int], list[float]] = defaultdict(list)
    for n, rec in enumerate(records, start=1):
        if rec.region not in grid.region_index:
            problems.append({"row": n, "field": "region", "message": f"unknown region {rec.region}"})
        if rec.age_hi > grid.age_max:
            problems.append({"row": n, "field": "age_hi", "message": f"band ends after age {grid.age_max}"})
        if not grid.history_start <= rec.year <= grid.year_max:
            problems.append({"row": n, "field": "year", "message": f"year {rec.year} outside grid"})
        groups[rec.key].append(rec.count)
    if problems:
        raise ValidationFailed(f"{len(problems)} invalid programme row(s)", {"rows": problems[:50], "total": len(problems)})

    merged: list[ProgrammeCount] = []
    for key in sorted(groups):
        values = groups[key]
        if len(values) > 1 and warn:
            log.warning("programme_duplicates_summed", extra={"key": list(key), "rows": len(values)})
        region, year, lo, hi = key
        merged.append(ProgrammeCount(region=region, year=year, age_lo=lo, age_hi=hi, count=math.fsum(values)))
    check_band_overlap(merged)
    return merged


def check_band_overlap(counts: Sequence[ProgrammeCount]) -> None:
    by_cell: dict[tuple[str, int], list[tuple[int, int]]] = defaultdict(list)
    for c in counts:
        by_cell[(c.region, c.year)].append((c.age_lo, c.age_hi))
    clashes = []
    for (region, year), bands in sorted(by_cell.items()):
        ordered = sorted(set(bands))
        for (lo1, hi1), (lo2, hi2) in zip(ordered, ordered[1:]):
            if lo2 <= hi1:
                clashes.append({"region": region, "year": year, "bands": [[lo1, hi1], [lo2, hi2]]})
    if clashes:
        raise ValidationFailed("Overlapping age bands within a region-year", {"rows": clashes[:50], "total": len(clashes)})


def load_programme_counts(path: Path, grid: Grid, client: DataFileClient) -> list[ProgrammeCount]:
    records = client.read_records(path, ProgrammeCount, PROGRAMME_COLUMNS)
    merged = merge_programme_counts(records, grid)
    log.info("programme_loaded", extra={"rows": len(records), "merged": len(merged)})
    return merged


@dataclass(frozen=True, eq=False)
class ReallocationMatrix:
    sources: tuple[str, ...]
    dests: tuple[str, ...]
    shares: np.ndarray  # (len(sources), len(dests))
    year_from: int
    year_to: int

    def __post_init__(self) -> None:
        if self.shares.shape != (len(self.sources), len(self.dests)):
            raise StructuralError("Reallocation shares do not match source/destination lists")
        if np.any(self.shares < 0):
            raise ValidationFailed("Negative reallocation share")
        sums = self.shares.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > _ROW_SUM_TOL)
        if bad.size:
            raise ValidationFailed(
                "Reallocation rows must sum to 1",
                {"rows": [{"source": self.sources[i], "sum": float(sums[i])} for i in bad]},
            )

    @property
    def years(self) -> YearSpan:
        return YearSpan(self.year_from, self.year_to)

    def applies(self, year: int) -> bool:
        return self.years.contains(year)

    def split(self, region: str) -> list[tuple[str, float]] | None:
        if region not in self.sources:
            return None
        row = self.shares[self.sources.index(region)]
        return [(d, float(s)) for d, s in zip(self.dests, row) if s > 0]

    @classmethod
    def from_rows(cls, rows: Sequence[ReallocationRow]) -> list[ReallocationMatrix]:
        by_years: dict[tuple[int, int], list[ReallocationRow]] = defaultdict(list)
        for r in rows:
            by_years[(r.year_from, r.year_to)].append(r)
        matrices = []
        for (y0, y1), group in sorted(by_years.items()):
            sources = tuple(sorted({r.source for r in group}))
            dests = tuple(sorted({r.dest for r in group}))
            shares = np.zeros((len(sources), len(dests)))
            for r in group:
                shares[sources.index(r.source), dests.index(r.dest)] += r.share
            matrices.append(cls(sources=sources, dests=dests, shares=shares, year_from=y0, year_to=y1))
        for a, b in zip(matrices, matrices[1:]):
            if a.years.overlaps(b.years):
                raise ValidationFailed(
                    "Reallocation year ranges overlap",
                    {"ranges": [[a.year_from, a.year_to], [b.year_from, b.year_to]]},
                )
        return matrices


def load_reallocation(path: Path, client: DataFileClient) -> list[ReallocationMatrix]:
    rows = client.read_records(path, ReallocationRow, REALLOCATION_COLUMNS)
    return ReallocationMatrix.from_rows(rows)


def reallocate(
    counts: Sequence[ProgrammeCount],
    matrix: ReallocationMatrix | Sequence[ReallocationMatrix],
    grid: Grid | None = None,
) -> list[ProgrammeCount]:
    """Split source-region counts across destinations for the years a matrix applies to."""
    matrices = [matrix] if isinstance(matrix, ReallocationMatrix) else list(matrix)
    if grid is not None:
        unknown = sorted({r for m in matrices for r in (*m.sources, *m.dests)} - set(grid.regions))
        if unknown:
            raise ValidationFailed("Reallocation refers to regions outside the grid", {"regions": unknown})

    parts: dict[tuple[str, int, int, int], list[float]] = defaultdict(list)
    moved = 0
    for c in counts:
        active = next((m for m in matrices if m.applies(c.year)), None)
        split = active.split(c.region) if active is not None else None
        if split is None:
            parts[c.key].append(c.count)
            continue
        moved += 1
        for dest, share in split:
            parts[(dest, c.year, c.age_lo, c.age_hi)].append(c.count * share)

    out = [
        ProgrammeCount(region=k[0], year=k[1], age_lo=k[2], age_hi=k[3], count=math.fsum(v))
        for k, v in sorted(parts.items())
    ]
    check_band_overlap(out)
    log.info("programme_reallocated", extra={"moved_rows": moved, "rows": len(out)})
    return out


def population_array(frame: pd.DataFrame, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Population on the internal grid plus a (region, time) mask of fully covered cells."""
    rows = parse_records(frame.to_dict("records"), PopulationRow, source="population")
    pop = np.zeros((grid.n_region, grid.n_age, grid.n_time))
    seen = np.zeros((grid.n_region, grid.n_age, grid.n_time), dtype=bool)
    problems = []
    for n, r in enumerate(rows, start=1):
        if r.region not in grid.region_index:
            problems.append({"row": n, "field": "region", "message": f"unknown region {r.region}"})
            continue
        if r.age > grid.age_max or not grid.history_start <= r.year <= grid.year_max:
            continue
        i, t = grid.region_index[r.region], r.year - grid.history_start
        pop[i, r.age, t] += r.population
        seen[i, r.age, t] = True
    if problems:
        raise ValidationFailed("Invalid population rows", {"rows": problems[:50], "total": len(problems)})
    return pop, seen.all(axis=1)


def load_population(path: Path, grid: Grid, client: DataFileClient) -> tuple[np.ndarray, np.ndarray]:
    return population_array(client.read_table(path, POPULATION_COLUMNS), grid)


def require_population(covered: np.ndarray, grid: Grid, years: Iterable[int], purpose: str) -> None:
    missing = []
    for year in sorted({int(y) for y in years}):
        t = grid.time_index(year)
        for i in np.flatnonzero(~covered[:, t]):
            missing.append({"region": grid.regions[i], "year": int(year)})
    if missing:
        raise ValidationFailed(
            f"Population table does not cover the years needed for {purpose}",
            {"rows": missing[:50], "total": len(missing)},
        )


def population_frame(pop: np.ndarray, grid: Grid, years: Iterable[int]) -> pd.DataFrame:
    rows = []
    for year in years:
        t = grid.time_index(year)
        for i, region in enumerate(grid.regions):
            for a in range(grid.n_age):
                rows.append({"region": region, "year": year, "age": a, "population": float(pop[i, a, t])})
    return pd.DataFrame(rows, columns=list(POPULATION_COLUMNS))
