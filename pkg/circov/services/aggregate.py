from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from circov.clients.data_files import DataFileClient  # noqa: E402
from circov.core.errors import DomainError, OutputError, StructuralError  # noqa: E402
from circov.models.common import SUMMARY_COLUMNS, AggregateQuery, CircType, SummaryRow  # noqa: E402
from circov.services.hazards import CoverageField, ProcessModel  # noqa: E402
from circov.services.structure import Grid  # noqa: E402

log = logging.getLogger("circov.aggregate")

plt.rcParams["svg.hashsalt"] = "circov"


@dataclass(frozen=True)
class QueryCell:
    """One output row key with the grid indices it covers."""

    level: str
    region_set: str
    regions: tuple[int, ...]
    age_lo: int
    age_hi: int
    year: int
    type: str
    statistic: str
    baseline_year: int | None = None


def _region_groups(query: AggregateQuery, grid: Grid) -> list[tuple[str, tuple[int, ...]]]:
    if query.regions == "*":
        selected = list(grid.regions)
        label = "all"
    else:
        unknown = [r for r in query.regions if r not in grid.region_index]
        if unknown:
            raise StructuralError("Query refers to unknown regions", {"regions": unknown})
        selected = list(query.regions)
        label = "+".join(selected)
    if query.group_by == "region":
        return [(r, (grid.region_index[r],)) for r in selected]
    if query.group_by == "parent":
        groups = grid.parent_groups()
        if not groups:
            raise StructuralError("Query groups by parent but the grid has no parent column")
        out = []
        for parent in sorted(groups):
            members = tuple(grid.region_index[r] for r in groups[parent] if r in selected)
            if members:
                out.append((parent, members))
        return out
    return [(label, tuple(grid.region_index[r] for r in selected))]


def expand_query(query: AggregateQuery, grid: Grid) -> list[QueryCell]:
    if query.age_hi > grid.age_max:
        raise StructuralError("Query ages outside grid", {"age_hi": query.age_hi, "age_max": grid.age_max})
    years = list(query.years) + ([query.baseline_year] if query.baseline_year is not None else [])
    outside = [y for y in years if not grid.year_min <= y <= grid.year_max]
    if outside:
        raise StructuralError("Query years outside the reported window", {"years": outside})
    types = ["UC"] if query.statistic == "unmet_need" else [t.value for t in query.types]
    cells = []
    for label, members in _region_groups(query, grid):
        for year in query.years:
            for ctype in types:
                cells.append(
                    QueryCell(
                        level=query.level_name,
                        region_set=label,
                        regions=members,
                        age_lo=query.age_lo,
                        age_hi=query.age_hi,
                        year=year,
                        type=ctype,
                        statistic=query.statistic,
                        baseline_year=query.baseline_year,
                    )
                )
    return cells


def _cell_slices(cell: QueryCell, grid: Grid, year: int) -> tuple[np.ndarray, slice, int]:
    return np.asarray(cell.regions), slice(cell.age_lo, cell.age_hi + 1), grid.time_index(year)


def _coverage(cov: CoverageField, pop: np.ndarray, cell: QueryCell, grid: Grid, year: int) -> float:
    regions, ages, t = _cell_slices(cell, grid, year)
    p = pop[regions, ages, t]
    total = p.sum()
    if total <= 0:
        raise DomainError("Zero population in query cells", {"region_set": cell.region_set, "year": year})
    cif = cov.cif_of(CircType(cell.type))[regions, ages, t]
    return float((p * cif).sum() / total)


def _statistic(cov: CoverageField, pop: np.ndarray, cell: QueryCell, grid: Grid) -> float:
    regions, ages, t = _cell_slices(cell, grid, cell.year)
    p = pop[regions, ages, t]
    if cell.statistic == "coverage":
        return _coverage(cov, pop, cell, grid, cell.year)
    if cell.statistic == "coverage_change":
        assert cell.baseline_year is not None
        return _coverage(cov, pop, cell, grid, cell.year) - _coverage(cov, pop, cell, grid, cell.baseline_year)
    if cell.statistic == "unmet_need":
        return float((p * cov.survivor[regions, ages, t]).sum())
    if cell.statistic == "circumcised":
        return float((p * cov.cif_of(CircType(cell.type))[regions, ages, t]).sum())
    incidence = p * cov.incidence_of(CircType(cell.type))[regions, ages, t]
    if cell.statistic == "incident_count":
        return float(incidence.sum())
    mass = incidence.sum()
    if mass <= 0:
        raise DomainError("No incident mass in query cells", {"region_set": cell.region_set, "year": cell.year})
    age = np.arange(cell.age_lo, cell.age_hi + 1, dtype=float)[None, :]
    return float((age * incidence).sum() / mass)


def summarize(values: np.ndarray, cell: QueryCell) -> SummaryRow:
    v = np.asarray(values, dtype=float)
    lower, median, upper = np.quantile(v, [0.025, 0.5, 0.975], method="linear")
    return SummaryRow(
        level=cell.level,
        region_set=cell.region_set,
        age_lo=cell.age_lo,
        age_hi=cell.age_hi,
        year=cell.year,
        type=cell.type,
        statistic=cell.statistic,
        mean=float(v.mean()),
        median=float(median),
        sd=float(v.std(ddof=1)) if v.size > 1 else 0.0,
        lower95=float(lower),
        upper95=float(upper),
    )


def aggregate_draws(
    coverages: Iterable[CoverageField],
    population: np.ndarray,
    queries: Sequence[AggregateQuery],
    grid: Grid,
) -> list[SummaryRow]:
    """Evaluate every query cell on each draw, then summarize across draws."""
    cells = [c for q in queries for c in expand_query(q, grid)]
    per_draw = []
    for cov in coverages:
        cov = cov.to_numpy()
        per_draw.append([_statistic(cov, population, c, grid) for c in cells])
    if not per_draw:
        raise DomainError("No posterior draws to aggregate")
    values = np.asarray(per_draw)
    rows = [summarize(values[:, k], c) for k, c in enumerate(cells)]
    return sorted(rows, key=SummaryRow.sort_key)


def _single(statistic: str) -> Callable[..., list[SummaryRow]]:
    def run(
        coverages: Iterable[CoverageField], population: np.ndarray, query: AggregateQuery, grid: Grid
    ) -> list[SummaryRow]:
        return aggregate_draws(coverages, population, [query.model_copy(update={"statistic": statistic})], grid)

    run.__name__ = statistic
    return run


aggregate_coverage = _single("coverage")
incident_counts = _single("incident_count")
mean_age_at_event = _single("mean_age_at_event")
unmet_need = _single("unmet_need")


def coverage_draws(draws: np.ndarray, model: ProcessModel, threads: int = 1) -> Iterator[CoverageField]:
    """Coverage field per parameter draw, yielded in draw order."""
    evaluate = model.evaluate

    def one(x: np.ndarray) -> CoverageField:
        _, cov = evaluate(x)
        return cov.to_numpy()

    if threads <= 1:
        for x in draws:
            yield one(x)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(one, draws)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_")


def write_charts(rows: Sequence[SummaryRow], out_dir: Path) -> list[Path]:
    groups: dict[tuple, list[SummaryRow]] = {}
    for r in rows:
        groups.setdefault((r.statistic, r.level, r.region_set, r.age_lo, r.age_hi, r.type), []).append(r)
    paths = []
    for key, members in sorted(groups.items()):
        statistic, level, region_set, age_lo, age_hi, ctype = key
        members = sorted(members, key=lambda r: r.year)
        years = [r.year for r in members]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.fill_between(years, [r.lower95 for r in members], [r.upper95 for r in members], alpha=0.3, linewidth=0)
        ax.plot(years, [r.mean for r in members], marker="o")
        ax.set_xlabel("year")
        ax.set_ylabel(statistic)
        ax.set_title(f"{region_set} ({level}) ages {age_lo}-{age_hi} {ctype}")
        path = out_dir / f"{_slug('_'.join(str(k) for k in key))}.svg"
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise OutputError("Cannot write chart", {"path": str(path), "reason": str(exc)}) from exc
        finally:
            plt.close(fig)
        paths.append(path)
    return paths


def write_outputs(
    rows: Sequence[SummaryRow],
    path: Path,
    client: DataFileClient | None = None,
    charts: bool = True,
) -> list[Path]:
    client = client or DataFileClient(cache_enabled=False)
    ordered = sorted(rows, key=SummaryRow.sort_key)
    written = [client.write_records(path, ordered, SUMMARY_COLUMNS)]
    if charts and ordered:
        written += write_charts(ordered, path.parent)
    log.info("summary_written", extra={"path": str(path), "rows": len(ordered), "files": len(written)})
    return written
