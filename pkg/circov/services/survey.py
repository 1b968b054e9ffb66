from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd

from circov.clients.data_files import DataFileClient
from circov.core.errors import DomainError, StructuralError, ValidationFailed
from circov.models.common import OUTCOMES, Outcome, SurveyRecord
from circov.services.structure import Grid

log = logging.getLogger("circov.survey")

SURVEY_COLUMNS: tuple[str, ...] = ("survey_id", "region", "birth_year", "outcome", "event_age", "weight")

WeightScaling = Literal["as_published", "effective"]

_SORT_KEY = ["survey_id", "region", "birth_year", "outcome", "event_age", "weight"]


@dataclass(frozen=True, eq=False)
class EventCountCube:
    """Weighted outcome counts indexed (outcome, region, age, internal time)."""

    counts: np.ndarray
    grid: Grid
    dropped: dict[str, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, grid: Grid) -> EventCountCube:
        return cls(counts=np.zeros((len(OUTCOMES), grid.n_region, grid.n_age, grid.n_time)), grid=grid)

    def outcome(self, outcome: Outcome) -> np.ndarray:
        return self.counts[OUTCOMES.index(outcome)]

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def totals_by_outcome(self) -> dict[str, float]:
        return {o.value: float(self.counts[k].sum()) for k, o in enumerate(OUTCOMES)}

    @property
    def is_empty(self) -> bool:
        return not np.any(self.counts)


def kish_effective_sample_size(weights: Sequence[float] | np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise DomainError("Kish effective sample size needs at least one weight")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise DomainError("Weights must be positive and finite", {"nonpositive": int(np.sum(w <= 0))})
    return float(w.sum() ** 2 / np.sum(w * w))


def normalize_weights(frame: pd.DataFrame, scaling: WeightScaling = "as_published") -> np.ndarray:
    """Divide by the (survey, region) mean weight, then scale by the survey-level Kish ratio.

    `frame` needs columns survey_id, region and weight; the result is aligned with its rows.
    """
    if frame.empty:
        return np.zeros(0)
    missing = [c for c in ("survey_id", "region", "weight") if c not in frame.columns]
    if missing:
        raise StructuralError("Survey frame lacks columns needed for normalization", {"missing": missing})
    w = frame["weight"].to_numpy(dtype=float)
    if np.any(w <= 0):
        raise DomainError("Weights must be positive", {"nonpositive": int(np.sum(w <= 0))})

    group_mean = frame.groupby(["survey_id", "region"], sort=True)["weight"].transform("mean").to_numpy(dtype=float)
    ratio: dict[str, float] = {}
    for survey_id, weights in frame.groupby("survey_id", sort=True)["weight"]:
        m = float(len(weights))
        m_eff = kish_effective_sample_size(weights.to_numpy(dtype=float))
        ratio[str(survey_id)] = m / m_eff if scaling == "as_published" else m_eff / m
    factor = frame["survey_id"].astype(str).map(ratio).to_numpy(dtype=float)
    return w / group_mean * factor


def records_frame(records: Sequence[SurveyRecord]) -> pd.DataFrame:
    """Records as a frame in canonical order, so downstream sums are order independent."""
    rows = [
        {
            "survey_id": r.survey_id,
            "region": r.region,
            "birth_year": r.birth_year,
            "outcome": r.outcome.value,
            "event_age": r.event_age,
            "weight": r.weight,
        }
        for r in records
    ]
    frame = pd.DataFrame(rows, columns=list(SURVEY_COLUMNS))
    if frame.empty:
        return frame
    return frame.sort_values(_SORT_KEY, kind="mergesort").reset_index(drop=True)


def _native_row(frame: pd.DataFrame, idx: int) -> dict:
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in frame.iloc[idx].items()}


def _check_records(frame: pd.DataFrame, grid: Grid) -> None:
    problems: list[dict] = []
    unknown = ~frame["region"].isin(grid.regions)
    for idx in np.flatnonzero(unknown.to_numpy()):
        problems.append({"record": _native_row(frame, idx), "message": "region not in grid"})
    is_event = frame["outcome"].isin([Outcome.TMIC.value, Outcome.MMC_NT.value])
    late = is_event & (frame["event_age"] > grid.terminal_age)
    for idx in np.flatnonzero(late.to_numpy()):
        problems.append(
            {"record": _native_row(frame, idx), "message": f"event after terminal age {grid.terminal_age}"}
        )
    if problems:
        raise ValidationFailed(
            f"{len(problems)} survey record(s) rejected",
            {"rows": problems[:50], "total": len(problems)},
        )


def expand_to_cube(
    records: Sequence[SurveyRecord],
    grid: Grid,
    scaling: WeightScaling = "as_published",
) -> EventCountCube:
    """Weighted outcome counts on the internal grid.

    Records that do not fit the grid are coarsened or dropped, and each kind is counted in
    `dropped`: events past `age_max` become right-censored at `age_max`, right-censored ages
    are capped at `min(terminal_age, age_max)`, left-censored ages are capped at `terminal_age`
    (so 1 - S is read at that age) and then dropped if still past `age_max`, and cohorts born
    before the grid or observed after `year_max` are dropped.
    """
    frame = records_frame(records)
    if frame.empty:
        return EventCountCube.empty(grid)
    _check_records(frame, grid)

    weight = normalize_weights(frame, scaling)
    outcome = frame["outcome"].to_numpy()
    age = frame["event_age"].to_numpy(dtype=np.int64).copy()
    birth = frame["birth_year"].to_numpy(dtype=np.int64)
    level = np.array([OUTCOMES.index(Outcome(o)) for o in outcome], dtype=np.int64)
    keep = np.ones(len(frame), dtype=bool)
    dropped: dict[str, int] = {}

    event = (level == OUTCOMES.index(Outcome.TMIC)) | (level == OUTCOMES.index(Outcome.MMC_NT))
    right = level == OUTCOMES.index(Outcome.RIGHT_CENSORED)
    left = level == OUTCOMES.index(Outcome.LEFT_CENSORED)

    # events past the grid's last age become right-censored at that age
    beyond = event & (age > grid.age_max)
    if beyond.any():
        level[beyond] = OUTCOMES.index(Outcome.RIGHT_CENSORED)
        age[beyond] = grid.age_max
        dropped["events_coarsened_to_censored"] = int(beyond.sum())

    over = right & (age > min(grid.terminal_age, grid.age_max))
    if over.any():
        age[over] = min(grid.terminal_age, grid.age_max)
        dropped["censored_at_max_age"] = int(over.sum())

    clipped = left & (age > grid.terminal_age)
    if clipped.any():
        age[clipped] = grid.terminal_age
        dropped["left_censored_at_terminal_age"] = int(clipped.sum())
    left_out = left & (age > grid.age_max)
    if left_out.any():
        keep &= ~left_out
        dropped["left_censored_beyond_grid"] = int(left_out.sum())

    early = birth < grid.history_start
    if early.any():
        keep &= ~early
        dropped["cohort_before_grid"] = int((early & ~left_out).sum())

    year = birth + age
    late = keep & (year > grid.year_max)
    if late.any():
        keep &= ~late
        dropped["after_last_year"] = int(late.sum())

    if dropped:
        log.info("survey_records_adjusted", extra={"adjusted": dropped, "kept": int(keep.sum())})

    counts = np.zeros((len(OUTCOMES), grid.n_region, grid.n_age, grid.n_time))
    region = frame["region"].map(grid.region_index).to_numpy(dtype=np.int64)
    t = year - grid.history_start
    np.add.at(counts, (level[keep], region[keep], age[keep], t[keep]), weight[keep])
    return EventCountCube(counts=counts, grid=grid, dropped=dropped)


def load_survey_records(path: Path, client: DataFileClient) -> list[SurveyRecord]:
    records = client.read_records(path, SurveyRecord, SURVEY_COLUMNS)
    log.info("survey_loaded", extra={"records": len(records), "surveys": len({r.survey_id for r in records})})
    return records
