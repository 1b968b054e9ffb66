from __future__ import annotations

from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

TERMINAL_AGE = 59


class Outcome(str, Enum):
    TMIC = "TMIC"
    MMC_NT = "MMC_NT"
    RIGHT_CENSORED = "RIGHT_CENSORED"
    LEFT_CENSORED = "LEFT_CENSORED"


# cube axis order
OUTCOMES: tuple[Outcome, ...] = (
    Outcome.TMIC,
    Outcome.MMC_NT,
    Outcome.RIGHT_CENSORED,
    Outcome.LEFT_CENSORED,
)


class CircType(str, Enum):
    MMC_NT = "MMC-nT"
    MMC_T = "MMC-T"
    TMC = "TMC"
    MMC = "MMC"
    TMIC = "TMIC"
    MC = "MC"


ELEMENTARY_TYPES: tuple[CircType, ...] = (CircType.MMC_NT, CircType.MMC_T, CircType.TMC)

COMPOSITION: dict[CircType, tuple[CircType, ...]] = {
    CircType.MMC_NT: (CircType.MMC_NT,),
    CircType.MMC_T: (CircType.MMC_T,),
    CircType.TMC: (CircType.TMC,),
    CircType.MMC: (CircType.MMC_NT, CircType.MMC_T),
    CircType.TMIC: (CircType.MMC_T, CircType.TMC),
    CircType.MC: (CircType.MMC_NT, CircType.MMC_T, CircType.TMC),
}


class SurveyRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    survey_id: str
    region: str
    birth_year: int
    outcome: Outcome
    event_age: int = Field(ge=0)
    weight: float = Field(gt=0)


class ProgrammeCount(BaseModel):
    model_config = ConfigDict(frozen=True)

    region: str
    year: int
    age_lo: int = Field(ge=0)
    age_hi: int = Field(ge=0)
    count: float = Field(ge=0)

    @model_validator(mode="after")
    def _band_order(self) -> ProgrammeCount:
        if self.age_lo > self.age_hi:
            raise ValueError(f"age band {self.age_lo}-{self.age_hi} is reversed")
        return self

    @property
    def key(self) -> tuple[str, int, int, int]:
        return (self.region, self.year, self.age_lo, self.age_hi)


class ReallocationRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: str
    dest: str
    share: float = Field(ge=0)
    year_from: int
    year_to: int

    @model_validator(mode="after")
    def _year_order(self) -> ReallocationRow:
        if self.year_from > self.year_to:
            raise ValueError("year_from after year_to")
        return self


class PopulationRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    region: str
    year: int
    age: int = Field(ge=0)
    population: float = Field(ge=0)


class ShareRule(BaseModel):
    """MMC-T share assumption for a set of regions over a year range (p constant over age)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    regions: list[str] | Literal["*"] = "*"
    year_from: int
    year_to: int
    mode: Literal["fixed_zero", "fixed_value", "logit_normal"]
    value: float | None = None
    mu: float | None = None
    sigma: float | None = None

    @model_validator(mode="after")
    def _check_mode(self) -> ShareRule:
        if self.year_from > self.year_to:
            raise ValueError("year_from after year_to")
        if self.mode == "fixed_value":
            if self.value is None or not 0.0 <= self.value <= 1.0:
                raise ValueError("fixed_value needs value in [0, 1]")
        if self.mode == "logit_normal":
            if self.mu is None or self.sigma is None or self.sigma <= 0:
                raise ValueError("logit_normal needs mu and sigma > 0")
        return self


Statistic = Literal[
    "coverage", "incident_count", "unmet_need", "mean_age_at_event", "circumcised", "coverage_change"
]


class AggregateQuery(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    level: str | None = None
    regions: list[str] | Literal["*"] = "*"
    group_by: Literal["all", "region", "parent"] = "all"
    age_lo: int = Field(ge=0)
    age_hi: int = Field(ge=0)
    years: list[int] = Field(min_length=1)
    types: list[CircType] = Field(default_factory=lambda: [CircType.MC])
    statistic: Statistic = "coverage"
    baseline_year: int | None = None

    @model_validator(mode="after")
    def _check(self) -> AggregateQuery:
        if self.age_lo > self.age_hi:
            raise ValueError("age_lo after age_hi")
        if isinstance(self.regions, list) and not self.regions:
            raise ValueError("regions must be nonempty")
        if not self.types:
            raise ValueError("types must be nonempty")
        if self.statistic == "coverage_change" and self.baseline_year is None:
            raise ValueError("coverage_change needs baseline_year")
        return self

    @property
    def level_name(self) -> str:
        return self.level or self.group_by


SUMMARY_COLUMNS: tuple[str, ...] = (
    "level", "region_set", "age_lo", "age_hi", "year", "type", "statistic",
    "mean", "median", "sd", "lower95", "upper95",
)

SUMMARY_KEY: tuple[str, ...] = SUMMARY_COLUMNS[:7]


class SummaryRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    level: str
    region_set: str
    age_lo: int
    age_hi: int
    year: int
    type: str
    statistic: str
    mean: float
    median: float
    sd: float
    lower95: float
    upper95: float

    @field_validator("upper95")
    @classmethod
    def _ordered(cls, v: float, info: Any) -> float:
        lo = info.data.get("lower95")
        if lo is not None and v < lo:
            raise ValueError("upper95 below lower95")
        return v

    def sort_key(self) -> tuple:
        return tuple(getattr(self, k) for k in SUMMARY_KEY)


class BlockInfo(BaseModel):
    name: str
    kind: str
    shape: list[int]
    offset: int


class SamplesSidecar(BaseModel):
    """Describes samples.bin: little-endian float64, row-major (draws, parameters)."""

    shape: tuple[int, int]
    dtype: Literal["<f8"] = "<f8"
    seed: int
    layout_hash: str
    blocks: list[BlockInfo]


class ConvergenceReport(BaseModel):
    status: str
    iterations: int
    evaluations: int
    grad_max: float
    nlp_at_mode: float
    optimizer: str
    hessian_mode: str
    trace: list[float]


class ModeDocument(BaseModel):
    layout_hash: str
    nlp_at_mode: float
    terms: dict[str, float]
    blocks: dict[str, Any]


class TruthDocument(BaseModel):
    layout_hash: str
    seed: int
    parameters: dict[str, Any]


class ValidationReport(BaseModel):
    status: Literal["ok"] = "ok"
    regions: int
    ages: int
    years: list[int]
    survey_records: int
    cube_mass: float
    cube_by_outcome: dict[str, float]
    adjustments: dict[str, int]
    programme_rows: int
    share_free_cells: int
    parameters: int
    layout_hash: str
