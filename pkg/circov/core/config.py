from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from circov.models.common import AggregateQuery, ShareRule


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    log_level: str = Field("INFO", alias="CIRCOV_LOG_LEVEL")
    threads: int = Field(1, alias="CIRCOV_THREADS", ge=1)
    cache_maxsize: int = Field(32, alias="CIRCOV_CACHE_MAXSIZE", ge=1)


settings = Settings()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Strict):
    grid: Path
    adjacency: Path
    survey: Path
    population: Path
    programme: Path | None = None
    reallocation: Path | None = None
    shares: Path | None = None


class GridConfig(_Strict):
    age_max: int = Field(ge=1)
    year_min: int
    year_max: int
    paediatric_cutoff: int = Field(10, ge=1)
    terminal_age: int = Field(59, ge=0)

    @model_validator(mode="after")
    def _bounds(self) -> GridConfig:
        if self.year_max < self.year_min:
            raise ValueError("year_max before year_min")
        if self.age_max < self.paediatric_cutoff:
            raise ValueError("age_max below paediatric_cutoff")
        return self


class SplineConfig(_Strict):
    knot_spacing: int = Field(5, ge=1)
    degree: int = Field(3, ge=1)


class PriorConfig(_Strict):
    intercept_sd: float = Field(5.0, gt=0)
    sigma_rate: float = Field(1.0, gt=0)
    rho_logit_mean: float = 3.0
    rho_logit_sd: float = Field(1.0, gt=0)
    soft_constraint_scale: float = Field(1e-3, gt=0)
    parameterization: Literal["whitened", "centered"] = "whitened"


class SurveyConfig(_Strict):
    weight_scaling: Literal["as_published", "effective"] = "as_published"


class InferenceConfig(_Strict):
    max_iter: int = Field(1000, ge=1)
    tol_obj: float = Field(1e-8, gt=0)
    tol_grad: float = Field(1e-5, gt=0)
    n_samples: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    hessian_mode: Literal["dense", "finite_difference", "bfgs", "auto"] = "dense"
    dense_threshold: int = Field(3000, ge=1)
    optimizer: Literal["lbfgs", "lbfgsb"] = "lbfgs"
    history: int = Field(10, ge=1)
    refine: Literal["newton", "none"] = "newton"
    refine_max_iter: int = Field(200, ge=1)
    c1: float = Field(1e-4, gt=0, lt=1)
    c2: float = Field(0.9, gt=0, lt=1)


class SurveyDesignConfig(_Strict):
    survey_id: str
    year: int
    respondents: int = Field(ge=1)


class TruthConfig(_Strict):
    tmic_intercept: float = -4.0
    paed_intercept: float = -6.0
    adult_intercept: float = -3.5
    sigma: float = Field(0.5, gt=0)
    logit_rho: float = 3.0
    share_logit: float = 0.0


class SimulationConfig(_Strict):
    seed: int = Field(0, ge=0)
    surveys: list[SurveyDesignConfig] = Field(min_length=1)
    weight_dispersion: float = Field(0.3, ge=0)
    left_censored_fraction: float = Field(0.0, ge=0, le=1)
    min_age: int = Field(0, ge=0)
    programme_years: list[int] = Field(default_factory=list)
    programme_bands: list[tuple[int, int]] = Field(default_factory=lambda: [(10, 14), (15, 49)])
    default_population: float = Field(1000.0, gt=0)
    truth: TruthConfig = Field(default_factory=TruthConfig)


class RunConfig(_Strict):
    schema_version: Literal[1]
    paths: PathsConfig
    grid: GridConfig
    spline: SplineConfig = Field(default_factory=SplineConfig)
    priors: PriorConfig = Field(default_factory=PriorConfig)
    survey: SurveyConfig = Field(default_factory=SurveyConfig)
    shares: list[ShareRule] = Field(default_factory=list)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    aggregate: list[AggregateQuery] = Field(default_factory=list)
    simulation: SimulationConfig | None = None
    output_dir: Path = Path("output")
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)
    use_programme: bool = True

    def resolved(self, base: Path) -> RunConfig:
        """Anchor every relative path at `base` (the config file's directory)."""

        def anchor(p: Path | None) -> Path | None:
            if p is None:
                return None
            return p if p.is_absolute() else (base / p)

        paths = self.paths.model_copy(
            update={name: anchor(getattr(self.paths, name)) for name in PathsConfig.model_fields}
        )
        return self.model_copy(update={"paths": paths, "output_dir": anchor(self.output_dir)})


def load_run_config(path: Path) -> RunConfig:
    from circov.core.errors import NotFound, from_pydantic

    if not path.is_file():
        raise NotFound("Config file not found", {"path": str(path)})
    try:
        config = RunConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise from_pydantic(exc, "Invalid run config", str(path)) from exc
    return config.resolved(path.parent.resolve())
