from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from circov.core.config import SurveyDesignConfig, TruthConfig
from circov.core.errors import StructuralError
from circov.models.common import Outcome, ProgrammeCount, SurveyRecord
from circov.services.hazards import (
    HazardField,
    ProcessModel,
    ProgrammeIndex,
    compute_hazards,
    compute_survivor_and_cif,
    expected_programme_counts,
    realize_effects,
)
from circov.services.parameters import EFFECTS, ParameterLayout
from circov.services.structure import Grid, ModelStructure

log = logging.getLogger("circov.simulator")


def _icar_draw(structure: ModelStructure, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draws from the intrinsic GMRF with precision Q_I, summing to zero on each connected component."""
    eig, vec = np.linalg.eigh(structure.icar_dense)
    keep = eig > 1e-9 * max(float(eig.max()), 1.0)
    z = rng.standard_normal((size, int(keep.sum())))
    return (z / np.sqrt(eig[keep])) @ vec[:, keep].T


def draw_true_parameters(model: ProcessModel, truth: TruthConfig, seed: int) -> np.ndarray:
    """A parameter vector drawn from the priors at fixed intercepts, standard deviations and correlations."""
    layout: ParameterLayout = model.layout
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    values: dict[str, np.ndarray | float] = {
        "tmic_intercept": truth.tmic_intercept,
        "paed_intercept": truth.paed_intercept,
        "adult_intercept": truth.adult_intercept,
    }
    for e in EFFECTS:
        shape = layout[e.name].shape
        if e.structure == "icar":
            raw = _icar_draw(model.structure, rng, 1)[0]
        elif e.structure == "age_space":
            raw = _icar_draw(model.structure, rng, shape[0])
        elif e.structure == "space_time":
            raw = _icar_draw(model.structure, rng, shape[1]).T
        else:
            raw = rng.standard_normal(shape)
        values[e.name] = raw
        values[f"log_sigma_{e.name}"] = float(np.log(truth.sigma))
        for r in e.rhos:
            values[f"logit_rho_{r}"] = truth.logit_rho
    if "logit_share" in layout:
        values["logit_share"] = np.full(layout["logit_share"].size, truth.share_logit)

    x = layout.pack(values)
    if model.parameterization == "centered":
        whitened = ProcessModel(model.structure, layout, model.shares, "whitened")
        realized = realize_effects(layout.unpack(x), whitened)
        x = layout.pack({**layout.unpack(x), **{k: np.asarray(v) for k, v in realized.items()}})
    return x


@dataclass(frozen=True, eq=False)
class SimDesign:
    grid: Grid
    hazards: HazardField
    population: np.ndarray  # (N_I, N_A, N_T) internal grid
    surveys: Sequence[SurveyDesignConfig]
    weight_dispersion: float = 0.3
    left_censored_fraction: float = 0.0
    min_age: int = 0
    programme_years: Sequence[int] = ()
    programme_bands: Sequence[tuple[int, int]] = ((10, 14), (15, 49))
    seed: int = 0
    params: np.ndarray | None = field(default=None)

    @classmethod
    def from_parameters(cls, model: ProcessModel, params: np.ndarray, population: np.ndarray, **kwargs) -> SimDesign:
        hazards = compute_hazards(params, model).to_numpy()
        return cls(grid=model.grid, hazards=hazards, population=population, params=params, **kwargs)

    def streams(self) -> list[np.random.Generator]:
        """One Philox stream per survey plus one for programme counts."""
        children = np.random.SeedSequence(self.seed).spawn(len(self.surveys) + 1)
        return [np.random.Generator(np.random.Philox(c)) for c in children]


def simulate_individuals(design: SimDesign) -> list[SurveyRecord]:
    grid = design.grid
    tmic = np.asarray(design.hazards.tmic)
    tilde = np.asarray(design.hazards.mmc_nt_tilde)
    records: list[SurveyRecord] = []
    for survey, rng in zip(design.surveys, design.streams()):
        if not grid.year_min <= survey.year <= grid.year_max:
            raise StructuralError("Survey year outside the reported window", {"survey_id": survey.survey_id, "year": survey.year})
        t_survey = grid.time_index(survey.year)
        weight = design.population[:, design.min_age :, t_survey]
        if weight.sum() <= 0:
            raise StructuralError("No population to sample in survey year", {"survey_id": survey.survey_id})
        counts = rng.multinomial(survey.respondents, (weight / weight.sum()).ravel()).reshape(weight.shape)

        for i in range(grid.n_region):
            for k in range(counts.shape[1]):
                m = int(counts[i, k])
                if m == 0:
                    continue
                age = design.min_age + k
                birth = survey.year - age
                steps = np.arange(age)
                t = birth - grid.history_start + steps
                u = rng.random((m, age))
                v = rng.random((m, age))
                is_tmic = u < tmic[i, steps, t][None, :]
                is_mmc = ~is_tmic & (v < tilde[i, steps, t][None, :])
                hit = is_tmic | is_mmc
                first = np.full(m, -1)
                if age > 0:
                    first = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
                lc = rng.random(m) < design.left_censored_fraction
                w = np.exp(design.weight_dispersion * rng.standard_normal(m))
                for n in range(m):
                    b = int(first[n])
                    if b < 0:
                        outcome, event_age = Outcome.RIGHT_CENSORED, age
                    elif lc[n]:
                        outcome, event_age = Outcome.LEFT_CENSORED, age
                    else:
                        outcome = Outcome.TMIC if is_tmic[n, b] else Outcome.MMC_NT
                        event_age = b
                    records.append(
                        SurveyRecord(
                            survey_id=survey.survey_id,
                            region=grid.regions[i],
                            birth_year=birth,
                            outcome=outcome,
                            event_age=event_age,
                            weight=float(w[n]),
                        )
                    )
    log.info("individuals_simulated", extra={"records": len(records), "surveys": len(design.surveys)})
    return records


def simulate_programme(design: SimDesign) -> list[ProgrammeCount]:
    grid = design.grid
    rng = design.streams()[-1]
    template = [
        ProgrammeCount(region=region, year=year, age_lo=lo, age_hi=hi, count=0.0)
        for region in grid.regions
        for year in design.programme_years
        for lo, hi in design.programme_bands
    ]
    if not template:
        return []
    index = ProgrammeIndex.build(template, grid)
    coverage = compute_survivor_and_cif(design.hazards)
    mu = np.asarray(expected_programme_counts(coverage, design.hazards, design.population, index))
    draws = rng.poisson(mu)
    log.info("programme_simulated", extra={"rows": len(template), "total": int(draws.sum())})
    return [c.model_copy(update={"count": float(y)}) for c, y in zip(template, draws)]
