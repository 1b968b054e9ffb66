"""End-to-end checks on simulated data. Slow; run with `pytest -m slow`."""

import numpy as np
import pytest

from circov.core.config import InferenceConfig, SurveyDesignConfig, TruthConfig
from circov.models.common import AggregateQuery, CircType
from circov.services.aggregate import aggregate_coverage, coverage_draws
from circov.services.hazards import ProcessModel, ProgrammeIndex, compute_hazards, compute_survivor_and_cif, hazards_from_rates
from circov.services.inference import FitResult, gradient_check, initial_point, laplace_samples, optimize
from circov.services.likelihood import PosteriorObjective, PosteriorSpec, total_nlp
from circov.services.parameters import ShareField
from circov.services.simulator import SimDesign, draw_true_parameters, simulate_individuals, simulate_programme
from circov.services.structure import AdjacencyGraph, Grid, build_model_structure
from circov.services.survey import expand_to_cube

pytestmark = pytest.mark.slow

PROGRAMME_YEARS = (2014, 2015, 2016, 2017)


@pytest.fixture(scope="module")
def recovery():
    grid = Grid(regions=("r1", "r2", "r3", "r4"), age_max=35, year_min=2010, year_max=2017)
    graph = AdjacencyGraph.from_pairs(grid.regions, [("r1", "r2"), ("r2", "r3"), ("r3", "r4"), ("r4", "r1")])
    model = ProcessModel.build(build_model_structure(grid, graph, knot_spacing=5, degree=3), ShareField.zeros(grid))
    truth = draw_true_parameters(model, TruthConfig(), seed=21)
    population = np.full((grid.n_region, grid.n_age, grid.n_time), 1000.0)
    design = SimDesign.from_parameters(
        model,
        truth,
        population,
        surveys=[
            SurveyDesignConfig(survey_id="early", year=2012, respondents=20_000),
            SurveyDesignConfig(survey_id="late", year=2016, respondents=20_000),
        ],
        programme_years=PROGRAMME_YEARS,
        programme_bands=((10, 14), (15, 24), (25, 35)),
        seed=21,
    )
    cube = expand_to_cube(simulate_individuals(design), grid)
    programme = ProgrammeIndex.build(simulate_programme(design), grid)
    settings = InferenceConfig(n_samples=1000, seed=1)

    def fit(use_programme: bool) -> tuple[FitResult, np.ndarray]:
        spec = PosteriorSpec(model=model, cube=cube, population=population, programme=programme, use_programme=use_programme)
        result = optimize(PosteriorObjective(spec), initial_point(spec), settings, model.layout)
        return result, laplace_samples(result, settings.n_samples, settings.seed).draws

    fit_with, with_programme = fit(True)
    fit_without, survey_only = fit(False)
    return {
        "grid": grid,
        "model": model,
        "truth": truth,
        "population": population,
        "with_programme": with_programme,
        "survey_only": survey_only,
        "fits": (fit_with, fit_without),
    }


def test_fits_converge_to_positive_definite_modes(recovery):
    for result in recovery["fits"]:
        assert result.convergence.status == "converged_gradient"
        assert result.curvature.cholesky is not None


def _coverage_rows(recovery, draws, ctype: CircType, years):
    query = AggregateQuery(group_by="region", age_lo=15, age_hi=34, years=list(years), types=[ctype])
    return aggregate_coverage(
        coverage_draws(draws, recovery["model"]), recovery["population"], query, recovery["grid"]
    )


def test_true_coverage_recovered(recovery):
    years = recovery["grid"].years
    truth = {(r.region_set, r.year): r.mean for r in _coverage_rows(recovery, recovery["truth"][None, :], CircType.MC, years)}
    rows = _coverage_rows(recovery, recovery["with_programme"], CircType.MC, years)
    inside = [r.lower95 <= truth[(r.region_set, r.year)] <= r.upper95 for r in rows]
    errors = [abs(r.mean - truth[(r.region_set, r.year)]) for r in rows]
    assert np.mean(inside) >= 0.9
    assert np.mean(errors) <= 0.03


def test_programme_data_narrows_intervals(recovery):
    def width(draws):
        rows = _coverage_rows(recovery, draws, CircType.MMC, PROGRAMME_YEARS)
        return np.mean([r.upper95 - r.lower95 for r in rows])

    assert width(recovery["survey_only"]) > width(recovery["with_programme"])


def test_conservation_over_many_parameter_vectors(model):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h = compute_hazards(rng.normal(0, 1.5, model.layout.size), model)
        cov = compute_survivor_and_cif(h).to_numpy()
        h = h.to_numpy()
        np.testing.assert_allclose(h.tmic + h.mmc_nt + h.uc, 1.0, atol=1e-12)
        np.testing.assert_allclose(cov.survivor + cov.cif_of(CircType.MC), 1.0, atol=1e-10)
        np.testing.assert_allclose(cov.cif_of(CircType.MC), cov.cif_of(CircType.MMC) + cov.cif_of(CircType.TMC), atol=1e-12)


def test_gradient_at_twenty_points(small_spec):
    objective = PosteriorObjective(small_spec)
    rng = np.random.default_rng(20)
    for _ in range(20):
        assert gradient_check(objective, rng.normal(0, 0.5, objective.size)).passed


def test_scaling_one_survey_changes_nothing(model, grid, population):
    shape = (grid.n_region, grid.n_age, grid.n_time)
    rng = np.random.default_rng(3)
    hazards = hazards_from_rates(rng.uniform(0, 0.05, shape), rng.uniform(0, 0.08, shape), np.zeros(shape)).to_numpy()
    design = SimDesign(
        grid=grid,
        hazards=hazards,
        population=population,
        surveys=[SurveyDesignConfig(survey_id="a", year=2011, respondents=800), SurveyDesignConfig(survey_id="b", year=2012, respondents=800)],
        seed=8,
    )
    records = simulate_individuals(design)
    scaled = [r.model_copy(update={"weight": r.weight * 7.0}) if r.survey_id == "a" else r for r in records]
    base = PosteriorSpec(model=model, cube=expand_to_cube(records, grid), population=population)
    other = PosteriorSpec(model=model, cube=expand_to_cube(scaled, grid), population=population)
    np.testing.assert_allclose(base.cube.counts, other.cube.counts, atol=1e-9)
    for _ in range(5):
        x = rng.normal(0, 0.3, model.layout.size)
        assert float(total_nlp(x, base)) == pytest.approx(float(total_nlp(x, other)), abs=1e-9)
