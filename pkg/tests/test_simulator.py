import numpy as np
import pytest

from circov.core.config import SurveyDesignConfig, TruthConfig
from circov.core.errors import StructuralError
from circov.models.common import Outcome
from circov.services.hazards import hazards_from_rates
from circov.services.simulator import SimDesign, draw_true_parameters, simulate_individuals, simulate_programme
from circov.services.structure import Grid


@pytest.fixture
def sim_grid() -> Grid:
    return Grid(regions=("A", "B"), age_max=15, year_min=2010, year_max=2011)


def _design(grid: Grid, tmic: float, tilde: float, respondents: int = 500, **kw) -> SimDesign:
    shape = (grid.n_region, grid.n_age, grid.n_time)
    hazards = hazards_from_rates(np.full(shape, tmic), np.full(shape, tilde), np.full(shape, 0.5)).to_numpy()
    base = dict(
        grid=grid,
        hazards=hazards,
        population=np.ones(shape),
        surveys=[SurveyDesignConfig(survey_id="s", year=2011, respondents=respondents)],
        weight_dispersion=0.0,
        seed=4,
    )
    base.update(kw)
    return SimDesign(**base)


def test_zero_hazards_give_only_right_censored(sim_grid):
    records = simulate_individuals(_design(sim_grid, 0.0, 0.0))
    assert len(records) == 500
    assert {r.outcome for r in records} == {Outcome.RIGHT_CENSORED}
    assert all(r.event_age == 2011 - r.birth_year for r in records)


def test_certain_tmic_happens_at_age_zero(sim_grid):
    records = simulate_individuals(_design(sim_grid, 1.0, 0.0, min_age=1))
    assert {(r.outcome, r.event_age) for r in records} == {(Outcome.TMIC, 0)}


def test_first_step_event_fraction(sim_grid):
    n = 4000
    records = simulate_individuals(_design(sim_grid, 0.0, 0.05, respondents=n, min_age=1))
    share = sum(r.event_age == 0 and r.outcome == Outcome.MMC_NT for r in records) / n
    # four binomial standard errors
    assert share == pytest.approx(0.05, abs=4 * np.sqrt(0.05 * 0.95 / n))
    assert {r.weight for r in records} == {1.0}


def test_individuals_reproducible_from_seed(sim_grid):
    first = simulate_individuals(_design(sim_grid, 0.05, 0.1))
    assert first == simulate_individuals(_design(sim_grid, 0.05, 0.1))
    assert first != simulate_individuals(_design(sim_grid, 0.05, 0.1, seed=5))


def test_left_censoring_keeps_survey_age(sim_grid):
    records = simulate_individuals(_design(sim_grid, 0.0, 0.3, left_censored_fraction=1.0, min_age=2))
    for r in records:
        assert r.outcome in (Outcome.LEFT_CENSORED, Outcome.RIGHT_CENSORED)
        assert r.event_age == 2011 - r.birth_year


def test_survey_year_outside_window(sim_grid):
    design = _design(sim_grid, 0.1, 0.1, surveys=[SurveyDesignConfig(survey_id="s", year=2012, respondents=10)])
    with pytest.raises(StructuralError):
        simulate_individuals(design)


def test_programme_counts_reproducible(sim_grid):
    design = _design(sim_grid, 0.05, 0.1, programme_years=[2011], programme_bands=[(10, 14)])
    first = simulate_programme(design)
    assert [(c.region, c.year) for c in first] == [("A", 2011), ("B", 2011)]
    assert first == simulate_programme(design)


def test_programme_counts_zero_without_hazard(sim_grid):
    design = _design(sim_grid, 0.0, 0.0, programme_years=[2010, 2011], programme_bands=[(10, 14)])
    assert [c.count for c in simulate_programme(design)] == [0.0] * 4


def test_no_programme_years_gives_no_rows(sim_grid):
    assert simulate_programme(_design(sim_grid, 0.1, 0.1)) == []


def test_true_spatial_effects_sum_to_zero(model):
    truth = TruthConfig(sigma=0.7)
    x = draw_true_parameters(model, truth, seed=3)
    values = model.layout.unpack(x)
    assert float(values["tmic_space"].sum()) == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(values["adult_age_space"].sum(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(values["adult_space_time"].sum(axis=0), 0.0, atol=1e-10)
    assert float(values["log_sigma_adult_time"]) == pytest.approx(np.log(0.7))
    assert float(values["tmic_intercept"]) == truth.tmic_intercept
    np.testing.assert_array_equal(x, draw_true_parameters(model, truth, seed=3))
