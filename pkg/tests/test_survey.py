import json

import numpy as np
import pandas as pd
import pytest

from circov.core.errors import DomainError, ValidationFailed
from circov.models.common import OUTCOMES, Outcome, SurveyRecord
from circov.services.structure import Grid
from circov.services.survey import (
    expand_to_cube,
    kish_effective_sample_size,
    normalize_weights,
    records_frame,
)


@pytest.fixture
def survey_grid() -> Grid:
    return Grid(regions=("A", "B"), age_max=30, year_min=2005, year_max=2015)


def _record(**kw) -> SurveyRecord:
    base = dict(survey_id="s1", region="A", birth_year=1990, outcome=Outcome.MMC_NT, event_age=20, weight=1.0)
    base.update(kw)
    return SurveyRecord(**base)


def _mixed_records(n: int, seed: int) -> list[SurveyRecord]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        outcome = OUTCOMES[rng.integers(4)]
        birth = int(rng.integers(1980, 2000))
        age = int(rng.integers(0, 2015 - birth + 1))
        age = min(age, 30)
        out.append(
            _record(
                survey_id=f"s{rng.integers(2)}",
                region="AB"[rng.integers(2)],
                birth_year=birth,
                outcome=outcome,
                event_age=age,
                weight=float(rng.lognormal(0.0, 0.4)),
            )
        )
    return out


def test_kish_equal_weights():
    assert kish_effective_sample_size([1, 1, 1, 1]) == pytest.approx(4.0)


def test_kish_unequal_weights():
    assert kish_effective_sample_size([2, 1, 1]) == pytest.approx(16 / 6)


def test_kish_single_record():
    assert kish_effective_sample_size([3.7]) == pytest.approx(1.0)


def test_kish_rejects_empty_and_nonpositive():
    with pytest.raises(DomainError):
        kish_effective_sample_size([])
    with pytest.raises(DomainError):
        kish_effective_sample_size([1.0, 0.0])


def test_normalize_equal_weights_give_one():
    frame = pd.DataFrame({"survey_id": ["s"] * 4, "region": ["A", "A", "B", "B"], "weight": [2.0] * 4})
    np.testing.assert_allclose(normalize_weights(frame), 1.0)


def test_normalize_hand_example():
    frame = pd.DataFrame({"survey_id": ["s"] * 3, "region": ["A"] * 3, "weight": [2.0, 1.0, 1.0]})
    expected = np.array([1.5, 0.75, 0.75]) * (3 / (16 / 6))
    np.testing.assert_allclose(normalize_weights(frame), expected)


def test_normalize_effective_scaling_inverts_ratio():
    frame = pd.DataFrame({"survey_id": ["s"] * 3, "region": ["A"] * 3, "weight": [2.0, 1.0, 1.0]})
    expected = np.array([1.5, 0.75, 0.75]) * ((16 / 6) / 3)
    np.testing.assert_allclose(normalize_weights(frame, "effective"), expected)


def test_normalize_scale_invariant():
    frame = pd.DataFrame({"survey_id": ["s", "s", "t"], "region": ["A", "B", "A"], "weight": [0.3, 1.9, 2.2]})
    scaled = frame.assign(weight=frame["weight"] * 13.0)
    np.testing.assert_allclose(normalize_weights(scaled), normalize_weights(frame), rtol=1e-12)


def test_single_record_placement(survey_grid):
    cube = expand_to_cube([_record()], survey_grid)
    cell = cube.outcome(Outcome.MMC_NT)[0, 20, survey_grid.time_index(2010)]
    assert cell == pytest.approx(1.0)
    assert cube.total == pytest.approx(1.0)


def test_empty_records_give_zero_cube(survey_grid):
    cube = expand_to_cube([], survey_grid)
    assert cube.is_empty
    assert cube.counts.shape == (4, 2, 31, survey_grid.n_time)


def test_mass_and_tallies_match_group_by(survey_grid):
    records = _mixed_records(50, seed=4)
    cube = expand_to_cube(records, survey_grid)
    frame = records_frame(records)
    frame["normalized"] = normalize_weights(frame)
    tallies = frame.groupby("outcome")["normalized"].sum()
    for outcome, total in cube.totals_by_outcome().items():
        assert total == pytest.approx(float(tallies.get(outcome, 0.0)), abs=1e-8)
    assert cube.total == pytest.approx(float(frame["normalized"].sum()), abs=1e-8)


def test_cube_is_permutation_invariant(survey_grid):
    records = _mixed_records(40, seed=9)
    shuffled = [records[i] for i in np.random.default_rng(1).permutation(len(records))]
    np.testing.assert_array_equal(expand_to_cube(records, survey_grid).counts, expand_to_cube(shuffled, survey_grid).counts)


def test_scaling_one_survey_leaves_cube_unchanged(survey_grid):
    records = _mixed_records(60, seed=2)
    scaled = [r.model_copy(update={"weight": r.weight * 7.0}) if r.survey_id == "s0" else r for r in records]
    np.testing.assert_allclose(
        expand_to_cube(scaled, survey_grid).counts, expand_to_cube(records, survey_grid).counts, rtol=1e-12, atol=1e-12
    )


def test_unknown_region_lists_rows(survey_grid):
    with pytest.raises(ValidationFailed) as err:
        expand_to_cube([_record(region="Z"), _record()], survey_grid)
    assert len(err.value.details["rows"]) == 1
    assert err.value.details["rows"][0]["record"]["region"] == "Z"


def test_event_after_terminal_age_rejected(survey_grid):
    with pytest.raises(ValidationFailed):
        expand_to_cube([_record(birth_year=1950, event_age=60)], survey_grid)


def test_old_records_coarsened_to_grid_edge(survey_grid):
    records = [
        _record(birth_year=1976, event_age=35),
        _record(birth_year=1976, outcome=Outcome.RIGHT_CENSORED, event_age=38),
    ]
    cube = expand_to_cube(records, survey_grid)
    rc = cube.outcome(Outcome.RIGHT_CENSORED)
    assert rc[0, 30, survey_grid.time_index(2006)] == pytest.approx(2.0)
    assert cube.outcome(Outcome.MMC_NT).sum() == 0.0
    assert cube.dropped["events_coarsened_to_censored"] == 1
    assert cube.dropped["censored_at_max_age"] == 1


def test_cohorts_before_grid_and_late_records_dropped(survey_grid):
    records = [
        _record(birth_year=1970, outcome=Outcome.RIGHT_CENSORED, event_age=30),
        _record(birth_year=2000, outcome=Outcome.RIGHT_CENSORED, event_age=20),
        _record(),
    ]
    cube = expand_to_cube(records, survey_grid)
    assert cube.dropped["cohort_before_grid"] == 1
    assert cube.dropped["after_last_year"] == 1
    assert cube.outcome(Outcome.RIGHT_CENSORED).sum() == 0.0


def test_rejected_rows_carry_plain_json_values(survey_grid):
    with pytest.raises(ValidationFailed) as err:
        expand_to_cube([_record(region="Z", birth_year=1995, event_age=12)], survey_grid)
    record = json.loads(json.dumps(err.value.details))["rows"][0]["record"]
    assert record["birth_year"] == 1995
    assert record["event_age"] == 12
    assert record["weight"] == 1.0


def test_left_censored_past_terminal_age_is_counted():
    grid = Grid(regions=("A",), age_max=14, year_min=2010, year_max=2012, terminal_age=11)
    records = [
        _record(region="A", birth_year=1997, outcome=Outcome.LEFT_CENSORED, event_age=13),
        _record(region="A", birth_year=2000, outcome=Outcome.LEFT_CENSORED, event_age=10),
    ]
    cube = expand_to_cube(records, grid)
    lc = cube.outcome(Outcome.LEFT_CENSORED)
    assert lc[0, 11, grid.time_index(2008)] == pytest.approx(1.0)
    assert lc[0, 10, grid.time_index(2010)] == pytest.approx(1.0)
    assert cube.dropped["left_censored_at_terminal_age"] == 1
