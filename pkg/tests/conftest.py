from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from circov.core.config import PriorConfig
from circov.models.common import ProgrammeCount, SurveyRecord
from circov.services.hazards import ProcessModel, ProgrammeIndex
from circov.services.likelihood import PosteriorSpec
from circov.services.parameters import ShareField
from circov.services.structure import AdjacencyGraph, Grid, build_model_structure
from circov.services.survey import EventCountCube


@pytest.fixture
def grid() -> Grid:
    return Grid(regions=("A", "B", "C"), age_max=12, year_min=2010, year_max=2012, parents=("P", "P", "Q"))


@pytest.fixture
def path_graph() -> AdjacencyGraph:
    return AdjacencyGraph.from_pairs(("A", "B", "C"), [("A", "B"), ("B", "C")])


@pytest.fixture
def structure(grid, path_graph):
    return build_model_structure(grid, path_graph, knot_spacing=5, degree=3)


@pytest.fixture
def model(structure, grid) -> ProcessModel:
    return ProcessModel.build(structure, ShareField.zeros(grid))


@pytest.fixture
def random_cube(grid) -> EventCountCube:
    rng = np.random.default_rng(11)
    counts = rng.uniform(0.0, 2.0, size=(4, grid.n_region, grid.n_age, grid.n_time))
    counts[rng.random(counts.shape) < 0.6] = 0.0
    return EventCountCube(counts=counts, grid=grid)


@pytest.fixture
def population(grid) -> np.ndarray:
    return np.full((grid.n_region, grid.n_age, grid.n_time), 500.0)


@pytest.fixture
def programme_index(grid) -> ProgrammeIndex:
    rows = [
        ProgrammeCount(region=r, year=y, age_lo=10, age_hi=12, count=float(5 + k))
        for k, (r, y) in enumerate((r, y) for r in grid.regions for y in (2011, 2012))
    ]
    return ProgrammeIndex.build(rows, grid)


@pytest.fixture
def small_spec(model, random_cube, population, programme_index) -> PosteriorSpec:
    return PosteriorSpec(
        model=model,
        cube=random_cube,
        population=population,
        programme=programme_index,
        priors=PriorConfig(),
    )


def write_csv(path: Path, header: str, rows: list[str]) -> Path:
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    """A complete, tiny input set plus a config that validates."""
    regions = ("A", "B")
    write_csv(tmp_path / "regions.csv", "region,parent", ["A,P", "B,P"])
    write_csv(tmp_path / "adjacency.csv", "region_a,region_b", ["A,B"])
    survey = [
        SurveyRecord(survey_id="s1", region="A", birth_year=2001, outcome="MMC_NT", event_age=8, weight=1.2),
        SurveyRecord(survey_id="s1", region="A", birth_year=2002, outcome="RIGHT_CENSORED", event_age=9, weight=0.8),
        SurveyRecord(survey_id="s1", region="B", birth_year=2003, outcome="TMIC", event_age=0, weight=1.0),
        SurveyRecord(survey_id="s1", region="B", birth_year=2001, outcome="LEFT_CENSORED", event_age=10, weight=1.1),
    ]
    write_csv(
        tmp_path / "survey.csv",
        "survey_id,region,birth_year,outcome,event_age,weight",
        [f"{r.survey_id},{r.region},{r.birth_year},{r.outcome.value},{r.event_age},{r.weight}" for r in survey],
    )
    write_csv(
        tmp_path / "population.csv",
        "region,year,age,population",
        [f"{r},{y},{a},100" for r in regions for y in range(2000, 2012) for a in range(11)],
    )
    write_csv(tmp_path / "programme.csv", "region,year,age_lo,age_hi,count", ["A,2011,10,10,3", "B,2011,10,10,1"])
    config = {
        "schema_version": 1,
        "paths": {
            "grid": "regions.csv",
            "adjacency": "adjacency.csv",
            "survey": "survey.csv",
            "population": "population.csv",
            "programme": "programme.csv",
        },
        "grid": {"age_max": 10, "year_min": 2010, "year_max": 2011},
        "inference": {"n_samples": 20, "seed": 5},
        "aggregate": [{"regions": "*", "group_by": "region", "age_lo": 0, "age_hi": 10, "years": [2010, 2011]}],
        "output_dir": "out",
    }
    (tmp_path / "config.json").write_text(json.dumps(config), encoding="utf-8")
    return tmp_path

