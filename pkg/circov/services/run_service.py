from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ValidationError

from circov.clients.data_files import DataFileClient
from circov.core.config import RunConfig
from circov.core.errors import NotFound, OutputError, StructuralError, ValidationFailed, from_pydantic
from circov.models.common import (
    BlockInfo,
    ConvergenceReport,
    ModeDocument,
    ProgrammeCount,
    SamplesSidecar,
    TruthDocument,
    ValidationReport,
)
from circov.services.aggregate import aggregate_draws, coverage_draws, write_outputs
from circov.services.hazards import ProcessModel, ProgrammeIndex, compute_hazards
from circov.services.inference import PosteriorSamples, initial_point, laplace_samples, optimize
from circov.services.likelihood import PosteriorObjective, PosteriorSpec
from circov.services.parameters import ShareField, build_share_field, load_share_rules
from circov.services.programme import (
    PROGRAMME_COLUMNS,
    load_population,
    load_programme_counts,
    load_reallocation,
    population_frame,
    reallocate,
    require_population,
)
from circov.services.simulator import SimDesign, draw_true_parameters, simulate_individuals, simulate_programme
from circov.services.structure import AdjacencyGraph, Grid, ModelStructure, build_model_structure
from circov.services.survey import SURVEY_COLUMNS, EventCountCube, expand_to_cube, load_survey_records

GRID_COLUMNS = ("region",)
ADJACENCY_COLUMNS = ("region_a", "region_b")


@lru_cache(maxsize=1)
def get_data_client() -> DataFileClient:
    return DataFileClient()


def get_run_service(config: RunConfig) -> RunService:
    return RunService(config, get_data_client())


@dataclass(frozen=True, eq=False)
class Inputs:
    model: ProcessModel
    cube: EventCountCube
    survey_records: int
    programme: list[ProgrammeCount]
    population: np.ndarray
    covered: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.model.grid


class RunService:
    def __init__(self, config: RunConfig, client: DataFileClient) -> None:
        self._config = config
        self._files = client
        self._log = logging.getLogger("circov.run")

    @property
    def config(self) -> RunConfig:
        return self._config

    # ---- inputs ----

    def load_grid(self) -> Grid:
        frame = self._files.read_table(self._config.paths.grid, GRID_COLUMNS, optional=("parent",))
        regions = tuple(str(r).strip() for r in frame["region"])
        if any(not r for r in regions):
            raise ValidationFailed("Empty region identifier in grid file", {"path": str(self._config.paths.grid)})
        parents = tuple(str(p).strip() for p in frame["parent"]) if "parent" in frame.columns else None
        g = self._config.grid
        return Grid(
            regions=regions,
            age_max=g.age_max,
            year_min=g.year_min,
            year_max=g.year_max,
            paediatric_cutoff=g.paediatric_cutoff,
            terminal_age=g.terminal_age,
            parents=parents,
        )

    def load_structure(self, grid: Grid) -> ModelStructure:
        frame = self._files.read_table(self._config.paths.adjacency, ADJACENCY_COLUMNS)
        pairs = [(str(a).strip(), str(b).strip()) for a, b in zip(frame["region_a"], frame["region_b"])]
        graph = AdjacencyGraph.from_pairs(grid.regions, pairs)
        spline = self._config.spline
        return build_model_structure(grid, graph, spline.knot_spacing, spline.degree)

    def load_shares(self, grid: Grid) -> ShareField:
        rules = []
        if self._config.paths.shares is not None:
            rules += load_share_rules(self._config.paths.shares, self._files)
        rules += list(self._config.shares)
        return build_share_field(rules, grid)

    def load_model(self) -> ProcessModel:
        grid = self.load_grid()
        structure = self.load_structure(grid)
        return ProcessModel.build(structure, self.load_shares(grid), self._config.priors.parameterization)

    def load_programme(self, grid: Grid) -> list[ProgrammeCount]:
        paths = self._config.paths
        if paths.programme is None:
            return []
        counts = load_programme_counts(paths.programme, grid, self._files)
        if paths.reallocation is not None:
            counts = reallocate(counts, load_reallocation(paths.reallocation, self._files), grid)
        return counts

    def load_inputs(self) -> Inputs:
        model = self.load_model()
        grid = model.grid
        records = load_survey_records(self._config.paths.survey, self._files)
        cube = expand_to_cube(records, grid, self._config.survey.weight_scaling)
        programme = self.load_programme(grid)
        population, covered = load_population(self._config.paths.population, grid, self._files)
        require_population(covered, grid, grid.years, "reporting")
        if self._config.use_programme and programme:
            require_population(covered, grid, {c.year for c in programme}, "programme counts")
        return Inputs(
            model=model,
            cube=cube,
            survey_records=len(records),
            programme=programme,
            population=population,
            covered=covered,
        )

    def posterior_spec(self, inputs: Inputs) -> PosteriorSpec:
        index = ProgrammeIndex.build(inputs.programme, inputs.grid) if inputs.programme else None
        return PosteriorSpec(
            model=inputs.model,
            cube=inputs.cube,
            population=inputs.population,
            programme=index,
            priors=self._config.priors,
            use_programme=self._config.use_programme,
        )

    # ---- commands ----

    def validate(self) -> ValidationReport:
        inputs = self.load_inputs()
        layout = inputs.model.layout
        report = ValidationReport(
            regions=inputs.grid.n_region,
            ages=inputs.grid.n_age,
            years=[int(y) for y in inputs.grid.years],
            survey_records=inputs.survey_records,
            cube_mass=inputs.cube.total,
            cube_by_outcome=inputs.cube.totals_by_outcome(),
            adjustments=dict(inputs.cube.dropped),
            programme_rows=len(inputs.programme),
            share_free_cells=inputs.model.shares.n_free,
            parameters=layout.size,
            layout_hash=layout.hash,
        )
        self._log.info("validated", extra={"parameters": layout.size, "survey_records": inputs.survey_records})
        return report

    def simulate(self) -> dict[str, str]:
        sim = self._config.simulation
        if sim is None:
            raise ValidationFailed("Config has no simulation section")
        paths = self._config.paths
        model = self.load_model()
        grid = model.grid

        written: dict[str, str] = {}
        if paths.population.is_file():
            population, _ = load_population(paths.population, grid, self._files)
        else:
            population = np.full((grid.n_region, grid.n_age, grid.n_time), sim.default_population)
            self._files.write_table(paths.population, population_frame(population, grid, grid.internal_years))
            written["population"] = str(paths.population)

        params = draw_true_parameters(model, sim.truth, sim.seed)
        design = SimDesign.from_parameters(
            model,
            params,
            population,
            surveys=sim.surveys,
            weight_dispersion=sim.weight_dispersion,
            left_censored_fraction=sim.left_censored_fraction,
            min_age=sim.min_age,
            programme_years=sim.programme_years,
            programme_bands=sim.programme_bands,
            seed=sim.seed,
        )
        records = simulate_individuals(design)
        self._files.write_records(paths.survey, records, SURVEY_COLUMNS)
        written["survey"] = str(paths.survey)
        if paths.programme is not None:
            self._files.write_records(paths.programme, simulate_programme(design), PROGRAMME_COLUMNS)
            written["programme"] = str(paths.programme)

        truth = TruthDocument(
            layout_hash=model.layout.hash,
            seed=sim.seed,
            parameters=_blocks_as_lists(model, params),
        )
        written["truth"] = str(self._write_json(self._config.output_dir / "truth.json", truth))
        self._log.info("simulated", extra={"records": len(records), "files": len(written)})
        return written

    def fit(self) -> dict[str, str]:
        cfg = self._config.inference
        inputs = self.load_inputs()
        spec = self.posterior_spec(inputs)
        objective = PosteriorObjective(spec)
        init = initial_point(spec)
        compute_hazards(init, inputs.model)  # names the block if the start is non-finite

        fit = optimize(objective, init, cfg, inputs.model.layout)
        samples = laplace_samples(fit, cfg.n_samples, cfg.seed)

        out = self._config.output_dir
        written = {
            "mode": str(self._write_json(out / "mode.json", ModeDocument(
                layout_hash=inputs.model.layout.hash,
                nlp_at_mode=fit.nlp_at_mode,
                terms=objective.breakdown(fit.mode),
                blocks=_blocks_as_lists(inputs.model, fit.mode),
            ))),
            "convergence": str(self._write_json(out / "convergence.json", ConvergenceReport(
                status=fit.convergence.status,
                iterations=fit.convergence.iterations,
                evaluations=fit.convergence.evaluations,
                grad_max=fit.convergence.grad_max,
                nlp_at_mode=fit.nlp_at_mode,
                optimizer=cfg.optimizer,
                hessian_mode=fit.curvature.mode,
                trace=fit.convergence.trace,
            ))),
        }
        written.update(self.write_samples(samples, inputs.model, out / "samples.bin"))
        if self._config.aggregate:
            paths = self._summarize(samples, inputs.model, inputs.population)
            written["summary"] = str(paths[0])
        return written

    def aggregate(self, samples_path: Path) -> dict[str, str]:
        if not self._config.aggregate:
            raise ValidationFailed("Config has no aggregate queries")
        model = self.load_model()
        grid = model.grid
        population, covered = load_population(self._config.paths.population, grid, self._files)
        require_population(covered, grid, grid.years, "reporting")
        samples = self.read_samples(samples_path, model)
        paths = self._summarize(samples, model, population)
        return {"summary": str(paths[0]), "charts": str(len(paths) - 1)}

    # ---- persistence ----

    def _summarize(self, samples: PosteriorSamples, model: ProcessModel, population: np.ndarray) -> list[Path]:
        rows = aggregate_draws(
            coverage_draws(samples.draws, model, self._config.threads),
            population,
            self._config.aggregate,
            model.grid,
        )
        return write_outputs(rows, self._config.output_dir / "summary.csv", self._files)

    def write_samples(self, samples: PosteriorSamples, model: ProcessModel, path: Path) -> dict[str, str]:
        sidecar = SamplesSidecar(
            shape=(samples.n_samples, model.layout.size),
            seed=samples.seed,
            layout_hash=model.layout.hash,
            blocks=[BlockInfo(**b) for b in model.layout.describe()],
        )
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(np.ascontiguousarray(samples.draws, dtype="<f8").tobytes())
        except OSError as exc:
            raise OutputError("Cannot write samples", {"path": str(path), "reason": str(exc)}) from exc
        side = self._write_json(path.with_suffix(".json"), sidecar)
        return {"samples": str(path), "samples_sidecar": str(side)}

    def read_samples(self, path: Path, model: ProcessModel) -> PosteriorSamples:
        side = path.with_suffix(".json")
        if not path.is_file() or not side.is_file():
            raise NotFound("Samples file or sidecar not found", {"path": str(path), "sidecar": str(side)})
        try:
            sidecar = SamplesSidecar.model_validate_json(side.read_text(encoding="utf-8"))
        except ValidationError as exc:
            raise from_pydantic(exc, "Invalid samples sidecar", str(side)) from exc
        if sidecar.layout_hash != model.layout.hash:
            raise StructuralError(
                "Samples were produced for a different parameter layout",
                {"expected": model.layout.hash, "found": sidecar.layout_hash},
            )
        raw = np.frombuffer(path.read_bytes(), dtype="<f8")
        if raw.size != sidecar.shape[0] * sidecar.shape[1]:
            raise StructuralError("Samples file size does not match sidecar shape", {"shape": list(sidecar.shape)})
        return PosteriorSamples(draws=raw.reshape(sidecar.shape).astype(float), seed=sidecar.seed, layout_hash=sidecar.layout_hash)

    def _write_json(self, path: Path, doc: BaseModel) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(doc.model_dump_json(indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise OutputError("Cannot write output file", {"path": str(path), "reason": str(exc)}) from exc
        return path


def _blocks_as_lists(model: ProcessModel, x: np.ndarray) -> dict[str, Any]:
    return {name: np.asarray(v).tolist() for name, v in model.layout.unpack(np.asarray(x, dtype=float)).items()}
