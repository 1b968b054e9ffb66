"""Process model: per-step hazards by type, survivor function and cumulative incidence on the Lexis grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Literal, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.nn import sigmoid
from jax.scipy.linalg import solve_triangular

from circov.core.errors import NumericalError, StructuralError
from circov.models.common import COMPOSITION, ELEMENTARY_TYPES, CircType, ProgrammeCount
from circov.services.parameters import EFFECTS, ParameterLayout, ShareField
from circov.services.structure import CohortIndex, Grid, ModelStructure
from circov.utils.transforms import logcosh

log = logging.getLogger("circov.hazards")

Parameterization = Literal["whitened", "centered"]


def _is_concrete(x: Any) -> bool:
    return not isinstance(x, jax.core.Tracer)


def ar1_innovation_map(x_logit: Any, n: int) -> jax.Array:
    """Lower-triangular R with R Rᵀ equal to the AR1 correlation matrix for rho = tanh(x/2)."""
    rho = jnp.tanh(x_logit / 2.0)
    innovation_sd = 1.0 / jnp.cosh(x_logit / 2.0)  # sqrt(1 - rho²)
    lower = jnp.eye(n) - rho * jnp.eye(n, k=-1)
    d = jnp.concatenate([jnp.ones(1), jnp.full((n - 1,), innovation_sd)])
    return solve_triangular(lower, jnp.diag(d), lower=True)


def ar1_precision(x_logit: Any, n: int) -> jax.Array:
    """Stationary unit-variance AR1 precision as a dense jax array."""
    if n == 1:
        return jnp.ones((1, 1))
    rho = jnp.tanh(x_logit / 2.0)
    inv_one_minus_rho2 = jnp.cosh(x_logit / 2.0) ** 2
    main = jnp.full((n,), 1.0 + rho * rho).at[0].set(1.0).at[-1].set(1.0)
    off = jnp.eye(n, k=1) + jnp.eye(n, k=-1)
    return inv_one_minus_rho2 * (jnp.diag(main) - rho * off)


def ar1_log_det(x_logit: Any, n: int) -> Any:
    """log det of the AR1 precision: -(n-1) log(1 - rho²) = 2 (n-1) logcosh(x/2)."""
    return 2.0 * (n - 1) * logcosh(x_logit / 2.0)


@dataclass(frozen=True, eq=False)
class ProcessModel:
    structure: ModelStructure
    layout: ParameterLayout
    shares: ShareField
    parameterization: Parameterization = "whitened"

    @property
    def grid(self) -> Grid:
        return self.structure.grid

    @classmethod
    def build(
        cls, structure: ModelStructure, shares: ShareField, parameterization: Parameterization = "whitened"
    ) -> ProcessModel:
        return cls(
            structure=structure,
            layout=ParameterLayout.for_structure(structure, shares),
            shares=shares,
            parameterization=parameterization,
        )

    @cached_property
    def evaluate(self) -> Callable[[Any], tuple[HazardField, CoverageField]]:
        """Jitted parameter vector -> (hazards, coverage)."""

        def run(x: Any) -> tuple[HazardField, CoverageField]:
            hazards = compute_hazards(x, self)
            return hazards, compute_survivor_and_cif(hazards)

        return jax.jit(run)


def realize_effects(values: dict[str, Any], model: ProcessModel) -> dict[str, Any]:
    """Map stored latent blocks to realized effects (spline-weight space for age)."""
    if model.parameterization == "centered":
        return {e.name: values[e.name] for e in EFFECTS}
    n_j, n_t = model.structure.n_basis, model.grid.n_time
    out: dict[str, Any] = {}
    for e in EFFECTS:
        sigma = jnp.exp(values[f"log_sigma_{e.name}"])
        raw = values[e.name]
        rho = [values[f"logit_rho_{r}"] for r in e.rhos]
        if e.structure == "icar":
            out[e.name] = sigma * raw
        elif e.structure == "ar1_age":
            out[e.name] = sigma * (ar1_innovation_map(rho[0], n_j) @ raw)
        elif e.structure == "ar1_time":
            out[e.name] = sigma * (ar1_innovation_map(rho[0], n_t) @ raw)
        elif e.structure == "age_space":
            out[e.name] = sigma * (ar1_innovation_map(rho[0], n_j) @ raw)
        elif e.structure == "age_time":
            out[e.name] = sigma * (ar1_innovation_map(rho[0], n_j) @ raw @ ar1_innovation_map(rho[1], n_t).T)
        else:
            out[e.name] = sigma * (raw @ ar1_innovation_map(rho[0], n_t).T)
    return out


class HazardField(NamedTuple):
    tmic: Any
    mmc_nt_tilde: Any
    mmc_nt: Any
    mmc_t: Any
    tmc: Any
    uc: Any

    def elementary(self) -> Any:
        return jnp.stack([self.mmc_nt, self.mmc_t, self.tmc])

    def to_numpy(self) -> HazardField:
        return HazardField(*(np.asarray(a, dtype=float) for a in self))


class CoverageField(NamedTuple):
    survivor: Any  # (N_I, N_A, N_T)
    incidence: Any  # (3, N_I, N_A, N_T), elementary type order
    cif: Any

    def _compose(self, arr: Any, ctype: CircType) -> Any:
        idx = [ELEMENTARY_TYPES.index(k) for k in COMPOSITION[ctype]]
        return sum(arr[k] for k in idx)

    def cif_of(self, ctype: CircType) -> Any:
        return self._compose(self.cif, ctype)

    def incidence_of(self, ctype: CircType) -> Any:
        return self._compose(self.incidence, ctype)

    def to_numpy(self) -> CoverageField:
        return CoverageField(*(np.asarray(a, dtype=float) for a in self))


def hazards_from_rates(tmic: Any, mmc_nt_tilde: Any, share: Any) -> HazardField:
    """Apply the ordering and split rules to TMIC and unconditional MMC-nT probabilities."""
    tmic = jnp.asarray(tmic)
    tilde = jnp.asarray(mmc_nt_tilde)
    share = jnp.asarray(share)
    return HazardField(
        tmic=tmic,
        mmc_nt_tilde=tilde,
        mmc_nt=tilde * (1.0 - tmic),
        mmc_t=share * tmic,
        tmc=(1.0 - share) * tmic,
        uc=(1.0 - tmic) * (1.0 - tilde),
    )


def _check_finite(named: dict[str, Any]) -> None:
    for name, v in named.items():
        if _is_concrete(v) and not bool(np.all(np.isfinite(np.asarray(v)))):
            raise NumericalError("Non-finite value in hazard predictor", {"block": name})


def compute_hazards(params: Any, model: ProcessModel) -> HazardField:
    grid = model.grid
    values = model.layout.unpack(params)
    _check_finite(values)
    r = realize_effects(values, model)
    w = jnp.asarray(model.structure.basis.design)

    tmic_logit = (
        values["tmic_intercept"]
        + r["tmic_space"][:, None]
        + (w @ r["tmic_age"])[None, :]
        + (w @ r["tmic_age_space"]).T
    )
    paed_logit = (
        values["paed_intercept"]
        + r["paed_space"][:, None]
        + (w @ r["paed_age"])[None, :]
        + (w @ r["paed_age_space"]).T
    )
    adult_logit = (
        values["adult_intercept"]
        + r["adult_space"][:, None, None]
        + (w @ r["adult_age"])[None, :, None]
        + r["adult_time"][None, None, :]
        + (w @ r["adult_age_space"]).T[:, :, None]
        + (w @ r["adult_age_time"])[None, :, :]
        + r["adult_space_time"][:, None, :]
    )
    _check_finite({"tmic_predictor": tmic_logit, "paed_predictor": paed_logit, "adult_predictor": adult_logit})

    shape = (grid.n_region, grid.n_age, grid.n_time)
    ages = np.arange(grid.n_age)
    on = jnp.asarray((ages <= grid.terminal_age).astype(float))[None, :, None]
    paed = jnp.asarray(ages < grid.paediatric_cutoff)[None, :, None]

    tmic = jnp.broadcast_to(sigmoid(tmic_logit)[:, :, None], shape) * on
    tilde = jnp.where(paed, sigmoid(paed_logit)[:, :, None], sigmoid(adult_logit)) * on
    share = model.shares.values(values.get("logit_share", jnp.zeros(0)))[:, None, :]
    return hazards_from_rates(tmic, tilde, share)


def _to_cohort(arr: Any, index: CohortIndex, fill: float) -> Any:
    gathered = arr[:, index.age_of, index.time_of]
    return jnp.where(index.valid[None], gathered, fill)


def _from_cohort(arr: Any, index: CohortIndex) -> Any:
    n_age = index.cohort_of.shape[0]
    return arr[:, np.arange(n_age)[:, None], index.cohort_of]


def compute_survivor_and_cif(hazards: HazardField, grid: Grid | None = None) -> CoverageField:
    """Survivor product and exclusive cumulative incidence along every cohort diagonal.

    S at (a, t) is the probability of being uncircumcised entering the step at age a;
    CIF sums incidence over the cohort's earlier steps, so S + CIF^MC = 1.
    """
    n_region, n_age, n_time = hazards.uc.shape
    if grid is not None and (grid.n_region, grid.n_age, grid.n_time) != (n_region, n_age, n_time):
        raise StructuralError("Hazard field does not match grid", {"shape": [n_region, n_age, n_time]})
    index = CohortIndex.for_shape(n_age, n_time)

    uc = _to_cohort(jnp.asarray(hazards.uc), index, 1.0)
    through = jnp.cumprod(uc, axis=1)
    survivor_c = jnp.concatenate([jnp.ones_like(uc[:, :1, :]), through[:, :-1, :]], axis=1)
    survivor = _from_cohort(survivor_c, index)

    incidence = hazards.elementary() * survivor[None]
    inc_c = jnp.stack([_to_cohort(incidence[k], index, 0.0) for k in range(len(ELEMENTARY_TYPES))])
    cif_c = jnp.cumsum(inc_c, axis=2) - inc_c
    cif = jnp.stack([_from_cohort(cif_c[k], index) for k in range(len(ELEMENTARY_TYPES))])
    return CoverageField(survivor=survivor, incidence=incidence, cif=cif)


@dataclass(frozen=True, eq=False)
class ProgrammeIndex:
    """Gather plan from (region, age, time) cells to programme count rows."""

    region: np.ndarray
    time: np.ndarray
    age_mask: np.ndarray  # (n_rows, N_A)
    observed: np.ndarray

    @property
    def n_rows(self) -> int:
        return int(self.observed.size)

    @classmethod
    def build(cls, counts: Sequence[ProgrammeCount], grid: Grid) -> ProgrammeIndex:
        n = len(counts)
        region = np.zeros(n, dtype=np.int64)
        time = np.zeros(n, dtype=np.int64)
        mask = np.zeros((n, grid.n_age))
        observed = np.zeros(n)
        for k, c in enumerate(counts):
            if c.region not in grid.region_index:
                raise StructuralError("Programme region outside grid", {"region": c.region})
            if c.age_lo > c.age_hi or c.age_hi > grid.age_max:
                raise StructuralError("Age band outside grid", {"band": [c.age_lo, c.age_hi], "age_max": grid.age_max})
            region[k] = grid.region_index[c.region]
            time[k] = grid.time_index(c.year)
            mask[k, c.age_lo : c.age_hi + 1] = 1.0
            observed[k] = c.count
        return cls(region=region, time=time, age_mask=mask, observed=observed)


def expected_programme_counts(
    coverage: CoverageField, hazards: HazardField, population: Any, index: ProgrammeIndex
) -> Any:
    """μ = Σ_{a in band} P·S·(λ^MMC-nT + λ^MMC-T) for every programme row."""
    if index.n_rows == 0:
        return jnp.zeros(0)
    cell = jnp.asarray(population) * coverage.survivor * (hazards.mmc_nt + hazards.mmc_t)
    gathered = cell[index.region, :, index.time]
    return jnp.sum(gathered * index.age_mask, axis=1)
