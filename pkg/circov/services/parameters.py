"""Flat parameter layout, MMC-T share configuration and starting values."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Literal, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.nn import sigmoid

from circov.clients.data_files import DataFileClient, parse_records
from circov.core.config import PriorConfig
from circov.core.errors import StructuralError, ValidationFailed
from circov.models.common import OUTCOMES, Outcome, ShareRule
from circov.services.structure import Grid, ModelStructure
from circov.utils.transforms import empirical_logit
from circov.utils.years import YearSpan

log = logging.getLogger("circov.parameters")

SHARE_COLUMNS: tuple[str, ...] = ("regions", "year_from", "year_to", "mode", "value", "mu", "sigma")

BlockKind = Literal["intercept", "effect", "log_sigma", "logit_rho", "logit_share"]
EffectStructure = Literal["icar", "ar1_age", "ar1_time", "age_space", "age_time", "space_time"]


@dataclass(frozen=True)
class EffectSpec:
    name: str
    structure: EffectStructure
    rhos: tuple[str, ...] = ()


INTERCEPTS: tuple[str, ...] = ("tmic_intercept", "paed_intercept", "adult_intercept")

EFFECTS: tuple[EffectSpec, ...] = (
    EffectSpec("tmic_space", "icar"),
    EffectSpec("paed_space", "icar"),
    EffectSpec("adult_space", "icar"),
    EffectSpec("tmic_age", "ar1_age", ("tmic_age",)),
    EffectSpec("paed_age", "ar1_age", ("paed_age",)),
    EffectSpec("adult_age", "ar1_age", ("adult_age",)),
    EffectSpec("adult_time", "ar1_time", ("adult_time",)),
    EffectSpec("tmic_age_space", "age_space", ("tmic_age_space",)),
    EffectSpec("paed_age_space", "age_space", ("paed_age_space",)),
    EffectSpec("adult_age_space", "age_space", ("adult_age_space",)),
    EffectSpec("adult_age_time", "age_time", ("adult_age_time_age", "adult_age_time_time")),
    EffectSpec("adult_space_time", "space_time", ("adult_space_time",)),
)

EFFECT_BY_NAME: dict[str, EffectSpec] = {e.name: e for e in EFFECTS}


@dataclass(frozen=True)
class Block:
    name: str
    kind: BlockKind
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True, eq=False)
class ShareField:
    """MMC-T share p over (region, internal time): fixed cells plus logit-normal free cells."""

    fixed: np.ndarray  # (N_I, N_T)
    free_cells: np.ndarray  # (n_free, 2) region/time indices, row-major order
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def n_free(self) -> int:
        return int(self.free_cells.shape[0])

    def values(self, logit_share: Any) -> jax.Array:
        base = jnp.asarray(self.fixed)
        if self.n_free == 0:
            return base
        return base.at[self.free_cells[:, 0], self.free_cells[:, 1]].set(sigmoid(logit_share))

    @classmethod
    def zeros(cls, grid: Grid) -> ShareField:
        return cls(
            fixed=np.zeros((grid.n_region, grid.n_time)),
            free_cells=np.zeros((0, 2), dtype=np.int64),
            mu=np.zeros(0),
            sigma=np.ones(0),
        )


def build_share_field(rules: Sequence[ShareRule], grid: Grid) -> ShareField:
    """Apply share rules in order (later rules override earlier ones); default is p = 0."""
    mode = np.zeros((grid.n_region, grid.n_time), dtype=np.int8)  # 0 fixed, 1 free
    fixed = np.zeros((grid.n_region, grid.n_time))
    mu = np.zeros((grid.n_region, grid.n_time))
    sigma = np.ones((grid.n_region, grid.n_time))
    unknown: set[str] = set()
    for rule in rules:
        if rule.regions == "*":
            rows = np.arange(grid.n_region)
        else:
            unknown.update(r for r in rule.regions if r not in grid.region_index)
            rows = np.array([grid.region_index[r] for r in rule.regions if r in grid.region_index], dtype=np.int64)
        span = YearSpan(rule.year_from, rule.year_to).clip(grid.history_start, grid.year_max)
        if span is None or rows.size == 0:
            continue
        cols = np.arange(span.first, span.last + 1) - grid.history_start
        cell = np.ix_(rows, cols)
        if rule.mode == "logit_normal":
            mode[cell] = 1
            mu[cell] = rule.mu
            sigma[cell] = rule.sigma
        else:
            mode[cell] = 0
            fixed[cell] = 0.0 if rule.mode == "fixed_zero" else rule.value
    if unknown:
        raise ValidationFailed("Share rules refer to unknown regions", {"regions": sorted(unknown)})
    free = np.argwhere(mode == 1)
    fixed[mode == 1] = 0.0
    log.info("shares_built", extra={"rules": len(rules), "free_cells": len(free)})
    return ShareField(
        fixed=fixed,
        free_cells=free.astype(np.int64),
        mu=mu[mode == 1],
        sigma=sigma[mode == 1],
    )


def load_share_rules(path: Path, client: DataFileClient) -> list[ShareRule]:
    frame = client.read_table(path, SHARE_COLUMNS)
    rows = []
    for row in frame.to_dict("records"):
        regions = str(row["regions"]).strip()
        row["regions"] = "*" if regions in ("", "*") else [r.strip() for r in regions.split(";") if r.strip()]
        rows.append(row)
    return parse_records(rows, ShareRule, source=str(path))


class ParameterLayout:
    """Named blocks laid end to end in one flat vector."""

    def __init__(self, blocks: Sequence[tuple[str, BlockKind, tuple[int, ...]]]) -> None:
        placed: list[Block] = []
        offset = 0
        for name, kind, shape in blocks:
            block = Block(name=name, kind=kind, shape=tuple(int(s) for s in shape), offset=offset)
            placed.append(block)
            offset += block.size
        self.blocks: tuple[Block, ...] = tuple(placed)
        self.size = offset
        self._by_name = {b.name: b for b in self.blocks}
        if len(self._by_name) != len(self.blocks):
            raise StructuralError("Duplicate block names in parameter layout")

    @classmethod
    def for_structure(cls, structure: ModelStructure, shares: ShareField) -> ParameterLayout:
        grid = structure.grid
        n_i, n_j, n_t = grid.n_region, structure.n_basis, grid.n_time
        shapes: dict[EffectStructure, tuple[int, ...]] = {
            "icar": (n_i,),
            "ar1_age": (n_j,),
            "ar1_time": (n_t,),
            "age_space": (n_j, n_i),
            "age_time": (n_j, n_t),
            "space_time": (n_i, n_t),
        }
        blocks: list[tuple[str, BlockKind, tuple[int, ...]]] = [(name, "intercept", ()) for name in INTERCEPTS]
        blocks += [(e.name, "effect", shapes[e.structure]) for e in EFFECTS]
        blocks += [(f"log_sigma_{e.name}", "log_sigma", ()) for e in EFFECTS]
        blocks += [(f"logit_rho_{r}", "logit_rho", ()) for e in EFFECTS for r in e.rhos]
        if shares.n_free:
            blocks.append(("logit_share", "logit_share", (shares.n_free,)))
        return cls(blocks)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Block:
        try:
            return self._by_name[name]
        except KeyError:
            raise StructuralError("Unknown parameter block", {"block": name}) from None

    @cached_property
    def hash(self) -> str:
        payload = json.dumps([[b.name, b.kind, list(b.shape)] for b in self.blocks], separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def check(self, x: Any) -> None:
        if x.shape[-1] != self.size:
            raise StructuralError(
                "Parameter vector does not match layout", {"expected": self.size, "got": int(x.shape[-1])}
            )

    def unpack(self, x: Any) -> dict[str, Any]:
        """Block views by name; scalars come back 0-d. Works on numpy and jax arrays."""
        self.check(x)
        out = {}
        for b in self.blocks:
            v = x[b.slice]
            out[b.name] = v.reshape(b.shape) if b.shape else v[0]
        return out

    def pack(self, values: Mapping[str, Any]) -> np.ndarray:
        x = np.zeros(self.size)
        for name, v in values.items():
            b = self[name]
            arr = np.asarray(v, dtype=float)
            if arr.size != b.size:
                raise StructuralError("Block value has wrong size", {"block": name, "expected": b.size, "got": arr.size})
            x[b.slice] = arr.ravel()
        return x

    def block_of(self, index: int) -> str:
        for b in self.blocks:
            if b.offset <= index < b.offset + b.size:
                return b.name
        raise StructuralError("Index outside parameter layout", {"index": index})

    def describe(self) -> list[dict[str, Any]]:
        return [{"name": b.name, "kind": b.kind, "shape": list(b.shape), "offset": b.offset} for b in self.blocks]


def initial_parameters(
    layout: ParameterLayout,
    cube_counts: np.ndarray,
    grid: Grid,
    priors: PriorConfig,
    shares: ShareField,
) -> np.ndarray:
    """Intercepts at logit of crude per-step event rates; effects 0, log sigma 0, logit rho at its prior mean."""
    ages = grid.ages.astype(float)[None, :, None]
    tmic = cube_counts[OUTCOMES.index(Outcome.TMIC)]
    mmc = cube_counts[OUTCOMES.index(Outcome.MMC_NT)]
    rc = cube_counts[OUTCOMES.index(Outcome.RIGHT_CENSORED)]
    # a respondent recorded at age a was exposed at steps 0..a-1, plus step a for events
    steps = (tmic + mmc) * (ages + 1.0) + rc * ages
    paed_steps = (tmic + mmc) * np.minimum(ages + 1.0, grid.paediatric_cutoff) + rc * np.minimum(ages, grid.paediatric_cutoff)
    adult_steps = steps - paed_steps
    is_paed = (grid.ages < grid.paediatric_cutoff)[None, :, None]

    values: dict[str, Any] = {
        "tmic_intercept": empirical_logit(float(tmic.sum()), float(steps.sum())),
        "paed_intercept": empirical_logit(float((mmc * is_paed).sum()), float(paed_steps.sum())),
        "adult_intercept": empirical_logit(float((mmc * ~is_paed).sum()), float(adult_steps.sum())),
    }
    for e in EFFECTS:
        for r in e.rhos:
            values[f"logit_rho_{r}"] = priors.rho_logit_mean
    if shares.n_free:
        values["logit_share"] = shares.mu
    return layout.pack(values)
