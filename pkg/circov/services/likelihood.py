from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln

from circov.core.config import PriorConfig
from circov.models.common import OUTCOMES, Outcome
from circov.services.hazards import (
    CoverageField,
    HazardField,
    ProcessModel,
    ProgrammeIndex,
    _is_concrete,
    ar1_log_det,
    ar1_precision,
    compute_hazards,
    compute_survivor_and_cif,
    expected_programme_counts,
)
from circov.services.parameters import EFFECTS, INTERCEPTS
from circov.services.survey import EventCountCube

log = logging.getLogger("circov.likelihood")

PROB_FLOOR = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class PosteriorSpec:
    model: ProcessModel
    cube: EventCountCube
    population: np.ndarray
    programme: ProgrammeIndex | None = None
    priors: PriorConfig = field(default_factory=PriorConfig)
    use_programme: bool = True

    @property
    def includes_programme(self) -> bool:
        return self.use_programme and self.programme is not None and self.programme.n_rows > 0

    @cached_property
    def icar_constants(self) -> tuple[np.ndarray, float]:
        """Soft-constrained ICAR precision and its log-determinant."""
        icar = self.model.structure.icar
        scale = self.priors.soft_constraint_scale
        return icar.constrained(scale).toarray(), icar.log_det_constrained(scale)


def _warn_clamped(counts: np.ndarray, probs: np.ndarray, label: str) -> None:
    bad = np.argwhere((counts > 0) & (probs <= PROB_FLOOR))
    if bad.size:
        log.warning("probability_clamped", extra={"term": label, "cells": bad[:10].tolist(), "n_cells": len(bad)})


def survey_nll(cube: EventCountCube | np.ndarray, coverage: CoverageField, hazards: HazardField) -> Any:
    """Negative weighted survey log pseudo-likelihood; zero-count cells contribute nothing."""
    counts = cube.counts if isinstance(cube, EventCountCube) else np.asarray(cube)
    s = coverage.survivor
    probs = {
        Outcome.TMIC: s * hazards.tmic,
        Outcome.MMC_NT: s * hazards.mmc_nt,
        Outcome.RIGHT_CENSORED: s,
        Outcome.LEFT_CENSORED: 1.0 - s,
    }
    total = 0.0
    for k, outcome in enumerate(OUTCOMES):
        n = counts[k]
        if not np.any(n):
            continue
        p = probs[outcome]
        if _is_concrete(p):
            _warn_clamped(n, np.asarray(p), outcome.value)
        logp = jnp.log(jnp.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))
        total = total + jnp.sum(jnp.where(n > 0, n * logp, 0.0))
    return -total


def programme_nll(observed: Any, expected: Any) -> Any:
    """Poisson negative log-likelihood Σ μ − y log μ + log Γ(y+1), real-valued y allowed."""
    y = jnp.asarray(observed, dtype=float)
    mu = jnp.asarray(expected)
    if y.size == 0:
        return jnp.asarray(0.0)
    if _is_concrete(mu):
        _warn_clamped(np.asarray(y), np.asarray(mu), "programme")
    log_mu = jnp.log(jnp.clip(mu, PROB_FLOOR, None))
    return jnp.sum(mu - jnp.where(y > 0, y * log_mu, 0.0) + gammaln(y + 1.0))


def _normal_nlp(x: Any, mean: Any, sd: Any) -> Any:
    z = (x - mean) / sd
    return 0.5 * jnp.sum(z * z) + jnp.sum(jnp.log(sd) * jnp.ones_like(z)) + 0.5 * _LOG_2PI * jnp.size(z)


def prior_nlp(params: Any, spec: PosteriorSpec) -> Any:
    model, priors = spec.model, spec.priors
    values = model.layout.unpack(params)
    q_icar, logdet_icar = spec.icar_constants
    n_i, n_j, n_t = model.grid.n_region, model.structure.n_basis, model.grid.n_time

    total = 0.0
    for name in INTERCEPTS:
        total = total + _normal_nlp(values[name], 0.0, priors.intercept_sd)

    for e in EFFECTS:
        raw = values[e.name]
        log_sigma = values[f"log_sigma_{e.name}"]
        rhos = [values[f"logit_rho_{r}"] for r in e.rhos]
        size = raw.size

        # exponential prior on sigma plus the log-sigma Jacobian
        total = total + priors.sigma_rate * jnp.exp(log_sigma) - math.log(priors.sigma_rate) - log_sigma
        for x in rhos:
            total = total + _normal_nlp(x, priors.rho_logit_mean, priors.rho_logit_sd)

        if model.parameterization == "whitened":
            if e.structure == "icar":
                quad = raw @ q_icar @ raw
                logdet = logdet_icar
            elif e.structure == "age_space":
                quad = jnp.sum(raw * (raw @ q_icar))
                logdet = n_j * logdet_icar
            elif e.structure == "space_time":
                quad = jnp.sum(raw * (q_icar @ raw))
                logdet = n_t * logdet_icar
            else:
                quad = jnp.sum(raw * raw)
                logdet = 0.0
            total = total + 0.5 * quad - 0.5 * logdet + 0.5 * size * _LOG_2PI
            continue

        tau = jnp.exp(-2.0 * log_sigma)
        if e.structure == "icar":
            quad = raw @ q_icar @ raw
            logdet = logdet_icar
        elif e.structure in ("ar1_age", "ar1_time"):
            n = raw.shape[0]
            quad = raw @ ar1_precision(rhos[0], n) @ raw
            logdet = ar1_log_det(rhos[0], n)
        elif e.structure == "age_space":
            quad = jnp.sum(raw * (ar1_precision(rhos[0], n_j) @ raw @ q_icar))
            logdet = n_i * ar1_log_det(rhos[0], n_j) + n_j * logdet_icar
        elif e.structure == "age_time":
            quad = jnp.sum(raw * (ar1_precision(rhos[0], n_j) @ raw @ ar1_precision(rhos[1], n_t)))
            logdet = n_t * ar1_log_det(rhos[0], n_j) + n_j * ar1_log_det(rhos[1], n_t)
        else:
            quad = jnp.sum(raw * (q_icar @ raw @ ar1_precision(rhos[0], n_t)))
            logdet = n_t * logdet_icar + n_i * ar1_log_det(rhos[0], n_t)
        total = total + 0.5 * tau * quad - 0.5 * (size * jnp.log(tau) + logdet) + 0.5 * size * _LOG_2PI

    if "logit_share" in model.layout:
        shares = model.shares
        total = total + _normal_nlp(values["logit_share"], shares.mu, shares.sigma)
    return total


def data_terms(params: Any, spec: PosteriorSpec) -> tuple[Any, Any]:
    hazards = compute_hazards(params, spec.model)
    coverage = compute_survivor_and_cif(hazards)
    survey = survey_nll(spec.cube, coverage, hazards)
    programme = jnp.asarray(0.0)
    if spec.includes_programme:
        assert spec.programme is not None
        mu = expected_programme_counts(coverage, hazards, spec.population, spec.programme)
        programme = programme_nll(spec.programme.observed, mu)
    return survey, programme


def total_nlp(params: Any, spec: PosteriorSpec) -> Any:
    survey, programme = data_terms(params, spec)
    return survey + programme + prior_nlp(params, spec)


class PosteriorObjective:
    """Jitted negative log posterior with gradient and Hessian, on numpy float64 vectors."""

    def __init__(self, spec: PosteriorSpec) -> None:
        self.spec = spec
        self.layout = spec.model.layout
        self.size = self.layout.size

        def f(x: Any) -> Any:
            return total_nlp(x, spec)

        self._value = jax.jit(f)
        self._grad = jax.jit(jax.grad(f))
        self._value_and_grad = jax.jit(jax.value_and_grad(f))
        self._hessian = jax.jit(jax.hessian(f))

    def value(self, x: np.ndarray) -> float:
        return float(self._value(jnp.asarray(x, dtype=float)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._grad(jnp.asarray(x, dtype=float)), dtype=float)

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        v, g = self._value_and_grad(jnp.asarray(x, dtype=float))
        return float(v), np.asarray(g, dtype=float)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._hessian(jnp.asarray(x, dtype=float)), dtype=float)

    def breakdown(self, x: np.ndarray) -> dict[str, float]:
        survey, programme = data_terms(jnp.asarray(x, dtype=float), self.spec)
        return {
            "survey": float(survey),
            "programme": float(programme),
            "prior": float(prior_nlp(jnp.asarray(x, dtype=float), self.spec)),
        }
