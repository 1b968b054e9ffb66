from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import scipy.linalg
from cachetools import LRUCache
from scipy.optimize import line_search, minimize

from circov.core.config import InferenceConfig
from circov.core.errors import DiagnosticError, NumericalError
from circov.services.parameters import ParameterLayout, initial_parameters
from circov.services.likelihood import PosteriorSpec

log = logging.getLogger("circov.inference")

_CURVATURE_EPS = 1e-10


class Objective(Protocol):
    size: int

    def value(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass
class Convergence:
    status: str  # converged_gradient | converged_objective | max_iter | line_search_failed
    iterations: int
    grad_max: float
    evaluations: int
    trace: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status.startswith("converged")


@dataclass
class Curvature:
    hessian: np.ndarray
    mode: str
    cholesky: np.ndarray | None = None  # lower factor of the Hessian
    failure: dict[str, Any] | None = None


@dataclass
class FitResult:
    mode: np.ndarray
    nlp_at_mode: float
    convergence: Convergence
    curvature: Curvature
    layout: ParameterLayout | None = None


@dataclass
class PosteriorSamples:
    draws: np.ndarray  # (n_samples, n_params)
    seed: int
    layout_hash: str | None = None

    @property
    def n_samples(self) -> int:
        return int(self.draws.shape[0])


@dataclass
class GradientReport:
    errors: np.ndarray
    max_error: float
    worst_index: int
    worst_block: str | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


class _CachedEvaluator:
    """Memoizes value/gradient pairs by point so the line search never recomputes."""

    def __init__(self, objective: Objective, maxsize: int = 64) -> None:
        self._objective = objective
        self._cache: LRUCache = LRUCache(maxsize=maxsize)
        self.evaluations = 0

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        key = np.ascontiguousarray(x, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is None:
            self.evaluations += 1
            hit = self._objective.value_and_grad(np.array(x, dtype=float))
            self._cache[key] = hit
        return hit

    def value(self, x: np.ndarray) -> float:
        return self(x)[0]

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self(x)[1]


def _two_loop(g: np.ndarray, memory: deque[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in reversed(memory):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a, s, y))
    if memory:
        s, y = memory[-1]
        q *= (s @ y) / (y @ y)
    else:
        q /= max(1.0, float(np.max(np.abs(g))))
    for rho, a, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _lbfgs(
    objective: Objective, x0: np.ndarray, settings: InferenceConfig
) -> tuple[np.ndarray, float, np.ndarray, Convergence, deque]:
    evaluate = _CachedEvaluator(objective)
    x = np.array(x0, dtype=float)
    f, g = evaluate(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError("Objective not finite at the initial point", {"value": f})

    memory: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=settings.history)
    trace = [f]
    status = "max_iter"
    old_f: float | None = None
    it = 0
    for it in range(1, settings.max_iter + 1):
        if np.max(np.abs(g)) < settings.tol_grad:
            status = "converged_gradient"
            it -= 1
            break
        d = -_two_loop(g, memory)
        if g @ d >= 0:
            memory.clear()
            d = -g / max(1.0, float(np.max(np.abs(g))))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            alpha, *_ = line_search(
                evaluate.value, evaluate.gradient, x, d, gfk=g, old_fval=f, old_old_fval=old_f,
                c1=settings.c1, c2=settings.c2, maxiter=30,
            )
        if alpha is None and memory:
            # retry once from steepest descent with a fresh memory
            memory.clear()
            d = -g / max(1.0, float(np.max(np.abs(g))))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                alpha, *_ = line_search(
                    evaluate.value, evaluate.gradient, x, d, gfk=g, old_fval=f,
                    c1=settings.c1, c2=settings.c2, maxiter=30,
                )
        if alpha is None:
            status = "line_search_failed"
            break

        x_new = x + alpha * d
        f_new, g_new = evaluate(x_new)
        s, y = x_new - x, g_new - g
        if s @ y > _CURVATURE_EPS * np.sqrt((s @ s) * (y @ y)):
            memory.append((s, y))
        change = abs(f - f_new) / max(abs(f), abs(f_new), 1.0)
        old_f, x, f, g = f, x_new, f_new, g_new
        trace.append(f)
        if it % 25 == 0:
            log.info("optimizer_progress", extra={"iteration": it, "value": f, "grad_max": float(np.max(np.abs(g)))})
        if np.max(np.abs(g)) < settings.tol_grad:
            status = "converged_gradient"
            break
        if change < settings.tol_obj:
            status = "converged_objective"
            break

    conv = Convergence(
        status=status,
        iterations=it,
        grad_max=float(np.max(np.abs(g))),
        evaluations=evaluate.evaluations,
        trace=trace,
    )
    return x, f, g, conv, memory


def _lbfgsb(objective: Objective, x0: np.ndarray, settings: InferenceConfig) -> tuple[np.ndarray, float, np.ndarray, Convergence, Any]:
    evaluate = _CachedEvaluator(objective)
    f0, _ = evaluate(x0)
    if not np.isfinite(f0):
        raise NumericalError("Objective not finite at the initial point", {"value": f0})
    trace = [f0]
    res = minimize(
        evaluate,
        np.array(x0, dtype=float),
        jac=True,
        method="L-BFGS-B",
        callback=lambda xk: trace.append(evaluate.value(xk)),
        options={"maxiter": settings.max_iter, "ftol": settings.tol_obj, "gtol": settings.tol_grad, "maxcor": settings.history},
    )
    f, g = evaluate(res.x)
    grad_max = float(np.max(np.abs(g)))
    if grad_max < settings.tol_grad:
        status = "converged_gradient"
    elif res.success:
        status = "converged_objective"
    elif res.nit >= settings.max_iter:
        status = "max_iter"
    else:
        status = "line_search_failed"
    conv = Convergence(status=status, iterations=int(res.nit), grad_max=grad_max, evaluations=evaluate.evaluations, trace=trace)
    return np.asarray(res.x, dtype=float), f, g, conv, res.hess_inv


def _newton_refine(
    objective: Any, x0: np.ndarray, settings: InferenceConfig, previous: Convergence
) -> tuple[np.ndarray, float, np.ndarray, Convergence]:
    """Trust-region Newton steps on the exact Hessian, continuing where the quasi-Newton phase stopped."""
    evaluate = _CachedEvaluator(objective)
    trace = list(previous.trace)
    res = minimize(
        evaluate,
        np.array(x0, dtype=float),
        jac=True,
        hess=objective.hessian,
        method="trust-exact",
        callback=lambda xk: trace.append(evaluate.value(xk)),
        options={"gtol": settings.tol_grad, "maxiter": settings.refine_max_iter},
    )
    x = np.asarray(res.x, dtype=float)
    f, g = evaluate(x)
    grad_max = float(np.max(np.abs(g)))
    if grad_max < settings.tol_grad:
        status = "converged_gradient"
    elif res.nit >= settings.refine_max_iter:
        status = "max_iter"
    else:
        status = "line_search_failed"
    conv = Convergence(
        status=status,
        iterations=previous.iterations + int(res.nit),
        grad_max=grad_max,
        evaluations=previous.evaluations + evaluate.evaluations,
        trace=trace,
    )
    log.info(
        "newton_refined",
        extra={"status": status, "steps": int(res.nit), "value": f, "grad_max": grad_max, "from": previous.status},
    )
    return x, f, g, conv


def _bfgs_from_memory(n: int, memory: deque[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    if not memory:
        return np.eye(n)
    s, y = memory[0]
    b = np.eye(n) * ((y @ y) / (s @ y))
    for s, y in memory:
        bs = b @ s
        b = b - np.outer(bs, bs) / (s @ bs) + np.outer(y, y) / (y @ s)
    return b


def finite_difference_hessian(objective: Objective, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    n = x.size
    hess = np.zeros((n, n))
    for i in range(n):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = step
        hess[:, i] = (objective.gradient(x + e) - objective.gradient(x - e)) / (2.0 * step)
    return 0.5 * (hess + hess.T)


def _curvature(
    objective: Objective, x: np.ndarray, settings: InferenceConfig, memory: Any, layout: ParameterLayout | None
) -> Curvature:
    mode = settings.hessian_mode
    if mode == "auto":
        mode = "dense" if x.size <= settings.dense_threshold else "bfgs"
    if mode == "dense" and hasattr(objective, "hessian"):
        hess = objective.hessian(x)  # type: ignore[attr-defined]
    elif mode in ("dense", "finite_difference"):
        hess = finite_difference_hessian(objective, x)
    elif isinstance(memory, deque):
        hess = _bfgs_from_memory(x.size, memory)
    else:
        hess = np.linalg.inv(memory.todense())
    hess = 0.5 * (hess + hess.T)

    try:
        chol = scipy.linalg.cholesky(hess, lower=True)
        return Curvature(hessian=hess, mode=mode, cholesky=chol)
    except np.linalg.LinAlgError:
        eig, vec = np.linalg.eigh(hess)
        direction = vec[:, 0]
        index = int(np.argmax(np.abs(direction)))
        failure = {
            "smallest_eigenvalue": float(eig[0]),
            "index": index,
            "block": layout.block_of(index) if layout is not None else None,
        }
        log.warning("curvature_not_positive_definite", extra=failure)
        return Curvature(hessian=hess, mode=mode, failure=failure)


def _can_refine(objective: Objective, x: np.ndarray, settings: InferenceConfig) -> bool:
    return settings.refine == "newton" and hasattr(objective, "hessian") and x.size <= settings.dense_threshold


def optimize(
    objective: Objective,
    init: np.ndarray,
    settings: InferenceConfig | None = None,
    layout: ParameterLayout | None = None,
) -> FitResult:
    settings = settings or InferenceConfig()
    init = np.asarray(init, dtype=float)
    if not np.all(np.isfinite(init)):
        raise NumericalError("Initial point is not finite")
    layout = layout or getattr(objective, "layout", None)

    if settings.optimizer == "lbfgsb":
        x, f, _, conv, memory = _lbfgsb(objective, init, settings)
    else:
        x, f, _, conv, memory = _lbfgs(objective, init, settings)
    if conv.status != "converged_gradient" and _can_refine(objective, x, settings):
        x, f, _, conv = _newton_refine(objective, x, settings, conv)
    log.info(
        "optimizer_finished",
        extra={"status": conv.status, "iterations": conv.iterations, "value": f, "grad_max": conv.grad_max},
    )
    if not conv.converged:
        log.warning("optimizer_not_converged", extra={"status": conv.status})
    curvature = _curvature(objective, x, settings, memory, layout)
    return FitResult(mode=x, nlp_at_mode=f, convergence=conv, curvature=curvature, layout=layout)


def initial_point(spec: PosteriorSpec) -> np.ndarray:
    model = spec.model
    return initial_parameters(model.layout, spec.cube.counts, model.grid, spec.priors, model.shares)


def laplace_samples(fit: FitResult, n: int, seed: int) -> PosteriorSamples:
    """Draws from N(mode, H⁻¹); draw k uses its own Philox stream spawned from `seed`."""
    if n < 1:
        raise DiagnosticError("Number of samples must be at least 1", {"n": n})
    chol = fit.curvature.cholesky
    if chol is None:
        raise DiagnosticError("Curvature at the mode is not positive definite", fit.curvature.failure or {})
    dim = fit.mode.size
    z = np.empty((n, dim))
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        z[k] = np.random.Generator(np.random.Philox(child)).standard_normal(dim)
    # H = L Lᵀ, so Lᵀ x = z gives cov(x) = H⁻¹
    offsets = scipy.linalg.solve_triangular(chol.T, z.T, lower=False).T
    draws = fit.mode[None, :] + offsets
    return PosteriorSamples(
        draws=draws,
        seed=seed,
        layout_hash=fit.layout.hash if fit.layout is not None else None,
    )


def gradient_check(
    objective: Objective,
    point: np.ndarray,
    h: float = 1e-5,
    tolerance: float = 1e-5,
    layout: ParameterLayout | None = None,
) -> GradientReport:
    """Central-difference check of the gradient, coordinate by coordinate.

    Steps are scaled by |f|^(1/3) on top of the per-coordinate scale.
    """
    x = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericalError("Gradient check point is not finite")
    layout = layout or getattr(objective, "layout", None)
    grad = objective.gradient(x)
    scale = max(1.0, abs(objective.value(x))) ** (1.0 / 3.0)
    fd = np.zeros_like(x)
    for i in range(x.size):
        step = h * scale * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        fd[i] = (objective.value(x + e) - objective.value(x - e)) / (2.0 * step)
    errors = np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1.0)
    worst = int(np.argmax(errors)) if errors.size else 0
    report = GradientReport(
        errors=errors,
        max_error=float(errors.max()) if errors.size else 0.0,
        worst_index=worst,
        worst_block=layout.block_of(worst) if layout is not None and errors.size else None,
        tolerance=tolerance,
    )
    log.info("gradient_check", extra={"max_error": report.max_error, "block": report.worst_block})
    return report
