from __future__ import annotations

from typing import Any

import jax.numpy as jnp
import numpy as np
from scipy.special import logit

from circov.core.errors import DomainError


def rho_from_logit(x: float | np.ndarray) -> np.ndarray:
    """2/(1+exp(-x)) - 1, written as tanh(x/2)."""
    return np.tanh(np.asarray(x, dtype=float) / 2.0)


def logit_from_rho(rho: float) -> float:
    if not -1.0 < rho < 1.0:
        raise DomainError("Correlation must lie in (-1, 1)", {"rho": rho})
    return float(2.0 * np.arctanh(rho))


def logcosh(x: Any) -> Any:
    return jnp.logaddexp(x, -x) - jnp.log(2.0)


def empirical_logit(events: float, exposure: float, lo: float = 1e-4, hi: float = 0.5) -> float:
    # crude per-step rate, kept away from 0 so the start is finite
    rate = events / exposure if exposure > 0 else 0.0
    return float(logit(np.clip(rate, lo, hi)))
