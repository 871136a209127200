"""Diagonal-Gaussian square-root components.

A component is a function h whose square is a Gaussian density with
diagonal covariance, so that ``exp(2 * log_h(c, x))`` integrates to one.
Pairwise inner products (affinities) and normalized products of two
components are available in closed form through the exponential-family
natural parametrization, which is what makes the boosting updates cheap.
Optimization elsewhere works on the (mean, log variance) parametrization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GaussComponent",
    "log_h",
    "affinity",
    "product_component",
    "sample_sq",
    "grad_log_h",
    "component_to_json",
    "component_from_json",
]

_LOG_PI = float(np.log(np.pi))


@dataclass(frozen=True)
class GaussComponent:
    """Square-root Gaussian component with diagonal covariance.

    ``mean`` and ``log_var`` are the optimization parameters; the natural
    parameter (per coordinate: mean/var, -1/(2 var)) is derived on demand.
    """

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        log_var = np.atleast_1d(np.asarray(self.log_var, dtype=float))
        if mean.shape != log_var.shape or mean.ndim != 1:
            raise ValueError("mean and log_var must be 1-D arrays of equal length")
        mean.flags.writeable = False
        log_var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def natural(self) -> np.ndarray:
        """Natural parameter, stacked as (eta1, eta2) of shape (2, dim)."""
        var = np.exp(self.log_var)
        return np.stack([self.mean / var, -0.5 / var])


def natural_to_moment(natural: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convert (2, dim) natural parameters back to (mean, log_var)."""
    eta1, eta2 = natural
    var = -0.5 / eta2
    return eta1 * var, np.log(var)


def log_partition(natural: np.ndarray) -> float:
    """Log partition A(eta) for the squared component, base measure 1."""
    eta1, eta2 = natural
    return float(np.sum(-(eta1**2) / (4.0 * eta2) + 0.5 * (_LOG_PI - np.log(-eta2))))


def log_h(c: GaussComponent, x: np.ndarray) -> np.ndarray | float:
    """Log of the component function: half the Gaussian log density at x.

    Accepts a single point of shape (dim,) or a batch (n, dim); returns a
    scalar or an (n,) array accordingly.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != c.dim:
        raise ValueError(f"point dim {pts.shape[1]} != component dim {c.dim}")
    z2 = (pts - c.mean) ** 2 * np.exp(-c.log_var)
    out = -0.25 * np.sum(np.log(2.0 * np.pi) + c.log_var + z2, axis=1)
    return float(out[0]) if single else out


def grad_log_h(c: GaussComponent, x: np.ndarray) -> np.ndarray:
    """Exact gradient of log_h with respect to (mean, log_var).

    Returns shape (2*dim,) for a single point or (n, 2*dim) for a batch,
    ordered as all mean partials followed by all log_var partials.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    inv_var = np.exp(-c.log_var)
    diff = pts - c.mean
    d_mean = 0.5 * diff * inv_var
    d_logv = 0.25 * (diff**2 * inv_var - 1.0)
    out = np.concatenate([d_mean, d_logv], axis=1)
    return out[0] if single else out


def affinity(a: GaussComponent, b: GaussComponent) -> float:
    """Inner product <a, b> of two components, in (0, 1], closed form."""
    if a.dim != b.dim:
        raise ValueError("components must share a dimension")
    return float(np.exp(log_affinity_arrays(a.mean, a.log_var, b.mean, b.log_var)))


def log_affinity_arrays(
    mean_a: np.ndarray,
    log_var_a: np.ndarray,
    mean_b: np.ndarray,
    log_var_b: np.ndarray,
) -> np.ndarray:
    """Log affinity for broadcastable parameter arrays (..., dim).

    Evaluates A((eta_a + eta_b)/2) - (A(eta_a) + A(eta_b))/2 coordinatewise
    in a form that stays finite for widely separated components.
    """
    va = np.exp(log_var_a)
    vb = np.exp(log_var_b)
    vbar = 0.5 * (va + vb)
    quad = 0.125 * (mean_a - mean_b) ** 2 / vbar
    log_shape = 0.25 * (log_var_a + log_var_b) - 0.5 * np.log(vbar)
    return np.sum(log_shape - quad, axis=-1)


def affinity_grad(a: GaussComponent, b: GaussComponent) -> tuple[float, np.ndarray]:
    """Affinity <a, b> and its gradient with respect to a's (mean, log_var)."""
    z = affinity(a, b)
    eta_bar = 0.5 * (a.natural + b.natural)
    t_bar = _mean_suff_stats(eta_bar)
    t_a = _mean_suff_stats(a.natural)
    inv_var = np.exp(-a.log_var)
    # d eta / d theta for theta = (mean, log_var)
    dz_deta1 = 0.5 * (t_bar[0] - t_a[0])
    dz_deta2 = 0.5 * (t_bar[1] - t_a[1])
    d_mean = z * dz_deta1 * inv_var
    d_logv = z * (dz_deta1 * (-a.mean * inv_var) + dz_deta2 * (0.5 * inv_var))
    return z, np.concatenate([d_mean, d_logv])


def _mean_suff_stats(natural: np.ndarray) -> np.ndarray:
    # grad of A(eta): expected sufficient statistics (x, x^2) per coordinate
    eta1, eta2 = natural
    var = -0.5 / eta2
    mean = eta1 * var
    return np.stack([mean, mean**2 + var])


def product_component(a: GaussComponent, b: GaussComponent) -> GaussComponent:
    """Component whose square is the normalized product a*b / <a, b>."""
    if a.dim != b.dim:
        raise ValueError("components must share a dimension")
    return GaussComponent(*natural_to_moment(0.5 * (a.natural + b.natural)))


def sample_sq(c: GaussComponent, seed, n: int) -> np.ndarray:
    """Draw n iid points from the squared component's Gaussian density."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, c.dim))
    return c.mean + np.exp(0.5 * c.log_var) * z


def component_to_json(c: GaussComponent) -> dict:
    return {"mean": c.mean.tolist(), "log_var": c.log_var.tolist()}


def component_from_json(record: dict | str) -> GaussComponent:
    if isinstance(record, str):
        record = json.loads(record)
    return GaussComponent(np.asarray(record["mean"]), np.asarray(record["log_var"]))
