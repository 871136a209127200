"""Stochastic maximization of Monte Carlo objectives over component parameters.

ADAM with the decaying step schedule base/sqrt(1+i) and seeded Monte Carlo
gradients.  Objectives whose scale is unknown (anything proportional to the
target's missing normalizer) are optimized through the signed-log scaling,
which divides the gradient by |J|; both branches of the signed-log
objective share that ascent direction, so the transform never flips it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "AdamConfig",
    "MCObjective",
    "AdamResult",
    "adam_maximize",
    "signed_log_gradient",
    "reparam_gradient",
    "save_opt_trace",
]

SIGNED_LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class AdamConfig:
    iters: int = 10_000
    base_step: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_samples: int = 1000

    def __post_init__(self):
        if min(self.iters, self.base_step, self.beta1, self.beta2, self.eps) <= 0:
            raise ValueError("all hyperparameters must be positive")
        if self.grad_samples < 1:
            raise ValueError("grad_samples must be >= 1")

    def step_size(self, i: int) -> float:
        return self.base_step / np.sqrt(1.0 + i)


@dataclass(frozen=True)
class MCObjective:
    """Monte Carlo objective: estimate(params, seed) -> (value, gradient)."""

    estimate: Callable[[np.ndarray, int], tuple[float, np.ndarray]]
    transform_signed_log: bool = False


@dataclass
class AdamResult:
    params: np.ndarray
    values: np.ndarray
    grad_norms: np.ndarray
    step_sizes: np.ndarray
    iterations: int
    stopped_early: bool = False
    stop_reason: str = ""


class NonFiniteGradient(RuntimeError):
    """Gradient estimate became non-finite: degeneracy candidate."""


def signed_log_gradient(value: float, grad: np.ndarray) -> np.ndarray:
    """Gradient of log|J| with sign handling: grad / max(|value|, floor)."""
    return np.asarray(grad) / max(abs(value), SIGNED_LOG_FLOOR)


def adam_maximize(
    obj: MCObjective,
    init: np.ndarray,
    cfg: AdamConfig,
    seed,
    stop_condition: Optional[Callable[[np.ndarray, float], str]] = None,
) -> AdamResult:
    """Run ADAM ascent from init; deterministic given the seed.

    stop_condition, when provided, is checked every iteration and returns
    a nonempty reason string to halt early (used by the degeneracy
    detectors).  A non-finite gradient raises NonFiniteGradient.
    """
    params = np.array(init, dtype=float)
    if not np.all(np.isfinite(params)):
        raise ValueError("init must be finite")
    seeds = np.random.default_rng(seed).integers(0, 2**62, size=cfg.iters)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    values = np.empty(cfg.iters)
    grad_norms = np.empty(cfg.iters)
    step_sizes = np.empty(cfg.iters)
    stopped = False
    reason = ""
    it = 0
    for it in range(cfg.iters):
        value, grad = obj.estimate(params, int(seeds[it]))
        grad = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient at iteration {it}")
        if obj.transform_signed_log:
            grad = signed_log_gradient(value, grad)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad**2
        m_hat = m / (1.0 - cfg.beta1 ** (it + 1))
        v_hat = v / (1.0 - cfg.beta2 ** (it + 1))
        step = cfg.step_size(it)
        params = params + step * m_hat / (np.sqrt(v_hat) + cfg.eps)
        values[it] = value
        grad_norms[it] = np.linalg.norm(grad)
        step_sizes[it] = step
        if stop_condition is not None:
            reason = stop_condition(params, value)
            if reason:
                stopped = True
                break
    k = it + 1
    return AdamResult(
        params=params,
        values=values[:k],
        grad_norms=grad_norms[:k],
        step_sizes=step_sizes[:k],
        iterations=k,
        stopped_early=stopped,
        stop_reason=reason,
    )


def reparam_gradient(
    mean: np.ndarray,
    log_var: np.ndarray,
    log_phi: Callable[[np.ndarray], np.ndarray],
    grad_log_phi: Callable[[np.ndarray], np.ndarray],
    seed,
    n_samples: int,
    scale_shift: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Estimate <h, phi> = E_{h^2}[phi(X)/h(X)] and its parameter gradient.

    Uses the pathwise parametrization x = mean + exp(log_var/2) z with
    common random numbers for value and gradient, and self-normalizes the
    log weights so only the batch-relative magnitudes of log_phi matter.
    The returned value is exp(-scale_shift) times the raw estimate, for
    callers anchoring estimates of an unnormalized phi to a run-wide
    reference scale.

    Returns (value, gradient over concatenated (mean, log_var)).
    """
    mean = np.asarray(mean, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    d = mean.shape[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, d))
    sd = np.exp(0.5 * log_var)
    x = mean + sd * z
    inv_var = np.exp(-log_var)
    diff = x - mean

    lh = -0.25 * np.sum(np.log(2.0 * np.pi) + log_var + diff**2 * inv_var, axis=1)
    lw = np.asarray(log_phi(x), dtype=float) - lh

    shift = lw.max()
    if not np.isfinite(shift):
        return float("nan"), np.full(2 * d, np.nan)
    w = np.exp(lw - shift)
    w_mean = w.mean()
    value = float(np.exp(shift - scale_shift) * w_mean)

    # d lw / d theta at fixed z: chain through x plus the direct h-dependence
    dlw_dx = np.asarray(grad_log_phi(x), dtype=float) + 0.5 * diff * inv_var
    dx_dmean = np.ones_like(diff)
    dx_dlogv = 0.5 * diff
    dlh_dmean = 0.5 * diff * inv_var
    dlh_dlogv = 0.25 * (diff**2 * inv_var - 1.0)
    psi = np.concatenate(
        [
            dlw_dx * dx_dmean - dlh_dmean,
            dlw_dx * dx_dlogv - dlh_dlogv,
        ],
        axis=1,
    )
    grad = np.exp(shift - scale_shift) * (w[:, None] * psi).mean(axis=0)
    return value, grad


def save_opt_trace(result: AdamResult, path: str):
    """Write the optimizer trace CSV (iter, objective_estimate, grad_norm, step_size)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective_estimate", "grad_norm", "step_size"])
        for i in range(result.iterations):
            writer.writerow(
                [
                    i,
                    repr(float(result.values[i])),
                    repr(float(result.grad_norms[i])),
                    repr(float(result.step_sizes[i])),
                ]
            )
