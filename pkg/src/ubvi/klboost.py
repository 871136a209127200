"""KL gradient-boosting baselines and their degeneracy detectors.

BVI adds components by minimizing an entropy-regularized reverse-KL
component objective against the current density mixture; BVI+ stabilizes
the mixture inside the log with a small additive constant.  Component
optimizations whose log variance escapes a finite cap (or whose objective
diverges) are flagged degenerate, which is exactly the failure mode the
regularized objective admits on heavy-tailed targets or poor
initializations.  A single-Gaussian reverse-KL fit serves as the standard
VI baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics as diag
from .boosting import RunTrace, default_anchor
from .expfam import GaussComponent, log_h
from .stochopt import AdamConfig, MCObjective, NonFiniteGradient, adam_maximize

__all__ = [
    "BviConfig",
    "DensityMixture",
    "bvi_component_objective",
    "fit_bvi_component",
    "kl_weight_update",
    "run_bvi",
    "run_vi",
    "project_simplex",
    "DEGENERACY_CAP",
]

DEGENERACY_CAP = float(np.log(1e6))
OBJECTIVE_FLOOR = -1e10
INIT_SCORE_SAMPLES = 100


def invsqrt_schedule(n: int) -> float:
    return 1.0 / np.sqrt(n)


@dataclass(frozen=True)
class BviConfig:
    n_components: int
    reg_schedule: object = invsqrt_schedule  # n (1-based) -> r_n > 0
    stabilization_eps: float = 0.0
    adam: AdamConfig = field(default_factory=AdamConfig)
    weight_opt_iters: int = 2000
    weight_samples: int = 1000
    init_trials: int = 10_000
    seed: int = 0
    degeneracy_cap: float = DEGENERACY_CAP
    diag_samples: int = 10_000

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.stabilization_eps < 0:
            raise ValueError("stabilization_eps must be >= 0")


@dataclass(frozen=True)
class DensityMixture:
    """Ordinary weighted mixture of diagonal Gaussian densities."""

    components: tuple[GaussComponent, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.shape[0] != len(self.components):
            raise ValueError("weights must match components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise ValueError("weights must lie on the simplex")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def _log_terms(self, pts: np.ndarray) -> np.ndarray:
        logs = np.full((pts.shape[0], self.n), -np.inf)
        for i, c in enumerate(self.components):
            if self.weights[i] > 0.0:
                logs[:, i] = np.log(self.weights[i]) + 2.0 * log_h(c, pts)
        return logs

    def log_pdf(self, x: np.ndarray) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        logs = self._log_terms(pts)
        m = logs.max(axis=1)
        out = m + np.log(np.exp(logs - m[:, None]).sum(axis=1))
        return float(out[0]) if single else out

    def grad_log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        logs = self._log_terms(pts)
        m = logs.max(axis=1, keepdims=True)
        resp = np.exp(logs - m)
        resp /= resp.sum(axis=1, keepdims=True)
        out = np.zeros_like(pts)
        for i, c in enumerate(self.components):
            if self.weights[i] > 0.0:
                out += resp[:, i : i + 1] * (-(pts - c.mean) * np.exp(-c.log_var))
        return out[0] if single else out

    def sample(self, seed, n_samples: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.n, size=n_samples, p=self.weights)
        z = rng.standard_normal((n_samples, self.dim))
        out = np.empty_like(z)
        for i in np.unique(idx):
            c = self.components[i]
            rows = idx == i
            out[rows] = c.mean + np.exp(0.5 * c.log_var) * z[rows]
        return out


def bvi_component_objective(
    target,
    q_n: DensityMixture | None,
    h: GaussComponent,
    r: float,
    eps: float,
    seed,
    n_samples: int,
) -> tuple[float, np.ndarray]:
    """Entropy-regularized component objective (to be minimized) and gradient.

    Monte Carlo average over x ~ h^2 of
    ``r log h^2(x) + log(q_n(x) + eps) - log p(x)``; the mixture term is
    absent for the first component.  The gradient is pathwise through
    x = mean + sd * z and touches the target only through grad_log_p, so an
    additive constant in log_p shifts the value alone.
    """
    if r <= 0:
        raise ValueError("regularization must be positive")
    rng = np.random.default_rng(seed)
    d = h.dim
    z = rng.standard_normal((n_samples, d))
    sd = np.exp(0.5 * h.log_var)
    x = h.mean + sd * z
    inv_var = np.exp(-h.log_var)
    diff = x - h.mean

    lh = log_h(h, x)
    lp = np.asarray(target.log_p(x), dtype=float)
    glp = np.asarray(target.grad_log_p(x), dtype=float)
    if q_n is None or q_n.n == 0:
        lqe = np.zeros(x.shape[0])
        gq = np.zeros_like(x)
    else:
        lq = np.asarray(q_n.log_pdf(x), dtype=float)
        if eps > 0.0:
            lqe = np.logaddexp(lq, np.log(eps))
            gq = np.exp(lq - lqe)[:, None] * q_n.grad_log_pdf(x)
        else:
            lqe = lq
            gq = q_n.grad_log_pdf(x)

    value = float(np.mean(2.0 * r * lh + lqe - lp))

    dv_dx = -r * diff * inv_var + gq - glp
    dtheta_mean = r * diff * inv_var
    dtheta_logv = 0.5 * r * (diff**2 * inv_var - 1.0)
    g_mean = (dv_dx + dtheta_mean).mean(axis=0)
    g_logv = (dv_dx * 0.5 * diff + dtheta_logv).mean(axis=0)
    return value, np.concatenate([g_mean, g_logv])


def fit_bvi_component(
    target,
    q_n: DensityMixture | None,
    r: float,
    eps: float,
    init: GaussComponent,
    adam: AdamConfig,
    seed,
    fix_mean: bool = False,
    cap: float = DEGENERACY_CAP,
):
    """Minimize the component objective from init; detect degeneracy.

    Returns (component, AdamResult, degenerate).  Degeneracy means a log
    variance escaped the cap or the objective dived below the floor while
    the optimizer was still running.
    """
    d = init.dim
    mask = np.concatenate([np.zeros(d), np.ones(d)]) if fix_mean else np.ones(2 * d)

    def estimate(params, s):
        h = GaussComponent(params[:d], params[d:])
        value, grad = bvi_component_objective(target, q_n, h, r, eps, s, adam.grad_samples)
        return -value, -grad * mask

    def stop(params, value):
        if np.any(params[d:] > cap):
            return "logvar_cap"
        if -value < OBJECTIVE_FLOOR:
            return "objective_divergence"
        return ""

    res = adam_maximize(
        MCObjective(estimate=estimate),
        np.concatenate([init.mean, init.log_var]),
        adam,
        seed,
        stop_condition=stop,
    )
    comp = GaussComponent(res.params[:d], res.params[d:])
    return comp, res, res.stopped_early


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sorted threshold)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.shape[0] + 1)
    rho = k[u - css / k > 0][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def kl_weight_update(
    q_components: tuple[GaussComponent, ...],
    current_weights: np.ndarray,
    target,
    iters: int,
    seed,
    n_samples: int = 1000,
    base_step: float = 1.0,
) -> np.ndarray:
    """Simplex-projected SGD on the mixture weights of KL(q_w || p)."""
    comps = tuple(q_components)
    k = len(comps)
    if k == 1:
        return np.ones(1)
    dim = comps[0].dim
    means = np.array([c.mean for c in comps])
    sds = np.array([np.exp(0.5 * c.log_var) for c in comps])
    w = project_simplex(np.asarray(current_weights, dtype=float))
    rng = np.random.default_rng(seed)
    for t in range(iters):
        z = rng.standard_normal((k, n_samples, dim))
        x = (means[:, None, :] + sds[:, None, :] * z).reshape(-1, dim)
        qw = DensityMixture(comps, np.maximum(w, 1e-12) / np.maximum(w, 1e-12).sum())
        vals = np.asarray(qw.log_pdf(x)) - np.asarray(target.log_p(x))
        grad = vals.reshape(k, n_samples).mean(axis=1) + 1.0
        w = project_simplex(w - base_step / np.sqrt(1.0 + t) * grad)
    return w


def _init_bvi_candidates(
    target, q_n: DensityMixture | None, r: float, eps: float, trials: int, seed, anchor
) -> GaussComponent:
    """Best-of-trials initialization scored by a cheap objective estimate."""
    rng = np.random.default_rng(seed)
    dim = target.dim
    if q_n is None or q_n.n == 0:
        means = anchor + 3.0 * rng.standard_normal((trials, dim))
        log_vars = np.repeat(rng.standard_normal(trials)[:, None], dim, axis=1)
    else:
        idx = rng.choice(q_n.n, size=trials, p=q_n.weights)
        cm = np.array([c.mean for c in q_n.components])[idx]
        cv = np.array([np.exp(c.log_var) for c in q_n.components])[idx]
        means = cm + 4.0 * np.sqrt(cv) * rng.standard_normal((trials, dim))
        log_vars = np.log(cv) + rng.standard_normal(trials)[:, None]
    scores = np.empty(trials)
    chunk = 2000
    for lo in range(0, trials, chunk):
        hi = min(lo + chunk, trials)
        mu, lv = means[lo:hi], log_vars[lo:hi]
        z = rng.standard_normal((hi - lo, INIT_SCORE_SAMPLES, dim))
        x = mu[:, None, :] + np.exp(0.5 * lv)[:, None, :] * z
        flat = x.reshape(-1, dim)
        lp = np.asarray(target.log_p(flat)).reshape(hi - lo, INIT_SCORE_SAMPLES)
        diff2 = (x - mu[:, None, :]) ** 2 * np.exp(-lv)[:, None, :]
        lh = -0.25 * np.sum(np.log(2.0 * np.pi) + lv[:, None, :] + diff2, axis=2)
        if q_n is None or q_n.n == 0:
            lqe = 0.0
        else:
            lq = np.asarray(q_n.log_pdf(flat)).reshape(hi - lo, INIT_SCORE_SAMPLES)
            lqe = np.logaddexp(lq, np.log(eps)) if eps > 0 else lq
        scores[lo:hi] = np.mean(2.0 * r * lh + lqe - lp, axis=1)
    if not np.any(np.isfinite(scores)):
        raise NonFiniteGradient("all BVI initialization candidates non-finite")
    best = int(np.nanargmin(scores))
    return GaussComponent(means[best], log_vars[best])


def run_bvi(target, cfg: BviConfig) -> tuple[DensityMixture | None, RunTrace]:
    """Component-then-weight KL boosting loop with degeneracy flags.

    A degenerate component optimization is recorded and its component
    discarded, leaving the approximation unchanged for that iteration
    (without stabilization this is how the method collapses to plain VI).
    """
    method = "bvi-plus" if cfg.stabilization_eps > 0 else "bvi"
    root = np.random.default_rng(cfg.seed)
    trace = RunTrace(method=method, seed=cfg.seed, target=target.name)
    anchor = default_anchor(target, int(root.integers(2**62)))
    comps: list[GaussComponent] = []
    weights = np.zeros(0)
    q: DensityMixture | None = None
    cpu = 0.0
    for n in range(1, cfg.n_components + 1):
        seeds = root.integers(2**62, size=4)
        r_n = float(cfg.reg_schedule(n))
        t0 = time.process_time()
        degenerate = 0
        try:
            init = _init_bvi_candidates(
                target, q, r_n, cfg.stabilization_eps, cfg.init_trials,
                int(seeds[0]), anchor,
            )
            comp, res, bad = fit_bvi_component(
                target, q, r_n, cfg.stabilization_eps, init, cfg.adam,
                int(seeds[1]), cap=cfg.degeneracy_cap,
            )
            degenerate = int(bad)
        except NonFiniteGradient:
            degenerate = 1
            comp = None
        if not degenerate and comp is not None:
            comps.append(comp)
            if len(comps) == 1:
                weights = np.ones(1)
            else:
                padded = np.concatenate(
                    [weights * (1.0 - 1.0 / len(comps)), [1.0 / len(comps)]]
                )
                weights = kl_weight_update(
                    tuple(comps), padded, target, cfg.weight_opt_iters,
                    int(seeds[2]), n_samples=cfg.weight_samples,
                    base_step=cfg.adam.base_step,
                )
            q = DensityMixture(tuple(comps), weights)
        cpu += time.process_time() - t0

        trace.n.append(n)
        trace.degenerate.append(degenerate)
        trace.cpu_time_s.append(cpu)
        trace.weights.append(weights.copy())
        trace.components.append(
            {"mean": comp.mean.tolist(), "log_var": comp.log_var.tolist()}
            if comp is not None
            else {}
        )
        trace.d.append(np.zeros(0))
        trace.d_rel_se.append(np.zeros(0))
        if q is not None:
            snap = diag.divergence_snapshot(target, q, int(seeds[3]), cfg.diag_samples)
        else:
            snap = {k: float("nan") for k in
                    ("hell_hat", "hell_tilde", "hell_tilde_se", "fwd_kl",
                     "fwd_kl_se", "rev_kl")}
        trace.hell_hat.append(snap["hell_hat"])
        trace.hell_tilde.append(snap["hell_tilde"])
        trace.hell_tilde_se.append(snap["hell_tilde_se"])
        trace.fwd_kl.append(snap["fwd_kl"])
        trace.fwd_kl_se.append(snap["fwd_kl_se"])
        trace.rev_kl.append(snap["rev_kl"])
        trace.objective.append(float("nan"))
    return q, trace


def run_vi(target, adam: AdamConfig, seed) -> tuple[GaussComponent, RunTrace]:
    """Reverse-KL fit of a single diagonal Gaussian (standard VI baseline)."""
    root = np.random.default_rng(seed)
    trace = RunTrace(method="vi", seed=seed, target=target.name)
    anchor = default_anchor(target, int(root.integers(2**62)))
    init = GaussComponent(anchor, np.zeros(target.dim))
    t0 = time.process_time()
    comp, res, bad = fit_bvi_component(
        target, None, 1.0, 0.0, init, adam, int(root.integers(2**62))
    )
    cpu = time.process_time() - t0
    q = DensityMixture((comp,), np.ones(1))
    snap = diag.divergence_snapshot(
        target, q, int(root.integers(2**62)), 10_000
    )
    trace.n.append(1)
    trace.degenerate.append(int(bad))
    trace.cpu_time_s.append(cpu)
    trace.weights.append(np.ones(1))
    trace.components.append({"mean": comp.mean.tolist(), "log_var": comp.log_var.tolist()})
    trace.d.append(np.zeros(0))
    trace.d_rel_se.append(np.zeros(0))
    trace.hell_hat.append(snap["hell_hat"])
    trace.hell_tilde.append(snap["hell_tilde"])
    trace.hell_tilde_se.append(snap["hell_tilde_se"])
    trace.fwd_kl.append(snap["fwd_kl"])
    trace.fwd_kl_se.append(snap["fwd_kl_se"])
    trace.rev_kl.append(snap["rev_kl"])
    trace.objective.append(-float(res.values[-1]))
    return comp, trace
