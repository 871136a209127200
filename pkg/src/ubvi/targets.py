"""Built-in target densities, each known only up to normalization.

Every target carries an unnormalized log density with gradient; the
1-D/2-D synthetic targets additionally carry an exact sampler, a dense
quadrature grid, and the true log normalizer (computed analytically or by
quadrature).  The boosting drivers use only log_p and grad_log_p; the
normalizer exists solely so known-normalization diagnostics are testable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, gammaln

__all__ = [
    "QuadGrid",
    "TargetDensity",
    "LogisticModel",
    "make_cauchy",
    "make_banana",
    "make_gauss_mixture",
    "make_logistic",
    "synth_logistic_data",
    "load_csv_dataset",
]


@dataclass(frozen=True)
class QuadGrid:
    """Dense quadrature grid with trapezoid weights (1-D or 2-D tensor)."""

    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        axes = tuple(np.asarray(ax, dtype=float) for ax in self.axes)
        for ax in axes:
            ax.flags.writeable = False
        object.__setattr__(self, "axes", axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def points(self) -> np.ndarray:
        """All grid nodes, shape (n_nodes, ndim)."""
        if self.ndim == 1:
            return self.axes[0][:, None]
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights matching ``points`` row order."""
        ws = [_trapezoid_weights(ax) for ax in self.axes]
        if self.ndim == 1:
            return ws[0]
        out = ws[0]
        for w in ws[1:]:
            out = np.multiply.outer(out, w)
        return out.ravel()

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))


def _trapezoid_weights(ax: np.ndarray) -> np.ndarray:
    w = np.zeros_like(ax)
    d = np.diff(ax)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalized target log density with gradient.

    log_p and grad_log_p accept a point (dim,) or a batch (n, dim).
    log_norm is log of the integral of exp(log_p) when known, else None.
    """

    dim: int
    log_p: Callable[[np.ndarray], np.ndarray]
    grad_log_p: Callable[[np.ndarray], np.ndarray]
    exact_sampler: Optional[Callable[[object, int], np.ndarray]] = None
    quad_grid: Optional[QuadGrid] = None
    log_norm: Optional[float] = None
    name: str = "target"


def _batched(fn_2d):
    """Wrap a (n, dim) -> (n,) or (n, dim) function to also accept (dim,)."""

    def wrapped(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return fn_2d(x[None, :])[0]
        return fn_2d(x)

    return wrapped


def make_cauchy() -> TargetDensity:
    """Standard univariate Cauchy, log p(x) = -log(1 + x^2) up to a constant."""

    def log_p(x):
        return -np.log1p(x[:, 0] ** 2)

    def grad_log_p(x):
        t = x[:, 0]
        return (-2.0 * t / (1.0 + t**2))[:, None]

    def sampler(seed, n):
        rng = np.random.default_rng(seed)
        u = rng.random(n)
        return np.tan(np.pi * (u - 0.5))[:, None]

    grid = QuadGrid((_graded_axis(10_000.0, 20.0, 120_000, 50_000),))
    return TargetDensity(
        dim=1,
        log_p=_batched(log_p),
        grad_log_p=_batched(grad_log_p),
        exact_sampler=sampler,
        quad_grid=grid,
        log_norm=float(np.log(np.pi)),
        name="cauchy",
    )


def _graded_axis(hi: float, core: float, n_core: int, n_tail: int) -> np.ndarray:
    """Symmetric axis: linear core plus log-spaced tails out to +-hi."""
    core_ax = np.linspace(-core, core, n_core)
    tail = np.geomspace(core, hi, n_tail + 1)[1:]
    return np.concatenate([-tail[::-1], core_ax, tail])


def make_banana(b: float = 0.1, sigma1_sq: float = 100.0) -> TargetDensity:
    """Curved 2-D banana target with curvature b and first-axis variance sigma1_sq.

    log p(x) = -x1^2/(2 sigma1_sq) - (x2 + b (x1^2 - sigma1_sq))^2 / 2, so the
    second coordinate has mean zero by construction.
    """
    if sigma1_sq <= 0:
        raise ValueError("sigma1_sq must be positive")
    s1 = float(np.sqrt(sigma1_sq))

    def log_p(x):
        x1, x2 = x[:, 0], x[:, 1]
        curved = x2 + b * (x1**2 - sigma1_sq)
        return -0.5 * x1**2 / sigma1_sq - 0.5 * curved**2

    def grad_log_p(x):
        x1, x2 = x[:, 0], x[:, 1]
        curved = x2 + b * (x1**2 - sigma1_sq)
        g1 = -x1 / sigma1_sq - curved * 2.0 * b * x1
        return np.stack([g1, -curved], axis=1)

    def sampler(seed, n):
        rng = np.random.default_rng(seed)
        y1 = s1 * rng.standard_normal(n)
        y2 = rng.standard_normal(n)
        return np.stack([y1, y2 - b * (y1**2 - sigma1_sq)], axis=1)

    reach = 4.0 * s1
    x2_lo = -b * (reach**2 - sigma1_sq) - 6.0
    x2_hi = b * sigma1_sq + 6.0
    grid = QuadGrid(
        (np.linspace(-reach, reach, 961), np.linspace(x2_lo, x2_hi, 2401))
    )
    return TargetDensity(
        dim=2,
        log_p=_batched(log_p),
        grad_log_p=_batched(grad_log_p),
        exact_sampler=sampler,
        quad_grid=grid,
        log_norm=float(np.log(2.0 * np.pi * s1)),
        name="banana",
    )


def make_gauss_mixture(
    weights: np.ndarray, means: np.ndarray, variances: np.ndarray
) -> TargetDensity:
    """Univariate Gaussian mixture target with exact (normalized) log density."""
    w = np.asarray(weights, dtype=float)
    mu = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    if w.ndim != 1 or w.shape != mu.shape or w.shape != var.shape:
        raise ValueError("weights, means, variances must be equal-length vectors")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must lie on the simplex")
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    log_w = np.log(w)

    def comp_logpdf(x):
        t = x[:, 0][:, None]
        return -0.5 * (np.log(2.0 * np.pi * var) + (t - mu) ** 2 / var)

    def log_p(x):
        lp = comp_logpdf(x) + log_w
        m = lp.max(axis=1)
        return m + np.log(np.exp(lp - m[:, None]).sum(axis=1))

    def grad_log_p(x):
        t = x[:, 0][:, None]
        lp = comp_logpdf(x) + log_w
        m = lp.max(axis=1, keepdims=True)
        resp = np.exp(lp - m)
        resp /= resp.sum(axis=1, keepdims=True)
        return (resp * (-(t - mu) / var)).sum(axis=1)[:, None]

    def sampler(seed, n):
        rng = np.random.default_rng(seed)
        idx = rng.choice(w.shape[0], size=n, p=w)
        return (mu[idx] + np.sqrt(var[idx]) * rng.standard_normal(n))[:, None]

    sd = np.sqrt(var)
    lo = float((mu - 10.0 * sd).min())
    hi = float((mu + 10.0 * sd).max())
    grid = QuadGrid((np.linspace(lo, hi, 200_001),))
    return TargetDensity(
        dim=1,
        log_p=_batched(log_p),
        grad_log_p=_batched(grad_log_p),
        exact_sampler=sampler,
        quad_grid=grid,
        log_norm=0.0,
        name="gauss_mix",
    )


@dataclass(frozen=True)
class LogisticModel:
    """Logistic regression data with a heavy-tailed multivariate-t prior."""

    features: np.ndarray
    labels: np.ndarray
    prior_scale: np.ndarray
    prior_dof: float = 2.0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        S = np.asarray(self.prior_scale, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be (n, d) with matching labels")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be in {-1, +1}")
        if S.shape != (X.shape[1], X.shape[1]):
            raise ValueError("prior_scale dimension mismatch with features")
        np.linalg.cholesky(S)  # raises if not SPD
        for arr in (X, y, S):
            arr.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "prior_scale", S)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def minibatch(self, seed, batch_size: int) -> tuple["LogisticModel", float]:
        """Uniform data subsample plus the likelihood scale n/batch_size.

        Feeding the pair to make_logistic gives an unbiased stochastic
        version of the full posterior's data term; per-iteration seeds come
        from the optimizer's seed stream, so minibatching stays a choice of
        the objective, off by default at this data scale.
        """
        n = self.features.shape[0]
        if not 1 <= batch_size <= n:
            raise ValueError("batch_size must be in [1, n]")
        idx = np.random.default_rng(seed).choice(n, size=batch_size, replace=False)
        sub = LogisticModel(
            features=self.features[idx],
            labels=self.labels[idx],
            prior_scale=self.prior_scale,
            prior_dof=self.prior_dof,
        )
        return sub, n / batch_size


def make_logistic(model: LogisticModel, lik_scale: float = 1.0) -> TargetDensity:
    """Unnormalized Bayesian logistic-regression posterior with t prior.

    lik_scale multiplies the data log likelihood (used with
    LogisticModel.minibatch for unbiased subsampled evaluations).
    """
    D = model.dim
    nu = model.prior_dof
    S = model.prior_scale
    S_inv = np.linalg.inv(S)
    yx = model.labels[:, None] * model.features  # (n, d)

    def log_p(theta):
        act = theta @ yx.T  # (m, n)
        loglik = -np.logaddexp(0.0, -act).sum(axis=1)
        return lik_scale * loglik + log_t_prior(theta, S, nu)

    def grad_log_p(theta):
        act = theta @ yx.T
        glik = expit(-act) @ yx
        quad = np.einsum("md,de,me->m", theta, S_inv, theta)
        gprior = -(nu + D) / (nu + quad)[:, None] * (theta @ S_inv)
        return lik_scale * glik + gprior

    return TargetDensity(
        dim=D,
        log_p=_batched(log_p),
        grad_log_p=_batched(grad_log_p),
        exact_sampler=None,
        quad_grid=None,
        log_norm=None,
        name="logistic",
    )


def log_t_prior(theta: np.ndarray, scale: np.ndarray, dof: float = 2.0) -> np.ndarray:
    """Normalized multivariate-t log density at zero location."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    D = theta.shape[1]
    S_inv = np.linalg.inv(scale)
    quad = np.einsum("md,de,me->m", theta, S_inv, theta)
    _, logdet = np.linalg.slogdet(scale)
    const = (
        gammaln(0.5 * (dof + D))
        - gammaln(0.5 * dof)
        - 0.5 * D * np.log(dof * np.pi)
        - 0.5 * logdet
    )
    return const - 0.5 * (dof + D) * np.log1p(quad / dof)


def synth_logistic_data(seed, n: int = 20, dim: int = 2) -> LogisticModel:
    """Synthetic logistic data drawn from the model itself.

    The prior scale is A'A with standard normal A, the true parameter is a
    draw from the t prior, features are standard normal, and labels follow
    the logistic likelihood.  Fully determined by the seed.
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    S = A.T @ A
    # t_2 draw: scaled normal over sqrt of chi^2/dof
    z = np.linalg.cholesky(S) @ rng.standard_normal(dim)
    g = rng.chisquare(2.0)
    theta_star = z / np.sqrt(g / 2.0)
    X = rng.standard_normal((n, dim))
    p_pos = 1.0 / (1.0 + np.exp(-(X @ theta_star)))
    y = np.where(rng.random(n) < p_pos, 1.0, -1.0)
    return LogisticModel(features=X, labels=y, prior_scale=S)


def load_csv_dataset(path: str, subsample: int | None = 20, seed=0) -> LogisticModel:
    """Load a labeled CSV (header f1..fD,label; labels {-1,+1} or {0,1}).

    Subsamples ``subsample`` rows with the given seed when the file is
    larger; the prior scale is drawn as A'A from the same seed, matching
    the synthetic protocol.
    """
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    X, y = data[:, :-1], data[:, -1]
    y = np.where(y <= 0.0, -1.0, 1.0)
    rng = np.random.default_rng(seed)
    if subsample is not None and subsample < X.shape[0]:
        idx = rng.choice(X.shape[0], size=subsample, replace=False)
        X, y = X[idx], y[idx]
    A = rng.standard_normal((X.shape[1], X.shape[1]))
    return LogisticModel(features=X, labels=y, prior_scale=A.T @ A)
