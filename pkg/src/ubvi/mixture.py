"""Conic combinations of square-root components and their squared densities.

A SqrtMixture holds components g_i, nonnegative weights lam with
lam' Z lam = 1, the pairwise affinity matrix Z, and a maintained inverse.
Its square is an ordinary mixture over the normalized pairwise products,
which is how sampling works; evaluation goes through the numerically
stabler sum-then-square form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .expfam import (
    GaussComponent,
    affinity,
    component_from_json,
    component_to_json,
    log_h,
    product_component,
)
from .linalg import RIDGE, NearSingularError, block_inverse_extend

__all__ = ["SqrtMixture", "empty_mixture", "log_q", "sample", "extend", "hellinger_to"]

DUPLICATE_AFFINITY = 1.0 - 1e-12


@dataclass(frozen=True)
class SqrtMixture:
    """Unit-norm conic combination of square-root components.

    weights may be None immediately after extension, before the
    fully-corrective solve assigns them.
    """

    components: tuple[GaussComponent, ...]
    weights: np.ndarray | None
    Z: np.ndarray
    Z_inv: np.ndarray
    near_singular: bool = False

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        Z_inv = np.asarray(self.Z_inv, dtype=float)
        for arr in (Z, Z_inv):
            arr.flags.writeable = False
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Z_inv", Z_inv)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            w.flags.writeable = False
            object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim if self.components else 0

    def with_weights(self, weights: np.ndarray) -> "SqrtMixture":
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.n,):
            raise ValueError("weights length must match component count")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        return replace(self, weights=w)

    # convenience density/sampler surface shared with the KL baselines
    def log_pdf(self, x: np.ndarray) -> np.ndarray | float:
        return log_q(self, x)

    def sample(self, seed, n_samples: int) -> np.ndarray:
        return sample(self, seed, n_samples)


def empty_mixture() -> SqrtMixture:
    return SqrtMixture(
        components=(),
        weights=np.zeros(0),
        Z=np.zeros((0, 0)),
        Z_inv=np.zeros((0, 0)),
    )


def _require_weights(m: SqrtMixture):
    if m.weights is None:
        raise ValueError("mixture weights are unset; call with_weights first")
    if m.n == 0:
        raise ValueError("empty mixture has no density")


def log_q(m: SqrtMixture, x: np.ndarray) -> np.ndarray | float:
    """Exact mixture log density 2 log(sum_i lam_i h_i(x)), via log-sum-exp."""
    _require_weights(m)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    active = [i for i in range(m.n) if m.weights[i] > 0.0]
    logs = np.full((pts.shape[0], len(active)), -np.inf)
    for j, i in enumerate(active):
        logs[:, j] = np.log(m.weights[i]) + log_h(m.components[i], pts)
    mx = logs.max(axis=1)
    out = 2.0 * (mx + np.log(np.exp(logs - mx[:, None]).sum(axis=1)))
    return float(out[0]) if single else out


def pair_probabilities(m: SqrtMixture) -> np.ndarray:
    """Pair-selection matrix P_ij = lam_i lam_j Z_ij; sums to one at unit norm."""
    _require_weights(m)
    return np.outer(m.weights, m.weights) * m.Z


def sample(m: SqrtMixture, seed, n_samples: int) -> np.ndarray:
    """Draw iid points from the squared mixture.

    Selects a component pair (i, j) with probability lam_i lam_j Z_ij and
    draws from the normalized product component of the pair.
    """
    _require_weights(m)
    rng = np.random.default_rng(seed)
    probs = pair_probabilities(m).ravel()
    probs = np.clip(probs, 0.0, None)
    probs = probs / probs.sum()
    picks = rng.choice(probs.size, size=n_samples, p=probs)
    out = np.empty((n_samples, m.dim))
    z = rng.standard_normal((n_samples, m.dim))
    for flat in np.unique(picks):
        i, j = divmod(int(flat), m.n)
        comp = (
            m.components[i]
            if i == j
            else product_component(m.components[i], m.components[j])
        )
        rows = picks == flat
        out[rows] = comp.mean + np.exp(0.5 * comp.log_var) * z[rows]
    return out


def extend(m: SqrtMixture, g_new: GaussComponent) -> SqrtMixture:
    """Mixture grown by one component; weights left unset.

    Z gains a row/column of affinities and Z_inv is updated by bordered
    inversion in O(n^2).  A near-duplicate component (affinity within
    1e-12 of one) flags the result and falls back to a ridged dense
    inverse instead of failing.
    """
    if m.n and g_new.dim != m.dim:
        raise ValueError("component dimension mismatch")
    z_col = np.array([affinity(g, g_new) for g in m.components])
    Z = np.empty((m.n + 1, m.n + 1))
    Z[: m.n, : m.n] = m.Z
    Z[: m.n, m.n] = z_col
    Z[m.n, : m.n] = z_col
    Z[m.n, m.n] = 1.0
    near = bool(z_col.size and z_col.max() >= DUPLICATE_AFFINITY)
    try:
        Z_inv = block_inverse_extend(m.Z_inv, z_col, 1.0)
    except NearSingularError:
        near = True
        Z_inv = np.linalg.inv(Z + RIDGE * np.eye(m.n + 1))
    return SqrtMixture(
        components=m.components + (g_new,),
        weights=None,
        Z=Z,
        Z_inv=Z_inv,
        near_singular=near,
    )


def cross_affinity(m: SqrtMixture, other: SqrtMixture) -> float:
    """Inner product <bg, bg'> of two unit-norm mixtures."""
    _require_weights(m)
    _require_weights(other)
    if m.dim != other.dim:
        raise ValueError("mixture dimension mismatch")
    cross = np.array(
        [[affinity(a, b) for b in other.components] for a in m.components]
    )
    return float(m.weights @ cross @ other.weights)


def hellinger_to(m: SqrtMixture, other: SqrtMixture) -> float:
    """Exact Hellinger distance between two squared mixtures."""
    h_sq = 1.0 - cross_affinity(m, other)
    return float(np.sqrt(max(h_sq, 0.0)))


def mixture_to_json(m: SqrtMixture) -> dict:
    _require_weights(m)
    return {
        "kind": "sqrt",
        "components": [component_to_json(c) for c in m.components],
        "weights": m.weights.tolist(),
    }


def mixture_from_json(record: dict | str) -> SqrtMixture:
    """Rebuild a mixture from JSON; Z and its inverse are recomputed."""
    if isinstance(record, str):
        record = json.loads(record)
    m = empty_mixture()
    for comp in record["components"]:
        m = extend(m, component_from_json(comp))
    return m.with_weights(np.asarray(record["weights"], dtype=float))
