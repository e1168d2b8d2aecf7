"""Probabilistic affine constraints and their deterministic convex surrogates.

A chance constraint ``P(alpha' x <= b) >= delta`` on a Gaussian state is
equivalent to ``alpha' mu + probit(delta) * sqrt(alpha' Sigma alpha) <= b``.
The square root is concave in Sigma, so its first-order expansion around a
reference covariance yields a surrogate that is linear in Sigma, exact at the
reference, and conservative everywhere else:

    ell' Sigma ell + alpha' mu - beta <= 0,
    ell = sqrt(phi / (2 s0)) * alpha,   beta = b - phi * s0 / 2,

with ``phi = probit(delta)`` and ``s0 = sqrt(alpha' Sigma_ref alpha)``. Input
constraints use the same form with the input covariance Y in place of Sigma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

__all__ = [
    "AffineChanceConstraint",
    "LinearizedSurrogate",
    "PartialCovarianceBound",
    "DegenerateReferenceError",
    "linearize",
    "verify_pointwise",
]


class DegenerateReferenceError(ValueError):
    """The reference covariance has no variance along the constraint normal."""


def _resolve_window(window: tuple[int, int], N: int) -> range:
    """Inclusive step range; a negative end counts back from N (-1 -> N)."""
    k0, k1 = window
    if k1 < 0:
        k1 = N + 1 + k1
    if not 0 <= k0 <= k1 <= N:
        raise ValueError(f"window {window} outside horizon [0, {N}]")
    return range(k0, k1 + 1)


@dataclass(frozen=True)
class AffineChanceConstraint:
    """``P(alpha' x <= bound) >= delta`` over the inclusive step window.

    ``target`` selects whether the constraint acts on the state distribution
    or on the input distribution (mean v, covariance Y).
    """

    alpha: np.ndarray
    bound: float
    delta: float
    target: str = "state"
    window: tuple[int, int] = (0, -1)
    label: str = ""

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).ravel()
        if np.linalg.norm(alpha) == 0:
            raise ValueError("constraint normal must be nonzero")
        if not 0.5 < self.delta < 1.0:
            raise ValueError("delta must lie in (0.5, 1)")
        if self.target not in ("state", "input"):
            raise ValueError("target must be 'state' or 'input'")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    def steps(self, N: int) -> range:
        return _resolve_window(self.window, N)


@dataclass(frozen=True)
class LinearizedSurrogate:
    """Deterministic surrogate ``ell' S ell + alpha' m - beta <= 0`` where
    (m, S) is the (mean, covariance) pair the constraint targets.

    ``bound`` and ``delta`` keep the probabilistic claim this surrogate
    enforces (P(alpha' x <= bound) >= delta) for empirical verification.
    """

    ell: np.ndarray
    alpha: np.ndarray
    beta: float
    target: str = "state"
    window: tuple[int, int] = (0, -1)
    delta: float | None = None
    bound: float | None = None
    label: str = ""

    def __post_init__(self):
        for name in ("ell", "alpha"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.ell.shape != self.alpha.shape:
            raise ValueError("ell and alpha must have equal dimension")

    def steps(self, N: int) -> range:
        return _resolve_window(self.window, N)

    def evaluate(self, mean: np.ndarray, cov: np.ndarray) -> float:
        """Surrogate value; feasible when <= 0."""
        return float(self.ell @ cov @ self.ell + self.alpha @ mean - self.beta)


@dataclass(frozen=True)
class PartialCovarianceBound:
    """LMI cap on a covariance subspace over a step window.

    target 'state': L' Sigma_k L <= cap; target 'input': Y_k <= cap (L is
    ignored and taken as the identity on the input space).
    """

    cap: np.ndarray
    L: np.ndarray | None = None
    window: tuple[int, int] = (0, -1)
    target: str = "state"
    label: str = ""

    def __post_init__(self):
        cap = np.array(self.cap, dtype=float)
        if cap.ndim != 2 or cap.shape[0] != cap.shape[1]:
            raise ValueError("cap must be square")
        w = np.linalg.eigvalsh(0.5 * (cap + cap.T))
        if w.min() <= 0:
            raise ValueError("cap must be symmetric positive definite")
        cap.setflags(write=False)
        object.__setattr__(self, "cap", cap)
        if self.target not in ("state", "input"):
            raise ValueError("target must be 'state' or 'input'")
        if self.L is not None:
            L = np.array(self.L, dtype=float)
            if L.ndim != 2 or L.shape[1] != cap.shape[0]:
                raise ValueError("L must be (n, p) with p matching cap")
            L.setflags(write=False)
            object.__setattr__(self, "L", L)

    def steps(self, N: int) -> range:
        return _resolve_window(self.window, N)

    def selector(self, n: int) -> np.ndarray:
        if self.L is not None:
            return self.L
        return np.eye(n)


def linearize(
    c: AffineChanceConstraint, Sigma_ref: np.ndarray
) -> LinearizedSurrogate:
    """First-order surrogate of a chance constraint around a reference
    covariance (state constraints: Sigma_ref is a state covariance; input
    constraints: the reference input covariance Y_ref)."""
    Sigma_ref = np.asarray(Sigma_ref, dtype=float)
    s0_sq = float(c.alpha @ Sigma_ref @ c.alpha)
    if s0_sq <= 0:
        raise DegenerateReferenceError(
            "reference covariance is degenerate along the constraint normal"
        )
    s0 = np.sqrt(s0_sq)
    phi = float(norm.ppf(c.delta))
    ell = np.sqrt(phi / (2.0 * s0)) * c.alpha
    beta = c.bound - phi * s0 / 2.0
    return LinearizedSurrogate(
        ell=ell,
        alpha=c.alpha,
        beta=beta,
        target=c.target,
        window=c.window,
        delta=c.delta,
        bound=c.bound,
        label=c.label,
    )


def relinearize(
    c: AffineChanceConstraint,
    surrogate: LinearizedSurrogate,
    Sigma_new: np.ndarray,
) -> tuple[LinearizedSurrogate, float]:
    """One fixed-point refresh of the reference covariance.

    Returns the updated surrogate and ``|beta_new - beta_old|`` so callers can
    run the optional fixed-point loop (stop below 1e-6, at most 5 rounds).
    """
    updated = linearize(c, Sigma_new)
    return updated, abs(updated.beta - surrogate.beta)


def verify_pointwise(c: AffineChanceConstraint, mu, Sigma) -> float:
    """Exact Gaussian violation probability ``P(alpha' x > bound)`` for
    ``x ~ N(mu, Sigma)``; degenerates to an indicator when the variance along
    alpha vanishes."""
    mu = np.asarray(mu, dtype=float).ravel()
    Sigma = np.asarray(Sigma, dtype=float)
    mean = float(c.alpha @ mu)
    var = float(c.alpha @ Sigma @ c.alpha)
    if var <= 0:
        return float(mean > c.bound)
    return float(norm.sf((c.bound - mean) / np.sqrt(var)))
