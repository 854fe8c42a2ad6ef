"""Exponential-family machinery for i.i.d. increments.

Two families are supported: multivariate Gaussian with identity covariance
and finite lattices (arbitrary support points in R^d with positive
probabilities).  Everything here works on plain numpy arrays; models and tilt
points are immutable and can be shared between simulation workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DomainError",
    "TiltError",
    "IidModel",
    "TiltPoint",
    "gaussian_model",
    "lattice_model",
    "cgf",
    "cgf_gradient",
    "cgf_hessian",
    "tilted_pmf",
    "tilt_for_mean",
    "rate",
    "sample_increment_tilted",
]


class DomainError(ValueError):
    """Natural parameter outside the declared domain."""


class TiltError(RuntimeError):
    """The equation grad psi(theta) = mu could not be solved."""

    def __init__(self, message: str, mu=None, residual: float = float("nan")):
        super().__init__(message)
        self.mu = mu
        self.residual = residual


@dataclass(frozen=True, eq=False)
class IidModel:
    """Law of one increment xi.

    Attributes:
        family: ``"gaussian"`` or ``"lattice"``.
        mean: Mean vector (Gaussian family); for lattices it is derived.
        support: ``(k, d)`` support points (lattice family).
        probs: ``(k,)`` probabilities (lattice family).
        theta_box: Optional ``(lo, hi)`` pair bounding the natural parameter.
    """

    family: str
    mean: np.ndarray
    support: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    theta_box: Optional[tuple] = None
    _log_probs: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in ("gaussian", "lattice"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "lattice":
            support = np.atleast_2d(np.asarray(self.support, dtype=float))
            if support.shape[0] == 1 and np.ndim(self.support) == 1:
                support = support.T
            probs = np.asarray(self.probs, dtype=float)
            if probs.ndim != 1 or probs.shape[0] != support.shape[0]:
                raise ValueError("probs must have one entry per support point")
            if np.any(probs <= 0):
                raise ValueError("lattice probabilities must be positive")
            if abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError(f"lattice probabilities sum to {probs.sum()!r}, not 1")
            object.__setattr__(self, "support", support)
            object.__setattr__(self, "probs", probs)
            object.__setattr__(self, "_log_probs", np.log(probs))
            object.__setattr__(self, "mean", probs @ support)
        else:
            object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        for arr in (self.mean, self.support, self.probs):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.dim,):
            raise DomainError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(theta)):
            raise DomainError(f"theta={theta} is not finite")
        if self.theta_box is not None:
            lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), theta.shape) for v in self.theta_box)
            if np.any(theta < lo) or np.any(theta > hi):
                raise DomainError(f"theta={theta} outside the declared domain [{lo}, {hi}]")
        return theta


@dataclass(frozen=True)
class TiltPoint:
    """A mean vector together with its natural parameter and rate.

    ``solution`` carries the Perron data (eigenfunction, tilted kernel) when
    the tilt belongs to a Markov additive model or to the Markov view of an
    i.i.d. model.
    """

    mu: np.ndarray
    theta: np.ndarray
    psi: float
    rate: float
    solution: object = None


def gaussian_model(mean) -> IidModel:
    """Gaussian increments with the given mean and identity covariance."""
    return IidModel("gaussian", np.atleast_1d(np.asarray(mean, dtype=float)))


def lattice_model(support, probs) -> IidModel:
    """Increments on finitely many points.  ``support`` is ``(k,)`` or ``(k, d)``."""
    support = np.asarray(support, dtype=float)
    if support.ndim == 1:
        support = support[:, None]
    return IidModel("lattice", np.zeros(support.shape[1]), support=support, probs=probs)


def cgf(model: IidModel, theta) -> float:
    """Cumulant generating function psi(theta) = log E exp(theta' xi)."""
    theta = model.check_theta(theta)
    if model.family == "gaussian":
        return float(theta @ model.mean + 0.5 * theta @ theta)
    return float(logsumexp(model._log_probs + model.support @ theta))


def tilted_pmf(model: IidModel, theta) -> np.ndarray:
    """Probabilities p_i exp(theta' x_i - psi(theta)) of a lattice model."""
    theta = model.check_theta(theta)
    logits = model._log_probs + model.support @ theta
    q = np.exp(logits - logsumexp(logits))
    return q / q.sum()


def cgf_gradient(model: IidModel, theta) -> np.ndarray:
    theta = model.check_theta(theta)
    if model.family == "gaussian":
        return model.mean + theta
    return tilted_pmf(model, theta) @ model.support


def cgf_hessian(model: IidModel, theta) -> np.ndarray:
    theta = model.check_theta(theta)
    if model.family == "gaussian":
        return np.eye(model.dim)
    q = tilted_pmf(model, theta)
    centred = model.support - q @ model.support
    return (centred * q[:, None]).T @ centred


def _inside_hull_1d(model: IidModel, mu: np.ndarray) -> bool:
    lo, hi = model.support[:, 0].min(), model.support[:, 0].max()
    return lo < mu[0] < hi


def _coordinate_bisection(model, mu, theta, tol, max_sweeps):
    # Gauss-Seidel sweeps; each coordinate solved by bisection on its own
    # monotone partial derivative.
    for _ in range(max_sweeps):
        for j in range(model.dim):
            def resid(t):
                th = theta.copy()
                th[j] = t
                return cgf_gradient(model, th)[j] - mu[j]

            lo, hi = theta[j] - 1.0, theta[j] + 1.0
            while resid(lo) > 0:
                lo -= 2 * (hi - lo)
                if lo < -1e6:
                    raise TiltError(f"mu={mu} appears to lie outside the mean domain", mu)
            while resid(hi) < 0:
                hi += 2 * (hi - lo)
                if hi > 1e6:
                    raise TiltError(f"mu={mu} appears to lie outside the mean domain", mu)
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if resid(mid) < 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-15 * max(1.0, abs(mid)):
                    break
            theta[j] = 0.5 * (lo + hi)
        res = np.max(np.abs(cgf_gradient(model, theta) - mu))
        if res <= tol:
            return theta
    raise TiltError(f"coordinate bisection did not converge for mu={mu}", mu, res)


def tilt_for_mean(model: IidModel, mu, tol: float = 1e-10, max_iter: int = 200) -> TiltPoint:
    """Solve grad psi(theta) = mu and return the full tilt point.

    Damped Newton on the convex objective psi(theta) - theta'mu, falling back
    to coordinate bisection when the Hessian is numerically singular (which
    happens near the boundary of the mean domain of a lattice).

    Raises:
        TiltError: if ``mu`` is not in the interior of the mean domain or the
            iteration cap is hit.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.shape != (model.dim,):
        raise ValueError(f"mu has shape {mu.shape}, expected ({model.dim},)")
    if model.family == "gaussian":
        theta = mu - model.mean
        model.check_theta(theta)
        psi = cgf(model, theta)
        return TiltPoint(mu, theta, psi, max(float(theta @ mu - psi), 0.0))

    if model.dim == 1 and not _inside_hull_1d(model, mu):
        raise TiltError(f"mu={mu} is not inside the convex hull of the support", mu)

    theta = np.zeros(model.dim)
    res = np.inf

    def objective(th):
        return cgf(model, th) - th @ mu

    for _ in range(max_iter):
        grad = cgf_gradient(model, theta) - mu
        res = float(np.max(np.abs(grad)))
        if res <= tol:
            break
        hess = cgf_hessian(model, theta)
        if np.linalg.cond(hess) > 1e12:
            theta = _coordinate_bisection(model, mu, theta, tol, max_iter)
            res = float(np.max(np.abs(cgf_gradient(model, theta) - mu)))
            break
        step = np.linalg.solve(hess, grad)
        f0 = objective(theta)
        t = 1.0
        while t > 1e-12:
            cand = theta - t * step
            if objective(cand) <= f0 + 1e-14 * max(1.0, abs(f0)):
                break
            t *= 0.5
        theta = theta - t * step
        if np.max(np.abs(theta)) > 1e6:
            raise TiltError(f"Newton iterates diverged for mu={mu}", mu, res)
    else:
        raise TiltError(f"tilt solve hit the iteration cap for mu={mu}", mu, res)
    if res > tol:
        raise TiltError(f"tilt solve did not converge for mu={mu}", mu, res)
    psi = cgf(model, theta)
    return TiltPoint(mu, theta, psi, max(float(theta @ mu - psi), 0.0))


def rate(model: IidModel, mu, tol: float = 1e-10) -> float:
    """Large-deviation rate phi(mu) = sup_theta {theta'mu - psi(theta)}."""
    return tilt_for_mean(model, mu, tol).rate


def sample_increment_tilted(model: IidModel, theta, rng: np.random.Generator, size=None, table=None):
    """Draw from the tilted law dF_theta = exp(theta'x - psi(theta)) dF.

    ``table`` may hold a cumulative distribution from a previous call to
    :func:`tilted_pmf` (``np.cumsum``) to avoid recomputing it per draw.
    Returns shape ``(d,)`` or ``(size, d)``.
    """
    theta = model.check_theta(theta)
    n = 1 if size is None else int(size)
    if model.family == "gaussian":
        out = model.mean + theta + rng.standard_normal((n, model.dim))
    else:
        cum = np.cumsum(tilted_pmf(model, theta)) if table is None else table
        idx = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), len(cum) - 1)
        out = model.support[idx]
    return out[0] if size is None else out
