"""Finite-state Markov additive models (X_n, S_n).

A model is a row-stochastic matrix ``P`` plus an emission rule per transition
``x -> y``: either a deterministic increment ``offsets[x, y]`` or a Gaussian
with mean ``offsets[x, y]`` and identity covariance.  For a tilt ``theta`` the
tilted kernel ``P_hat(x, y) = P(x, y) E[exp(theta' xi) | x -> y]`` has a
Perron root ``exp(psi(theta))`` and a positive right eigenvector ``r``; these
give the exponential family of transition laws used for importance sampling.

I.i.d. models are handled through :func:`as_markov`, which rewrites them as a
chain whose rows are all equal (lattice) or as a single-state chain
(Gaussian), so that the simulation engine only deals with one representation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import exp_family
from .exp_family import IidModel, TiltError, TiltPoint

logger = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "ConsistencyError",
    "MarkovAdditiveModel",
    "PerronSolution",
    "example1_model",
    "example2_model",
    "tilted_kernel",
    "stationary",
    "perron",
    "markov_cgf_gradient",
    "tilt_for_mean_markov",
    "sample_step_tilted",
    "as_markov",
    "solution_at",
    "solve_tilt",
    "model_cgf",
]


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class ConsistencyError(RuntimeError):
    """Two independent computations of the same quantity disagree."""


@dataclass(frozen=True, eq=False)
class MarkovAdditiveModel:
    """Finite Markov chain with additive increments.

    Attributes:
        transition: ``(K, K)`` row-stochastic matrix.
        offsets: ``(K, K, d)`` increment (deterministic) or increment mean
            (Gaussian) for each transition.
        emission: ``"deterministic"`` or ``"gaussian"``.
        initial: ``"stationary"`` or the index of a fixed initial state.
        labels: Optional state labels, only used for display.
    """

    transition: np.ndarray
    offsets: np.ndarray
    emission: str = "deterministic"
    initial: Union[str, int] = "stationary"
    labels: Optional[tuple] = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        off = np.asarray(self.offsets, dtype=float)
        if off.ndim == 2:
            off = off[:, :, None]
        K = P.shape[0]
        if P.shape != (K, K) or off.shape[:2] != (K, K):
            raise ValueError("transition must be (K, K) and offsets (K, K, d)")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition matrix must be row-stochastic")
        if self.emission not in ("deterministic", "gaussian"):
            raise ValueError(f"unknown emission {self.emission!r}")
        reach = (P > 0).astype(float)
        power = np.eye(K)
        for _ in range(K * K):
            power = np.minimum(power @ reach, 1.0)
        if not np.all(power > 0):
            raise ValueError("chain must be irreducible and aperiodic")
        if self.initial != "stationary" and not (0 <= int(self.initial) < K):
            raise ValueError(f"initial state {self.initial!r} out of range")
        P.setflags(write=False)
        off.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "_pi", stationary(P))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def dim(self) -> int:
        return self.offsets.shape[2]

    @property
    def pi(self) -> np.ndarray:
        """Stationary distribution of the untilted chain."""
        return self._pi

    @property
    def drift(self) -> np.ndarray:
        return np.einsum("x,xy,xyd->d", self.pi, self.transition, self.offsets)

    def initial_distribution(self) -> np.ndarray:
        if self.initial == "stationary":
            return self.pi
        out = np.zeros(self.n_states)
        out[int(self.initial)] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class PerronSolution:
    """Perron data of the tilted kernel at one ``theta``.

    ``r`` is normalised so that ``sum_x pi(x) r(x) = 1`` with ``pi`` the
    stationary law of the untilted chain.
    """

    theta: np.ndarray
    psi: float
    r: np.ndarray
    tilted: np.ndarray
    pi_theta: np.ndarray
    drift: np.ndarray

    @property
    def eigenvalue(self) -> float:
        return float(np.exp(self.psi))


_EXAMPLE_P = np.array([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]])


def example1_model(initial="stationary") -> MarkovAdditiveModel:
    """Three-state chain with increments xi_n = X_n, states labelled 1, 2, 3."""
    values = np.array([1.0, 2.0, 3.0])
    offsets = np.broadcast_to(values[None, :, None], (3, 3, 1)).copy()
    return MarkovAdditiveModel(_EXAMPLE_P, offsets, "deterministic", initial, labels=(1, 2, 3))


def example2_model(initial="stationary") -> MarkovAdditiveModel:
    """Regime-switching Gaussian walk xi_n = (X_n - 2, 0, 0)' + eps_n in R^3."""
    offsets = np.zeros((3, 3, 3))
    offsets[:, :, 0] = np.array([1.0, 2.0, 3.0])[None, :] - 2.0
    return MarkovAdditiveModel(_EXAMPLE_P, offsets, "gaussian", initial, labels=(1, 2, 3))


def tilted_kernel(model: MarkovAdditiveModel, theta) -> np.ndarray:
    """``P_hat(x, y) = P(x, y) E[exp(theta' xi) | x -> y]``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    expo = model.offsets @ theta
    if model.emission == "gaussian":
        expo = expo + 0.5 * theta @ theta
    return model.transition * np.exp(expo)


def stationary(P, tol: float = 1e-15, max_iter: int = 100_000) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix by power iteration."""
    P = np.asarray(P, dtype=float)
    K = P.shape[0]
    pi = np.full(K, 1.0 / K)
    for _ in range(max_iter):
        nxt = pi @ P
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt
        pi = nxt
    raise ConvergenceError("stationary distribution did not converge", float(np.max(np.abs(nxt - pi))))


def _perron_root(M: np.ndarray, tol: float, max_iter: int):
    # Power iteration with Collatz-Wielandt bounds min(Mv/v) <= rho <= max(Mv/v).
    v = np.ones(M.shape[0])
    for _ in range(max_iter):
        w = M @ v
        ratio = w / v
        lo, hi = ratio.min(), ratio.max()
        if hi - lo <= tol * hi:
            return 0.5 * (lo + hi) if hi != lo else hi, w / w.max()
        v = w / w.max()
    raise ConvergenceError("power iteration did not converge", float((hi - lo) / hi))


def perron(model: MarkovAdditiveModel, theta, tol: float = 1e-14, max_iter: int = 100_000) -> PerronSolution:
    """Perron eigenvalue and eigenfunction of the tilted kernel, and the tilted chain."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (model.dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({model.dim},)")
    # scale out the largest exponent so strong tilts do not overflow
    expo = model.offsets @ theta
    if model.emission == "gaussian":
        expo = expo + 0.5 * theta @ theta
    shift = float(expo[model.transition > 0].max())
    M = model.transition * np.exp(expo - shift)
    rho, v = _perron_root(M, tol, max_iter)
    r = v / (model.pi @ v)
    tilted = M * r[None, :] / (rho * r[:, None])
    tilted /= tilted.sum(axis=1, keepdims=True)
    pi_theta = stationary(tilted)
    mean_inc = model.offsets + (theta if model.emission == "gaussian" else 0.0)
    drift = np.einsum("x,xy,xyd->d", pi_theta, tilted, mean_inc)
    return PerronSolution(theta, float(np.log(rho)) + shift, r, tilted, pi_theta, drift)


def markov_cgf_gradient(model: MarkovAdditiveModel, theta, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of psi, cross-checked against the tilted drift.

    Raises:
        ConsistencyError: if the two computations differ by more than 1e-4.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    grad = np.empty(model.dim)
    for j in range(model.dim):
        e = np.zeros(model.dim)
        e[j] = h
        grad[j] = (perron(model, theta + e).psi - perron(model, theta - e).psi) / (2 * h)
    drift = perron(model, theta).drift
    gap = float(np.max(np.abs(grad - drift)))
    if gap > 1e-4:
        raise ConsistencyError(f"finite-difference gradient {grad} disagrees with tilted drift {drift}")
    if gap > 1e-5:
        logger.warning("gradient/drift gap %.2e at theta=%s", gap, theta)
    return grad


def _separable_coordinates(model: MarkovAdditiveModel):
    # For Gaussian emissions a coordinate whose mean is the same on every
    # transition factors out of the Perron problem: theta_j = mu_j - const_j.
    if model.emission != "gaussian":
        return {}
    used = model.transition > 0
    out = {}
    for j in range(model.dim):
        vals = model.offsets[:, :, j][used]
        if np.all(vals == vals[0]):
            out[j] = float(vals[0])
    return out


def _extend(model, base: PerronSolution, theta, sep) -> PerronSolution:
    psi = base.psi + sum(theta[j] * c + 0.5 * theta[j] ** 2 for j, c in sep.items())
    drift = base.drift.copy()
    for j, c in sep.items():
        drift[j] = c + theta[j]
    return PerronSolution(theta, float(psi), base.r, base.tilted, base.pi_theta, drift)


def tilt_for_mean_markov(model: MarkovAdditiveModel, mu, tol: float = 1e-10, cache: Optional[dict] = None) -> TiltPoint:
    """Find ``theta`` with ``grad psi(theta) = mu`` for a Markov additive model.

    Coordinates that factor out of the Perron problem are solved in closed
    form.  If one coordinate remains, it is found by bisection on the tilted
    drift (monotone by convexity of psi), expanding the bracket from
    [-8, 8]; otherwise damped Newton is used.  ``cache`` may be a dict shared
    across calls; it memoises the Perron solve on the non-separable part of
    ``theta``, which is what makes large grids cheap.

    Raises:
        TiltError: if ``mu`` cannot be bracketed or Newton fails.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.shape != (model.dim,):
        raise ValueError(f"mu has shape {mu.shape}, expected ({model.dim},)")
    sep = _separable_coordinates(model)
    free = [j for j in range(model.dim) if j not in sep]
    theta = np.zeros(model.dim)
    for j, c in sep.items():
        theta[j] = mu[j] - c

    def base_solution(free_theta):
        key = tuple(free_theta)
        if cache is not None and key in cache:
            return cache[key]
        th = np.zeros(model.dim)
        th[free] = free_theta
        sol = perron(model, th)
        if cache is not None:
            cache[key] = sol
        return sol

    if not free:
        base = base_solution(())
    elif len(free) == 1:
        j = free[0]
        key = ("mu", float(mu[j]))
        if cache is not None and key in cache:
            a = cache[key]
        else:
            a = _bisect_drift(lambda t: base_solution((t,)).drift[j] - mu[j], mu, tol)
            if cache is not None:
                cache[key] = a
        base = base_solution((a,))
        theta[j] = a
    else:
        sub = _newton_drift(model, mu, free, tol)
        base = base_solution(tuple(sub))
        theta[free] = sub
    sol = _extend(model, base, theta, sep)
    res = float(np.max(np.abs(sol.drift - mu)))
    if res > max(tol, 1e-9):
        raise TiltError(f"tilt solve for mu={mu} left residual {res:.3e}", mu, res)
    phi = float(theta @ mu - sol.psi)
    return TiltPoint(mu, theta, sol.psi, max(phi, 0.0), sol)


def _bisect_drift(f, mu, tol):
    lo, hi = -8.0, 8.0
    flo, fhi = f(lo), f(hi)
    while flo > 0 or fhi < 0:
        if max(-lo, hi) > 1e3 or not (np.isfinite(flo) and np.isfinite(fhi)):
            raise TiltError(f"cannot bracket a tilt for mu={mu}; it is not an attainable drift", mu)
        if flo > 0:
            lo, flo = 2 * lo, f(2 * lo)
        if fhi < 0:
            hi, fhi = 2 * hi, f(2 * hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= 0.1 * tol:
            return mid
        if fm < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def _newton_drift(model, mu, free, tol, max_iter=100, h=1e-5):
    x = np.zeros(len(free))

    def grad(v):
        th = np.zeros(model.dim)
        th[free] = v
        return perron(model, th).drift[free]

    for _ in range(max_iter):
        g = grad(x) - mu[free]
        if np.max(np.abs(g)) <= 0.1 * tol:
            return x
        H = np.empty((len(free), len(free)))
        for k in range(len(free)):
            e = np.zeros(len(free))
            e[k] = h
            H[:, k] = (grad(x + e) - grad(x - e)) / (2 * h)
        H = 0.5 * (H + H.T)
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-8 and np.max(np.abs(grad(x - t * step) - mu[free])) > np.max(np.abs(g)):
            t *= 0.5
        x = x - t * step
        if np.max(np.abs(x)) > 1e3:
            break
    raise TiltError(f"Newton failed for mu={mu}", mu)


def sample_step_tilted(model: MarkovAdditiveModel, solution: PerronSolution, state: int, rng: np.random.Generator):
    """One step of the tilted chain: returns ``(next_state, increment)``."""
    row = np.cumsum(solution.tilted[state])
    nxt = int(min(np.searchsorted(row, rng.random(), side="right"), model.n_states - 1))
    inc = model.offsets[state, nxt].copy()
    if model.emission == "gaussian":
        inc += solution.theta + rng.standard_normal(model.dim)
    return nxt, inc


# --- uniform view over i.i.d. and Markov models -------------------------------------


def as_markov(model) -> MarkovAdditiveModel:
    """Markov additive representation used by the simulation engine."""
    if isinstance(model, MarkovAdditiveModel):
        return model
    if model.family == "gaussian":
        return MarkovAdditiveModel(np.ones((1, 1)), model.mean[None, None, :], "gaussian")
    k = model.probs.shape[0]
    P = np.broadcast_to(model.probs, (k, k)).copy()
    offsets = np.broadcast_to(model.support[None, :, :], (k, k, model.dim)).copy()
    return MarkovAdditiveModel(P, offsets, "deterministic")


def _iid_solution(model: IidModel, theta) -> PerronSolution:
    theta = model.check_theta(theta)
    psi = exp_family.cgf(model, theta)
    if model.family == "gaussian":
        tilted = np.ones((1, 1))
        pi_theta = np.ones(1)
    else:
        q = exp_family.tilted_pmf(model, theta)
        tilted = np.broadcast_to(q, (q.size, q.size)).copy()
        pi_theta = q
    return PerronSolution(theta, psi, np.ones(tilted.shape[0]), tilted, pi_theta, exp_family.cgf_gradient(model, theta))


def solution_at(model, theta) -> PerronSolution:
    """Perron data at ``theta`` for either model type (closed form for i.i.d.)."""
    if isinstance(model, IidModel):
        return _iid_solution(model, theta)
    return perron(model, theta)


def solve_tilt(model, mu, tol: float = 1e-10, cache: Optional[dict] = None) -> TiltPoint:
    """Tilt point with attached Perron data, for either model type."""
    if isinstance(model, IidModel):
        tp = exp_family.tilt_for_mean(model, mu, tol)
        return TiltPoint(tp.mu, tp.theta, tp.psi, tp.rate, _iid_solution(model, tp.theta))
    return tilt_for_mean_markov(model, mu, tol, cache)


def model_cgf(model, theta) -> float:
    if isinstance(model, IidModel):
        return exp_family.cgf(model, theta)
    return perron(model, theta).psi


def model_dim(model) -> int:
    return model.dim
