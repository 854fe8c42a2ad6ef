"""Mixtures of exponentially tilted measures and their likelihood ratios.

A :class:`MixtureSpec` is a finite list of tilts with weights.  The grid
builders discretise the continuous mixing densities on a lattice of mean
vectors; the finite builder covers mixtures over a handful of chosen points
(including the degenerate single-tilt case).  Every estimator divides by

    1/L = sum_k w_k exp(theta_k' S_t - t psi(theta_k)) r(X_t; theta_k) / r(X_0; theta_k),

which :func:`log_inverse_likelihood_ratio` evaluates in the log domain.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .exp_family import DomainError, IidModel, TiltError, TiltPoint
from .markov_additive import ConvergenceError, as_markov, solution_at, solve_tilt

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigurationError",
    "NumericalOverflowError",
    "MixtureComponent",
    "MixtureSpec",
    "build_boundary_grid_mixture",
    "build_regime_mixture",
    "build_tail_grid_mixture",
    "build_finite_mixture",
    "build_tilt_mixture",
    "untilted_mixture",
    "boundary_grid_masses",
    "regime_masses",
    "sample_component",
    "inverse_likelihood_ratio",
    "log_inverse_likelihood_ratio",
]


class ConfigurationError(ValueError):
    """A mixture specification that yields no usable component."""


class NumericalOverflowError(ArithmeticError):
    def __init__(self, message: str, component: Optional[int] = None):
        super().__init__(message)
        self.component = component


@dataclass(frozen=True)
class MixtureComponent:
    mu: np.ndarray
    weight: float
    theta: np.ndarray
    psi: float
    rate: float
    r: np.ndarray


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Weights and per-component Perron data, stored column-wise.

    Attributes:
        flavor: ``boundary-grid``, ``tail-grid``, ``regime-grid`` or ``finite``.
        mus: ``(K, d)`` component means.
        weights: ``(K,)`` positive weights summing to one.
        thetas, psis, rates: natural parameters, cgf values and rates.
        r: ``(K, S)`` eigenfunction values over the chain states.
        tilted: ``(K, S, S)`` tilted transition matrices.
        params: the parameters the mixture was built from.
        dropped: grid points discarded because their tilt could not be solved.
    """

    flavor: str
    mus: np.ndarray
    weights: np.ndarray
    thetas: np.ndarray
    psis: np.ndarray
    rates: np.ndarray
    r: np.ndarray
    tilted: np.ndarray
    params: dict = field(default_factory=dict)
    dropped: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ConfigurationError("mixture has no components")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"mixture weights must be positive and sum to 1 (sum={w.sum()!r})")
        object.__setattr__(self, "log_weights", np.log(w))
        object.__setattr__(self, "log_r", np.log(self.r))
        object.__setattr__(self, "_cum_weights", np.cumsum(w))
        object.__setattr__(self, "_cum_tilted", np.cumsum(self.tilted, axis=2))

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def components(self) -> list:
        return [
            MixtureComponent(self.mus[k], float(self.weights[k]), self.thetas[k], float(self.psis[k]),
                             float(self.rates[k]), self.r[k])
            for k in range(len(self))
        ]

    def to_rows(self) -> list:
        """One dict per component (mu, weight, theta, psi, phi) for CSV dumps."""
        rows = []
        for k in range(len(self)):
            row = {f"mu{j + 1}": float(v) for j, v in enumerate(self.mus[k])}
            row["weight"] = float(self.weights[k])
            row.update({f"theta{j + 1}": float(v) for j, v in enumerate(self.thetas[k])})
            row["psi"] = float(self.psis[k])
            row["phi"] = float(self.rates[k])
            rows.append(row)
        return rows


def _assemble(model, flavor, tilts: Sequence[TiltPoint], log_mass, params, dropped) -> MixtureSpec:
    log_mass = np.asarray(log_mass, dtype=float)
    keep = np.isfinite(log_mass)
    if not np.any(keep):
        raise ConfigurationError(f"{flavor} mixture is empty: no grid point receives positive mass ({params})")
    lw = log_mass[keep] - logsumexp(log_mass[keep])
    w = np.exp(lw)
    # components whose normalised weight underflows cannot be sampled; drop them
    pos = w > 0
    w = w[pos] / w[pos].sum()
    tilts = [t for t, k in zip(tilts, keep) if k]
    tilts = [t for t, k in zip(tilts, pos) if k]
    return MixtureSpec(
        flavor=flavor,
        mus=np.array([t.mu for t in tilts]),
        weights=w,
        thetas=np.array([t.theta for t in tilts]),
        psis=np.array([t.psi for t in tilts]),
        rates=np.array([t.rate for t in tilts]),
        r=np.array([t.solution.r for t in tilts]),
        tilted=np.array([t.solution.tilted for t in tilts]),
        params=dict(params),
        dropped=dropped,
    )


def _grid(box_lo, box_hi, spacing) -> np.ndarray:
    axes = []
    for lo, hi in zip(box_lo, box_hi):
        k_lo, k_hi = int(np.ceil(lo / spacing - 1e-9)), int(np.floor(hi / spacing + 1e-9))
        axes.append(np.arange(k_lo, k_hi + 1) * spacing)
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, len(axes))


def _default_box(model, half_width: float = 10.0):
    if isinstance(model, IidModel) and model.family == "lattice":
        return model.support.min(axis=0), model.support.max(axis=0)
    mk = as_markov(model)
    if mk.emission == "deterministic":
        used = mk.transition > 0
        vals = mk.offsets[used]
        return vals.min(axis=0), vals.max(axis=0)
    centre = mk.drift
    return centre - half_width, centre + half_width


def _solve_grid(model, points):
    cache: dict = {}
    tilts, dropped = [], 0
    for mu in points:
        try:
            tilts.append(solve_tilt(model, mu, cache=cache))
        except (TiltError, DomainError, ConvergenceError, FloatingPointError):
            tilts.append(None)
            dropped += 1
    if dropped:
        logger.warning("dropped %d grid points whose tilt could not be solved", dropped)
    return tilts, dropped


def _vector_g(g: Callable, mus: np.ndarray) -> np.ndarray:
    return np.asarray(g(mus), dtype=float).reshape(-1)


def boundary_grid_masses(mus, rates, g_vals, g_cells, rates_cells, c, n0, n1, delta, r, eps0, eps1,
                         phi_threshold_star=None, phi_threshold_mass=None):
    """Log of the two unnormalised mass terms of the discrete boundary mixture.

    ``g_cells``/``rates_cells`` are ``(N, P)`` evaluations at probe points of
    each grid cell, used to decide whether the cell meets the region
    ``{phi <= thr_star, 1/a - eps0 < g < 1/delta + eps0}`` with ``a = n1/c``.

    Returns:
        ``(first, second)`` arrays of log masses (``-inf`` where a term is off).
    """
    d = mus.shape[1]
    a = n1 / c
    thr_star = (1.0 / (delta * r)) + eps1 if phi_threshold_star is None else phi_threshold_star
    thr_mass = (1.0 / (delta * r)) + 0.5 * eps1 if phi_threshold_mass is None else phi_threshold_mass
    in_star = (rates_cells <= thr_star) & (g_cells > 1.0 / a - eps0) & (g_cells < 1.0 / delta + eps0)
    cell_hits = in_star.any(axis=1)
    first = np.full(len(mus), -np.inf)
    ok = cell_hits & (g_vals > 0)
    first[ok] = -0.5 * d * np.log(g_vals[ok]) - c * rates[ok] / g_vals[ok]
    second = np.full(len(mus), -np.inf)
    on = rates > thr_mass
    second[on] = 0.5 * d * np.log(delta) - n0 * rates[on]
    return first, second


def build_boundary_grid_mixture(model, g: Callable, c: float, n0: int, n1: int, delta: Optional[float] = None,
                                r: float = 1.0, eps0: float = 0.0, eps1: float = 0.0,
                                spacing: Optional[float] = None, box=None,
                                phi_threshold_star: Optional[float] = None,
                                phi_threshold_mass: Optional[float] = None) -> MixtureSpec:
    """Discrete analogue of the boundary-crossing mixing density on ``(spacing Z)^d``.

    ``g`` maps an ``(N, d)`` array of means to ``(N,)`` values.  ``delta``
    defaults to ``n0 / c``; the remaining analytic constants ``r``, ``eps0``,
    ``eps1`` are inputs, never inferred.  ``box`` bounds the enumerated grid.
    """
    if c <= 0 or not n0 < n1:
        raise ConfigurationError("need c > 0 and n0 < n1")
    delta = n0 / c if delta is None else delta
    spacing = c ** -0.5 if spacing is None else spacing
    if spacing <= 0:
        raise ConfigurationError("spacing must be positive")
    lo, hi = _default_box(model) if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))
    points = _grid(np.broadcast_to(lo, (model.dim,)), np.broadcast_to(hi, (model.dim,)), spacing)
    tilts, dropped = _solve_grid(model, points)
    ok = [i for i, t in enumerate(tilts) if t is not None]
    tilts = [tilts[i] for i in ok]
    points = points[ok]
    if not tilts:
        raise ConfigurationError("no grid point inside the mean domain")
    rates = np.array([t.rate for t in tilts])
    g_vals = _vector_g(g, points)
    d = points.shape[1]
    # probe each cell at its corners and centre
    offsets = np.array(list(itertools.product((0.0, 1.0), repeat=d)) + [[0.5] * d]) * spacing
    probes = points[:, None, :] + offsets[None, :, :]
    g_cells = _vector_g(g, probes.reshape(-1, d)).reshape(len(points), -1)
    rates_cells = _probe_rates(model, probes, rates)
    first, second = boundary_grid_masses(points, rates, g_vals, g_cells, rates_cells, c, n0, n1, delta, r,
                                         eps0, eps1, phi_threshold_star, phi_threshold_mass)
    params = dict(c=c, n0=n0, n1=n1, delta=delta, r=r, eps0=eps0, eps1=eps1, spacing=spacing,
                  box=[np.asarray(lo).tolist(), np.asarray(hi).tolist()])
    return _assemble(model, "boundary-grid", tilts, np.logaddexp(first, second), params, dropped)


def _probe_rates(model, probes, rates):
    # Rate at a probe point; points we cannot tilt to are treated as outside.
    n, p, d = probes.shape
    out = np.full((n, p), np.inf)
    cache: dict = {}
    memo: dict = {}
    for i in range(n):
        for j in range(p):
            key = tuple(np.round(probes[i, j], 12))
            if key not in memo:
                try:
                    memo[key] = solve_tilt(model, probes[i, j], cache=cache).rate
                except (TiltError, DomainError, ConvergenceError):
                    memo[key] = np.inf
            out[i, j] = memo[key]
    return out


def regime_masses(g_vals, rates, c, n0, n1, b, d):
    """Log of the two unnormalised mass terms of the modified regime mixture."""
    first = np.full(g_vals.shape, -np.inf)
    ann = (g_vals >= c / n1) & (g_vals <= c / n0) & (g_vals > 0)
    first[ann] = -0.5 * d * np.log(g_vals[ann]) - c * rates[ann] / g_vals[ann]
    second = np.full(g_vals.shape, -np.inf)
    outer = (g_vals > c / n0) & (g_vals <= b)
    second[outer] = 0.5 * d * np.log(c / n0) - n0 * rates[outer]
    return first, second


def build_regime_mixture(model, c: float, n0: int, n1: int, b: float, spacing: Optional[float] = None) -> MixtureSpec:
    """Discrete mixture for ``T_c = inf{n >= n0 : ||S_n||^2 >= c n}``, g = ||mu||^2.

    Grid ``(c^{-1/2} Z)^d``; mass ``g^{-d/2} exp(-c phi/g)`` on
    ``c/n1 <= g <= c/n0`` plus ``(c/n0)^{d/2} exp(-n0 phi)`` on ``c/n0 < g <= b``.
    """
    if b < c / n0:
        raise ConfigurationError(f"need b >= c/n0 (b={b}, c/n0={c / n0})")
    spacing = c ** -0.5 if spacing is None else spacing
    d = model.dim
    half = np.sqrt(b)
    points = _grid(np.full(d, -half), np.full(d, half), spacing)
    g_all = np.sum(points ** 2, axis=1)
    points = points[(g_all >= c / n1) & (g_all <= b)]
    tilts, dropped = _solve_grid(model, points)
    ok = [i for i, t in enumerate(tilts) if t is not None]
    tilts = [tilts[i] for i in ok]
    points = points[ok]
    if not tilts:
        raise ConfigurationError("regime mixture is empty")
    rates = np.array([t.rate for t in tilts])
    first, second = regime_masses(np.sum(points ** 2, axis=1), rates, c, n0, n1, b, d)
    params = dict(c=c, n0=n0, n1=n1, b=b, spacing=spacing)
    return _assemble(model, "regime-grid", tilts, np.logaddexp(first, second), params, dropped)


def build_tail_grid_mixture(model, n: int, b: float, g: Callable, spacing: Optional[float] = None, box=None) -> MixtureSpec:
    """Grid masses proportional to ``exp(-n phi(mu))`` on ``{g(mu) >= b}``."""
    spacing = n ** -0.5 if spacing is None else spacing
    lo, hi = _default_box(model) if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))
    points = _grid(np.broadcast_to(lo, (model.dim,)), np.broadcast_to(hi, (model.dim,)), spacing)
    points = points[_vector_g(g, points) >= b]
    if len(points) == 0:
        raise ConfigurationError(f"region g(mu) >= {b} has no grid point inside the box")
    tilts, dropped = _solve_grid(model, points)
    ok = [i for i, t in enumerate(tilts) if t is not None]
    if not ok:
        raise ConfigurationError(f"region g(mu) >= {b} does not meet the interior of the mean domain")
    tilts = [tilts[i] for i in ok]
    log_mass = -n * np.array([t.rate for t in tilts])
    params = dict(n=n, b=b, spacing=spacing, box=[np.asarray(lo).tolist(), np.asarray(hi).tolist()])
    return _assemble(model, "tail-grid", tilts, log_mass, params, dropped)


def build_finite_mixture(model, mus, weights="exponential", n: Optional[float] = None,
                         rates: Optional[Sequence[float]] = None) -> MixtureSpec:
    """Mixture over a few chosen means.

    Args:
        mus: component means (scalars are accepted for d = 1).
        weights: explicit weights, or ``"exponential"`` for weights
            proportional to ``exp(-n phi(mu))`` (``n`` required).
        rates: optional override of the phi values used by the exponential
            rule, e.g. rounded published values.
    """
    mus = [np.atleast_1d(np.asarray(m, dtype=float)) for m in mus]
    if not mus:
        raise ConfigurationError("need at least one component")
    cache: dict = {}
    tilts = [solve_tilt(model, m, cache=cache) for m in mus]
    if isinstance(weights, str):
        if weights != "exponential" or n is None:
            raise ConfigurationError("weight rule must be 'exponential' with n given, or explicit weights")
        phis = np.array([t.rate for t in tilts] if rates is None else rates, dtype=float)
        log_mass = -n * phis
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(mus),) or np.any(w <= 0):
            raise ConfigurationError("explicit weights must be positive, one per component")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"explicit weights sum to {w.sum()!r}")
        log_mass = np.log(w)
    params = dict(mus=[m.tolist() for m in mus], n=n, weights=weights if isinstance(weights, str) else list(map(float, weights)))
    return _assemble(model, "finite", tilts, log_mass, params, 0)


def build_tilt_mixture(model, thetas, weights=None) -> MixtureSpec:
    """Finite mixture specified by natural parameters rather than means."""
    thetas = [np.atleast_1d(np.asarray(t, dtype=float)) for t in thetas]
    weights = np.full(len(thetas), 1.0 / len(thetas)) if weights is None else np.asarray(weights, dtype=float)
    tilts = []
    for th in thetas:
        sol = solution_at(model, th)
        tilts.append(TiltPoint(sol.drift, th, sol.psi, max(float(th @ sol.drift - sol.psi), 0.0), sol))
    params = dict(thetas=[t.tolist() for t in thetas], weights=weights.tolist())
    return _assemble(model, "finite", tilts, np.log(weights), params, 0)


def untilted_mixture(model) -> MixtureSpec:
    """The one-component mixture at theta = 0, i.e. the original measure."""
    return build_tilt_mixture(model, [np.zeros(model.dim)])


def sample_component(mixture: MixtureSpec, rng: np.random.Generator, size=None):
    """Categorical draw of component indices by weight."""
    n = 1 if size is None else int(size)
    idx = np.searchsorted(mixture._cum_weights, rng.random(n) * mixture._cum_weights[-1], side="right")
    idx = np.minimum(idx, len(mixture) - 1)
    return int(idx[0]) if size is None else idx


_LR_BLOCK = 4_000_000


def log_inverse_likelihood_ratio(mixture: MixtureSpec, S, t, terminal_state=None, initial_state=None) -> np.ndarray:
    """Vectorised ``log(1/L)`` for ``m`` paths.

    Args:
        S: ``(m, d)`` partial sums at time ``t``.
        t: ``(m,)`` times (>= 1).
        terminal_state, initial_state: ``(m,)`` chain states (zeros for
            i.i.d. models).
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    m = S.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (m,))
    xt = np.zeros(m, dtype=int) if terminal_state is None else np.broadcast_to(np.asarray(terminal_state, dtype=int), (m,))
    x0 = np.zeros(m, dtype=int) if initial_state is None else np.broadcast_to(np.asarray(initial_state, dtype=int), (m,))
    K = len(mixture)
    out = np.empty(m)
    block = max(1, _LR_BLOCK // K)
    for s in range(0, m, block):
        sl = slice(s, s + block)
        expo = S[sl] @ mixture.thetas.T - t[sl, None] * mixture.psis[None, :]
        expo += mixture.log_weights[None, :]
        expo += mixture.log_r[:, xt[sl]].T - mixture.log_r[:, x0[sl]].T
        out[sl] = logsumexp(expo, axis=1)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NumericalOverflowError(f"non-finite inverse likelihood ratio for path {bad}", component=None)
    return out


def inverse_likelihood_ratio(mixture: MixtureSpec, S, t: int, terminal_state: int = 0, initial_state: int = 0) -> float:
    """``1/L`` for a single path ending at time ``t`` with partial sum ``S``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    S = np.atleast_1d(np.asarray(S, dtype=float))
    logv = log_inverse_likelihood_ratio(mixture, S[None, :], [t], [terminal_state], [initial_state])[0]
    with np.errstate(over="ignore"):
        val = float(np.exp(logv))
    if not np.isfinite(val) or val == 0.0:
        terms = mixture.thetas @ S - t * mixture.psis
        raise NumericalOverflowError(f"1/L = exp({logv:.1f}) is not representable", component=int(np.argmax(terms)))
    return val
