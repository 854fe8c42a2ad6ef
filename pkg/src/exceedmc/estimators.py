"""Simulation engine and estimators.

All estimators share one engine: runs are split into fixed-size chunks, chunk
``i`` draws from a generator seeded by ``SeedSequence(master_seed,
spawn_key=(i,))``, and the per-run contributions are concatenated in chunk
order.  The result therefore does not depend on how many workers execute
the chunks.  Within a chunk the runs are advanced in lock-step with numpy.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .exp_family import IidModel, TiltPoint
from .markov_additive import MarkovAdditiveModel, as_markov, model_cgf, solution_at
from .mixing import (
    MixtureSpec,
    build_tilt_mixture,
    log_inverse_likelihood_ratio,
    sample_component,
    untilted_mixture,
)

__all__ = [
    "CHUNK_RUNS",
    "EnumerationError",
    "NoRootError",
    "TailEvent",
    "BoundaryEvent",
    "FirstPassageEvent",
    "TrajectoryRecord",
    "EstimateReport",
    "G_FUNCTIONS",
    "make_g",
    "simulate",
    "estimate_tail",
    "estimate_boundary",
    "estimate_direct",
    "estimate_first_passage",
    "solve_zero_cgf",
    "relative_second_moment",
    "exact_probability_oracle",
    "ExactResult",
    "exact_tail_moments",
    "lattice_sum_distribution",
    "trajectories",
]

CHUNK_RUNS = 2000
# Comparisons on lattice walks land exactly on the boundary (e.g. S_n = 2.7 n);
# allow for the rounding of S_n / n.
_SLACK = 1e-12


class EnumerationError(ValueError):
    """Exact enumeration refused (too many paths or non-enumerable emissions)."""


class NoRootError(ValueError):
    pass


# --- events -------------------------------------------------------------------------


def _g_identity(mu):
    return mu[:, 0]


def _g_sqnorm(mu):
    return np.sum(mu * mu, axis=1)


def _g_abs(mu):
    return np.abs(mu[:, 0])


def _g_max(mu):
    return np.max(mu, axis=1)


G_FUNCTIONS = {
    "identity": _g_identity,
    "sqnorm": _g_sqnorm,
    "abs": _g_abs,
    "max": _g_max,
}


def make_g(tag: str, **params) -> Callable:
    """Vectorised g for a config tag.  ``squared-deviation`` takes ``center``."""
    if tag == "squared-deviation":
        centre = np.atleast_1d(np.asarray(params["center"], dtype=float))
        return lambda mu: np.sum((mu - centre) ** 2, axis=1)
    if tag == "linear":
        u = np.asarray(params["normal"], dtype=float)
        return lambda mu: mu @ u
    try:
        return G_FUNCTIONS[tag]
    except KeyError:
        raise ValueError(f"unknown g tag {tag!r}") from None


@dataclass(frozen=True)
class TailEvent:
    """``{g(S_n/n) >= b}``, or ``{region(S_n/n)}`` when ``region`` is given."""

    n: int
    g: Optional[Callable] = None
    b: float = 0.0
    region: Optional[Callable] = None

    def hit(self, S, t):
        mean = S / np.asarray(t, dtype=float).reshape(-1, 1)
        if self.region is not None:
            return np.asarray(self.region(mean), dtype=bool)
        return self.g(mean) >= self.b - _SLACK * max(1.0, abs(self.b))

    @property
    def horizon(self):
        return self.n


@dataclass(frozen=True)
class BoundaryEvent:
    """``{T_c <= n1}`` with ``T_c = inf{n >= n0 : n g(S_n/n) >= c}``."""

    g: Callable
    c: float
    n0: int
    n1: int

    def stops(self, S, t):
        if t < self.n0:
            return np.zeros(S.shape[0], dtype=bool)
        return t * self.g(S / t) >= self.c - _SLACK * max(1.0, abs(self.c))

    @property
    def horizon(self):
        return self.n1


@dataclass(frozen=True)
class FirstPassageEvent:
    """``{T_c < inf}`` with ``T_c = inf{n >= 1 : S_n in cA}``.

    ``kind`` is ``level`` (d = 1, S_n >= c), ``halfspace`` (u'S_n >= c) or
    ``max`` (max_j S_{n,j} >= c).  Runs are truncated at ``max_steps``.
    """

    kind: str
    c: float
    max_steps: int
    normal: Optional[np.ndarray] = None

    def stops(self, S, t):
        tol = _SLACK * max(1.0, abs(self.c))
        if self.kind == "level":
            return S[:, 0] >= self.c - tol
        if self.kind == "halfspace":
            return S @ np.asarray(self.normal, dtype=float) >= self.c - tol
        if self.kind == "max":
            return S.max(axis=1) >= self.c - tol
        raise ValueError(f"unknown first-passage kind {self.kind!r}")

    @property
    def horizon(self):
        return self.max_steps


Event = Union[TailEvent, BoundaryEvent, FirstPassageEvent]


# --- records --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    """One simulated path.  ``states`` and ``sums`` include time 0."""

    component: int
    states: np.ndarray
    increments: np.ndarray
    sums: np.ndarray
    stop_index: int
    stopped: bool

    @property
    def initial_state(self) -> int:
        return int(self.states[0])

    @property
    def terminal_state(self) -> int:
        return int(self.states[self.stop_index])


@dataclass
class EstimateReport:
    estimate: float
    std_error: float
    runs: int
    second_moment: float
    seconds: float
    seed: Optional[int]
    method: str
    truncations: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_contributions(cls, contrib, seconds, seed, method, truncations=0, **extra):
        contrib = np.asarray(contrib, dtype=float)
        m = contrib.size
        est = math.fsum(contrib) / m
        second = math.fsum(contrib * contrib) / m
        var = math.fsum((contrib - est) ** 2) / (m - 1) if m > 1 else 0.0
        return cls(est, math.sqrt(var / m), m, max(second, est * est), seconds, seed, method, truncations, extra)


def relative_second_moment(report: EstimateReport, reference_p: float) -> float:
    """``E_Q[(L 1_A)^2] / p^2``: 1 for a zero-variance estimator, ~1/p for direct MC."""
    if reference_p <= 0:
        raise ValueError("reference probability must be positive")
    return report.second_moment / reference_p ** 2


# --- engine ---------------------------------------------------------------------------


@dataclass
class _Batch:
    component: np.ndarray
    x0: np.ndarray
    xt: np.ndarray
    S: np.ndarray
    T: np.ndarray
    stopped: np.ndarray
    states: Optional[np.ndarray] = None
    sums: Optional[np.ndarray] = None


def simulate(model, mixture: MixtureSpec, event: Event, m: int, rng: np.random.Generator,
             keep_paths: bool = False) -> _Batch:
    """Simulate ``m`` runs under the mixture until the event's stopping rule or horizon."""
    mk = as_markov(model)
    K, d = mk.n_states, mk.dim
    horizon = int(event.horizon)
    comp = sample_component(mixture, rng, m)
    init = mk.initial_distribution()
    x0 = np.minimum(np.searchsorted(np.cumsum(init), rng.random(m), side="right"), K - 1)
    state = x0.copy()
    S = np.zeros((m, d))
    T = np.full(m, horizon)
    stopped = np.zeros(m, dtype=bool)
    active = np.arange(m)
    gaussian = mk.emission == "gaussian"
    cum = mixture._cum_tilted
    stop_rule = getattr(event, "stops", None)
    if keep_paths:
        states = np.zeros((m, horizon + 1), dtype=int)
        sums = np.zeros((m, horizon + 1, d))
        states[:, 0] = x0
    for t in range(1, horizon + 1):
        if active.size == 0:
            break
        ca, xa = comp[active], state[active]
        rows = cum[ca, xa]
        u = rng.random(active.size)
        nxt = np.minimum((rows < u[:, None]).sum(axis=1), K - 1)
        inc = mk.offsets[xa, nxt]
        if gaussian:
            inc = inc + mixture.thetas[ca] + rng.standard_normal((active.size, d))
        S[active] += inc
        state[active] = nxt
        if keep_paths:
            states[active, t] = nxt
            sums[active, t] = S[active]
        if stop_rule is not None:
            hit = stop_rule(S[active], t)
            if np.any(hit):
                done = active[hit]
                T[done] = t
                stopped[done] = True
                active = active[~hit]
    if keep_paths:
        # freeze stopped paths after their stopping time
        for i in np.flatnonzero(stopped):
            states[i, T[i] + 1:] = states[i, T[i]]
            sums[i, T[i] + 1:] = sums[i, T[i]]
    return _Batch(comp, x0, state, S, T, stopped, states if keep_paths else None, sums if keep_paths else None)


def trajectories(batch: _Batch, model) -> list:
    """Expand a batch simulated with ``keep_paths=True`` into records."""
    if batch.states is None:
        raise ValueError("batch was simulated without keep_paths")
    out = []
    for i in range(batch.component.size):
        t = int(batch.T[i])
        sums = batch.sums[i, : t + 1]
        out.append(TrajectoryRecord(int(batch.component[i]), batch.states[i, : t + 1], np.diff(sums, axis=0),
                                    sums, t, bool(batch.stopped[i])))
    return out


def _contributions(model, mixture, event, batch):
    if isinstance(event, TailEvent):
        hit = event.hit(batch.S, batch.T)
    else:
        hit = batch.stopped
    logv = log_inverse_likelihood_ratio(mixture, batch.S, batch.T, batch.xt, batch.x0)
    return np.where(hit, np.exp(-logv), 0.0), hit


def _chunk_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def _run(model, mixture, event, m, master_seed, workers, trace=None):
    n_chunks = -(-m // CHUNK_RUNS)

    def job(i):
        size = min(CHUNK_RUNS, m - i * CHUNK_RUNS)
        batch = simulate(model, mixture, event, size, _chunk_rng(master_seed, i))
        contrib, hit = _contributions(model, mixture, event, batch)
        return contrib, batch, hit

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(n_chunks)))
    else:
        results = [job(i) for i in range(n_chunks)]
    contrib = np.concatenate([r[0] for r in results])
    truncated = 0
    if isinstance(event, FirstPassageEvent):
        truncated = int(sum(np.count_nonzero(~r[1].stopped) for r in results))
    if trace is not None:
        _write_trace(trace, results)
    return contrib, truncated


def _write_trace(path, results):
    with open(path, "w") as fh:
        run = 0
        for contrib, batch, hit in results:
            for i in range(contrib.size):
                fh.write(json.dumps({
                    "run": run, "component": int(batch.component[i]), "x0": int(batch.x0[i]),
                    "stop_index": int(batch.T[i]), "terminal_state": int(batch.xt[i]),
                    "S": batch.S[i].tolist(), "hit": bool(hit[i]), "contribution": float(contrib[i]),
                }) + "\n")
                run += 1


def estimate_tail(model, mixture: MixtureSpec, n: int, event: Optional[TailEvent] = None, m: int = 10_000,
                  master_seed: int = 0, *, g: Optional[Callable] = None, b: Optional[float] = None,
                  region: Optional[Callable] = None, workers: int = 1, method: str = "importance",
                  trace: Optional[str] = None) -> EstimateReport:
    """Importance-sampling estimate of ``P{g(S_n/n) >= b}`` (or of a region)."""
    if n < 1 or m < 1:
        raise ValueError("need n >= 1 and m >= 1")
    if event is None:
        event = TailEvent(n, g, 0.0 if b is None else b, region)
    start = time.perf_counter()
    contrib, _ = _run(model, mixture, event, m, master_seed, workers, trace)
    return EstimateReport.from_contributions(contrib, time.perf_counter() - start, master_seed, method)


def estimate_boundary(model, mixture: MixtureSpec, g: Callable, c: float, n0: int, n1: int, m: int = 10_000,
                      master_seed: int = 0, *, workers: int = 1, method: str = "importance",
                      trace: Optional[str] = None) -> EstimateReport:
    """Importance-sampling estimate of ``P{T_c <= n1}``."""
    if not 1 <= n0 <= n1:
        raise ValueError("need 1 <= n0 <= n1")
    event = BoundaryEvent(g, c, n0, n1)
    start = time.perf_counter()
    contrib, _ = _run(model, mixture, event, m, master_seed, workers, trace)
    return EstimateReport.from_contributions(contrib, time.perf_counter() - start, master_seed, method)


def estimate_direct(model, event: Event, m: int = 10_000, master_seed: int = 0, *, workers: int = 1,
                    trace: Optional[str] = None) -> EstimateReport:
    """Plain Monte Carlo under the original measure; contributions are indicators."""
    start = time.perf_counter()
    contrib, truncated = _run(model, untilted_mixture(model), event, m, master_seed, workers, trace)
    return EstimateReport.from_contributions(contrib, time.perf_counter() - start, master_seed, "direct", truncated)


def solve_zero_cgf(model, direction=None, tol: float = 1e-10) -> TiltPoint:
    """Positive root ``t`` of ``psi(t u) = 0`` along a unit direction ``u``.

    Raises:
        NoRootError: if the drift along ``u`` is not negative.
    """
    d = model.dim
    u = np.ones(1) if direction is None else np.atleast_1d(np.asarray(direction, dtype=float))
    u = u / np.linalg.norm(u)
    drift = solution_at(model, np.zeros(d)).drift
    if float(u @ drift) >= 0:
        raise NoRootError(f"no positive root: drift {drift} is not negative along {u}")

    def f(t):
        return model_cgf(model, t * u)

    hi = 1.0
    while f(hi) <= 0:
        hi *= 2
        if hi > 1e4:
            raise NoRootError("no positive root: psi stays non-positive along the direction")
    lo = hi / 2
    while f(lo) >= 0:
        lo /= 2
        if lo < 1e-12:
            raise NoRootError("could not find a point with psi < 0")
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    t = hi if abs(f(hi)) < abs(f(lo)) else lo
    theta = t * u
    sol = solution_at(model, theta)
    if abs(sol.psi) > tol:
        raise NoRootError(f"bisection ended with psi={sol.psi:.3e}")
    return TiltPoint(sol.drift, theta, sol.psi, float(theta @ sol.drift - sol.psi), sol)


def estimate_first_passage(model, kind: str, c: float, m: int = 10_000, master_seed: int = 0, *,
                           normal=None, weights=None, max_steps: Optional[int] = None, workers: int = 1,
                           trace: Optional[str] = None) -> EstimateReport:
    """Estimate ``P{T_c < inf}`` for a boundary of the given ``kind``.

    ``level`` and ``halfspace`` use the single tilt at the positive root of
    psi along the boundary normal.  ``max`` mixes the per-coordinate roots
    with ``weights`` (default equal).  Runs still running after
    ``max_steps`` contribute 0 and are reported as truncations.
    """
    d = model.dim
    if kind == "level":
        if d != 1:
            raise ValueError("level boundaries need d = 1")
        normals = [np.ones(1)]
    elif kind == "halfspace":
        normals = [np.asarray(normal, dtype=float) / np.linalg.norm(normal)]
    elif kind == "max":
        normals = list(np.eye(d))
    else:
        raise ValueError(f"unknown boundary kind {kind!r}")
    roots = [solve_zero_cgf(model, u) for u in normals]
    mixture = build_tilt_mixture(model, [tp.theta for tp in roots], weights)
    if max_steps is None:
        speeds = [float(u @ tp.mu) for u, tp in zip(normals, roots)]
        max_steps = int(math.ceil(10 * max(c, 1.0) / min(speeds)))
    event = FirstPassageEvent(kind, c, max_steps, normals[0] if kind == "halfspace" else None)
    start = time.perf_counter()
    contrib, truncated = _run(model, mixture, event, m, master_seed, workers, trace)
    return EstimateReport.from_contributions(contrib, time.perf_counter() - start, master_seed,
                                             f"first-passage-{kind}", truncated, max_steps=max_steps)


# --- exact oracles --------------------------------------------------------------------


@dataclass(frozen=True)
class ExactResult:
    probability: float
    weighted: Optional[float] = None
    second_moment: Optional[float] = None


def exact_probability_oracle(model, event: Event, horizon: Optional[int] = None,
                             mixture: Optional[MixtureSpec] = None, cap: int = 12,
                             max_paths: int = 10_000_000) -> ExactResult:
    """Exhaustive path enumeration for chains with deterministic increments.

    Returns ``P(A)`` and, if ``mixture`` is given, ``sum_paths Q L 1_A`` (which
    equals ``P(A)`` when the likelihood ratio is right) and ``E_Q[(L 1_A)^2]``.
    Path probabilities under ``Q`` are products of tilted transition
    probabilities, computed independently of the closed-form ``1/L``.
    """
    mk = as_markov(model)
    if mk.emission != "deterministic":
        raise EnumerationError("exact enumeration needs deterministic (lattice) increments")
    t_max = int(event.horizon if horizon is None else horizon)
    if t_max > cap:
        raise EnumerationError(f"horizon {t_max} exceeds the enumeration cap {cap}")
    K = mk.n_states
    init = mk.initial_distribution()
    starts = np.flatnonzero(init > 0)
    n_paths = starts.size * K ** t_max
    if n_paths > max_paths:
        raise EnumerationError(f"{n_paths} paths exceed the limit {max_paths}")
    paths = np.array([(x0,) + tail for x0 in starts for tail in itertools.product(range(K), repeat=t_max)])
    prev, nxt = paths[:, :-1], paths[:, 1:]
    incs = mk.offsets[prev, nxt]
    sums = np.concatenate([np.zeros((len(paths), 1, mk.dim)), np.cumsum(incs, axis=1)], axis=1)
    logp = np.log(init[paths[:, 0]]) + np.sum(np.log(np.where(mk.transition[prev, nxt] > 0, mk.transition[prev, nxt], 1e-300)), axis=1)
    logp[np.any(mk.transition[prev, nxt] == 0, axis=1)] = -np.inf

    if isinstance(event, TailEvent):
        T = np.full(len(paths), t_max)
        hit = event.hit(sums[:, t_max], T)
    else:
        T = np.full(len(paths), t_max)
        hit = np.zeros(len(paths), dtype=bool)
        for t in range(1, t_max + 1):
            fresh = ~hit & event.stops(sums[:, t], t)
            T[fresh] = t
            hit |= fresh
    p_path = np.exp(logp)
    prob = math.fsum(p_path[hit])
    if mixture is None:
        return ExactResult(prob)

    idx = np.arange(len(paths))
    S_T = sums[idx, T]
    x_T = paths[idx, T]
    # Q(full path) = sum_k w_k pi(x0) prod P_theta_k
    logq_k = np.log(init[paths[:, 0]])[:, None] + np.sum(
        np.log(np.maximum(mixture.tilted[:, prev, nxt], 1e-300)), axis=2).T
    q_path = np.exp(logq_k) @ mixture.weights
    inv_l = np.exp(log_inverse_likelihood_ratio(mixture, S_T, T, x_T, paths[:, 0]))
    L = 1.0 / inv_l
    weighted = math.fsum((q_path * L)[hit])
    second = math.fsum((q_path * L * L)[hit])
    return ExactResult(prob, weighted, second)


def lattice_sum_distribution(model, n: int):
    """Exact joint law of ``(X_0, X_n, S_n)`` for integer-valued scalar increments.

    Returns ``(dist, s_values)`` with ``dist[x0, xn, k] = P(X_0=x0, X_n=xn,
    S_n = s_values[k])``.  Used as an oracle for tail probabilities and for
    exact second moments of likelihood ratios that depend only on these.
    """
    mk = as_markov(model)
    if mk.emission != "deterministic" or mk.dim != 1:
        raise EnumerationError("needs deterministic scalar increments")
    off = mk.offsets[:, :, 0]
    if not np.allclose(off, np.round(off)):
        raise EnumerationError("increments must be integers")
    off = np.round(off).astype(int)
    lo_step, hi_step = off.min(), off.max()
    s_min, width = n * lo_step, n * (hi_step - lo_step) + 1
    K = mk.n_states
    init = mk.initial_distribution()
    # D[x0, x, s - running minimum]
    D = np.zeros((K, K, width))
    for x in range(K):
        D[x, x, 0] = init[x]
    offset = 0
    for _ in range(n):
        N = np.zeros_like(D)
        for x in range(K):
            for y in range(K):
                p = mk.transition[x, y]
                if p == 0:
                    continue
                shift = off[x, y] - lo_step
                N[:, y, shift:] += p * D[:, x, : width - shift]
        D = N
        offset += lo_step
    return D, np.arange(width) + s_min


def exact_tail_moments(model, n: int, region: Callable, mixture: Optional[MixtureSpec] = None) -> ExactResult:
    """Exact ``P(S_n/n in region)`` and, for a mixture, ``E_Q[(L 1_A)^2]``.

    Works for integer-valued scalar chains (including i.i.d. lattices) of any
    horizon, since the likelihood ratio depends on the path only through
    ``(X_0, X_n, S_n)``.
    """
    D, s_values = lattice_sum_distribution(model, n)
    K = D.shape[0]
    mean = (s_values / n)[:, None]
    hit = np.asarray(region(mean), dtype=bool)
    prob = math.fsum(D[:, :, hit].ravel())
    if mixture is None:
        return ExactResult(prob)
    x0, xn, k = np.nonzero(D[:, :, hit])
    mass = D[:, :, hit][x0, xn, k]
    S = s_values[hit][k][:, None].astype(float)
    logv = log_inverse_likelihood_ratio(mixture, S, np.full(S.shape[0], n), xn, x0)
    second = math.fsum(mass * np.exp(-logv))
    return ExactResult(prob, None, second)
