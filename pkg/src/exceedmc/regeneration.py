"""Regeneration at an accessible atom and the modified likelihood-ratio martingale.

For a finite chain every visit to a fixed state ``x*`` is a regeneration.
Given a stopping time ``T`` let ``U`` be the first regeneration strictly
after ``T``.  The process

    Z_n = exp(theta'S_n - n psi) r(X_n)      for n < U,
    Z_n = exp(theta'S_U - U psi)             for n >= U,

is a martingale under the original kernel provided ``r`` is scaled so that
``r(x*) = 1``; :func:`martingale_path` uses that scaling.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .estimators import CHUNK_RUNS, EnumerationError, EstimateReport, _chunk_rng
from .markov_additive import MarkovAdditiveModel, PerronSolution, as_markov, perron

__all__ = [
    "ExcursionCapError",
    "RegenerationSchedule",
    "MartingalePath",
    "default_atom",
    "low_variance_atom",
    "regeneration_times",
    "empirical_eigenfunction",
    "expected_hitting_times",
    "martingale_path",
    "verify_martingale_exact",
    "martingale_t_statistic",
]


class ExcursionCapError(RuntimeError):
    """An excursion did not reach the atom within the step cap."""


@dataclass(frozen=True)
class RegenerationSchedule:
    """Visits of the atom at times ``n >= 1`` and, for a given ``T``, the next one after it.

    ``post_T`` is ``None`` when the trajectory ends before a regeneration
    follows ``T``; the caller should extend the simulation.
    """

    atom: int
    times: np.ndarray
    T: Optional[int] = None
    post_T: Optional[int] = None


@dataclass(frozen=True)
class MartingalePath:
    values: np.ndarray
    U: int
    theta: np.ndarray


def default_atom(model) -> int:
    """State with the largest stationary probability (shortest mean return time)."""
    return int(np.argmax(as_markov(model).pi))


def _excursion_second_moment_radius(mk, theta, psi, atom):
    # Spectral radius of E[exp(2(theta'xi - psi)); x -> y] restricted to non-atom
    # states.  Below 1 the excursion weights have finite variance.
    expo = 2.0 * (mk.offsets @ theta - psi)
    if mk.emission == "gaussian":
        expo = expo + 2.0 * float(theta @ theta)
    M = mk.transition * np.exp(expo)
    keep = [x for x in range(mk.n_states) if x != atom]
    if not keep:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M[np.ix_(keep, keep)]))))


def low_variance_atom(model, theta) -> int:
    """Atom that minimises the growth of the second moment of excursion weights.

    Under a strong tilt the state favoured by the tilt makes a poor atom
    when left out: excursions that linger there have weights with infinite
    variance.  This picks the state whose removal gives the smallest
    spectral radius of the second-moment kernel.
    """
    mk = as_markov(model)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    psi = perron(mk, theta).psi
    radii = [_excursion_second_moment_radius(mk, theta, psi, a) for a in range(mk.n_states)]
    return int(np.argmin(radii))


def regeneration_times(states, atom: int, T: Optional[int] = None) -> RegenerationSchedule:
    """Regeneration times of a recorded trajectory ``states[0..N]``.

    Example:
        >>> regeneration_times([0, 2, 1, 3, 1, 1], atom=1).times.tolist()
        [2, 4, 5]
    """
    states = np.asarray(states)
    times = np.flatnonzero(states[1:] == atom) + 1
    post = None
    if T is not None:
        later = times[times > T]
        post = int(later[0]) if later.size else None
    return RegenerationSchedule(int(atom), times, T, post)


def expected_hitting_times(model, atom: int) -> np.ndarray:
    """``E_x tau`` for every start ``x``, tau the first visit to ``atom`` at a time >= 1."""
    P = as_markov(model).transition
    K = P.shape[0]
    others = [x for x in range(K) if x != atom]
    h = np.zeros(K)
    if others:
        Q = P[np.ix_(others, others)]
        h[others] = np.linalg.solve(np.eye(len(others)) - Q, np.ones(len(others)))
    out = 1.0 + P @ h
    return out


def _excursions(mk: MarkovAdditiveModel, theta, psi, start, atom, m, rng, cap):
    # log of exp(theta'S_tau - tau psi) over m excursions
    d = mk.dim
    cum = np.cumsum(mk.transition, axis=1)
    state = np.full(m, start)
    logv = np.zeros(m)
    active = np.arange(m)
    lengths = np.zeros(m, dtype=int)
    for t in range(1, cap + 1):
        xa = state[active]
        u = rng.random(active.size)
        nxt = np.minimum((cum[xa] < u[:, None]).sum(axis=1), mk.n_states - 1)
        inc = mk.offsets[xa, nxt]
        if mk.emission == "gaussian":
            inc = inc + rng.standard_normal((active.size, d))
        logv[active] += inc @ theta - psi
        state[active] = nxt
        done = nxt == atom
        lengths[active[done]] = t
        active = active[~done]
        if active.size == 0:
            return logv, lengths
    raise ExcursionCapError(f"{active.size} excursions from state {start} did not reach state {atom} in {cap} steps")


def empirical_eigenfunction(model, theta, start_state: int, atom_state: Optional[int] = None, m: int = 100_000,
                            master_seed: int = 0, *, cap: int = 100_000, workers: int = 1,
                            solution: Optional[PerronSolution] = None) -> EstimateReport:
    """Monte Carlo estimate of ``r(start_state; theta)`` via regeneration.

    The mean of ``exp(theta'S_tau - tau psi)`` over excursions to the atom
    estimates ``r(x)/r(x*)``; multiplying by the Perron value ``r(x*)`` puts
    it on the scale ``sum_x pi(x) r(x) = 1`` used throughout the package.
    States are 0-based indices.
    """
    mk = as_markov(model)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    sol = perron(mk, theta) if solution is None else solution
    atom = default_atom(mk) if atom_state is None else int(atom_state)
    if not (0 <= start_state < mk.n_states and 0 <= atom < mk.n_states):
        raise ValueError("state index out of range")
    scale = float(sol.r[atom])
    n_chunks = -(-m // CHUNK_RUNS)
    start = time.perf_counter()

    def job(i):
        size = min(CHUNK_RUNS, m - i * CHUNK_RUNS)
        logv, _ = _excursions(mk, theta, sol.psi, start_state, atom, size, _chunk_rng(master_seed, i), cap)
        return np.exp(logv) * scale

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(n_chunks)))
    else:
        parts = [job(i) for i in range(n_chunks)]
    return EstimateReport.from_contributions(np.concatenate(parts), time.perf_counter() - start, master_seed,
                                             "regeneration-eigenfunction", atom=atom, start_state=start_state)


def _normalised_r(sol: PerronSolution, atom: int) -> np.ndarray:
    return sol.r / sol.r[atom]


def martingale_path(states, sums, schedule: RegenerationSchedule, theta, solution: Optional[PerronSolution] = None,
                    model=None, variant: str = "Z") -> MartingalePath:
    """``Z_0..Z_N`` (``variant="Z"``) or the stopped martingale ``W`` along one trajectory.

    ``W_n = exp(theta'S_{n^U} - (n^U) psi) r(X_{n^U})`` keeps the eigenfunction
    at ``U``; ``Z`` replaces it by 1 there.  Both use ``r`` scaled to 1 at the
    atom, so they agree for ``n <= U``.
    """
    if schedule.post_T is None:
        raise ValueError("no regeneration after T on this trajectory; extend the simulation")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if solution is None:
        solution = perron(as_markov(model), theta)
    states = np.asarray(states)
    sums = np.asarray(sums, dtype=float).reshape(len(states), -1)
    U = schedule.post_T
    r = _normalised_r(solution, schedule.atom)
    n = np.arange(len(states))
    logz = sums @ theta - n * solution.psi
    z = np.exp(logz) * r[states]
    if U < len(states):
        z_u = math.exp(logz[U]) * (1.0 if variant == "Z" else r[states[U]])
        z[U:] = z_u
    return MartingalePath(z, U, theta)


TRule = Union[int, Callable]


def _stop_time(rule: TRule, sums_hist, states_hist):
    # first t >= 1 at which the rule fires along the given history, or None
    if isinstance(rule, (int, np.integer)):
        return int(rule) if int(rule) < len(states_hist) else None
    for t in range(1, len(states_hist)):
        if rule(t, sums_hist[t], states_hist[t]):
            return t
    return None


def verify_martingale_exact(model, theta, T_rule: TRule, horizon: int = 6, atom: Optional[int] = None,
                            variant: str = "Z", cap: int = 8) -> float:
    """Exhaustive check of ``E[Z_{n+1} | F_n] = Z_n`` for all histories up to ``horizon``.

    ``T_rule`` is a fixed time or a predicate ``rule(t, S_t, X_t)``.  Returns
    the largest absolute defect over histories of positive probability.

    Raises:
        EnumerationError: horizon above ``cap`` or non-deterministic emissions.
    """
    mk = as_markov(model)
    if horizon > cap:
        raise EnumerationError(f"horizon {horizon} exceeds the cap {cap}")
    if mk.emission != "deterministic":
        raise EnumerationError("exact verification needs deterministic increments")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    sol = perron(mk, theta)
    atom = default_atom(mk) if atom is None else int(atom)
    r = _normalised_r(sol, atom)
    P = mk.transition
    K = mk.n_states

    def z_value(states, sums):
        n = len(states) - 1
        T = _stop_time(T_rule, sums, states)
        U = None
        if T is not None:
            later = [t for t in range(T + 1, n + 1) if states[t] == atom]
            U = later[0] if later else None
        if U is None:
            return math.exp(float(sums[n] @ theta) - n * sol.psi) * r[states[n]]
        base = math.exp(float(sums[U] @ theta) - U * sol.psi)
        return base if variant == "Z" else base * r[states[U]]

    worst = 0.0
    for x0 in range(K):
        for length in range(0, horizon):
            for tail in itertools.product(range(K), repeat=length):
                states = (x0,) + tail
                if any(P[a, b] == 0 for a, b in zip(states[:-1], states[1:])):
                    continue
                sums = np.zeros((length + 1, mk.dim))
                for t in range(1, length + 1):
                    sums[t] = sums[t - 1] + mk.offsets[states[t - 1], states[t]]
                here = z_value(states, sums)
                nxt = 0.0
                for y in range(K):
                    p = P[states[-1], y]
                    if p == 0:
                        continue
                    s_new = np.vstack([sums, sums[-1] + mk.offsets[states[-1], y]])
                    nxt += p * z_value(states + (y,), s_new)
                worst = max(worst, abs(nxt - here))
    return worst


def martingale_t_statistic(model, theta, T_rule: TRule, horizon: int = 6, m: int = 20_000, master_seed: int = 0,
                           atom: Optional[int] = None, min_count: int = 200) -> float:
    """Statistical martingale check for models that cannot be enumerated.

    Simulates ``m`` paths under the original kernel and bins the increments
    ``Z_{n+1} - Z_n`` by ``(n, X_n)``.  Returns the largest ``|t|`` over bins
    holding at least ``min_count`` samples.
    """
    mk = as_markov(model)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    sol = perron(mk, theta)
    atom = default_atom(mk) if atom is None else int(atom)
    rng = _chunk_rng(master_seed, 0)
    K, d = mk.n_states, mk.dim
    cum = np.cumsum(mk.transition, axis=1)
    init = np.cumsum(mk.initial_distribution())
    states = np.zeros((m, horizon + 1), dtype=int)
    sums = np.zeros((m, horizon + 1, d))
    states[:, 0] = np.minimum(np.searchsorted(init, rng.random(m), side="right"), K - 1)
    for t in range(1, horizon + 1):
        x = states[:, t - 1]
        nxt = np.minimum((cum[x] < rng.random(m)[:, None]).sum(axis=1), K - 1)
        inc = mk.offsets[x, nxt]
        if mk.emission == "gaussian":
            inc = inc + rng.standard_normal((m, d))
        states[:, t] = nxt
        sums[:, t] = sums[:, t - 1] + inc
    # U depends only on the whole path; the first horizon steps of Z follow from it
    Z = np.empty((m, horizon + 1))
    for i in range(m):
        T = _stop_time(T_rule, sums[i], states[i])
        U = None
        if T is not None:
            later = np.flatnonzero(states[i, T + 1:] == atom)
            U = int(T + 1 + later[0]) if later.size else None
        sched = RegenerationSchedule(atom, np.array([]), T, U if U is not None else horizon + 1)
        Z[i] = martingale_path(states[i], sums[i], sched, theta, sol).values
    worst = 0.0
    dz = np.diff(Z, axis=1)
    for n in range(horizon):
        for x in range(K):
            sel = dz[states[:, n] == x, n]
            if sel.size >= min_count and sel.std() > 0:
                worst = max(worst, abs(sel.mean()) / (sel.std(ddof=1) / math.sqrt(sel.size)))
    return worst
