import math

import numpy as np
import pytest

from conftest import THETA_15, THETA_27
from exceedmc import exp_family
from exceedmc.exp_family import TiltError
from exceedmc.markov_additive import (
    ConvergenceError,
    MarkovAdditiveModel,
    as_markov,
    markov_cgf_gradient,
    perron,
    sample_step_tilted,
    stationary,
    tilt_for_mean_markov,
    tilted_kernel,
)


def test_tilted_kernel_entries(ex1, ex2):
    assert np.allclose(tilted_kernel(ex1, [0.0]), ex1.transition)
    assert tilted_kernel(ex1, [1.0])[0, 2] == pytest.approx(0.2 * math.e ** 3, rel=1e-12)
    a = 0.37
    p_tilde = np.array([[0.5 * math.exp(-a), 0.3, 0.2 * math.exp(a)],
                        [0.2 * math.exp(-a), 0.5, 0.3 * math.exp(a)],
                        [0.3 * math.exp(-a), 0.2, 0.5 * math.exp(a)]])
    assert np.allclose(tilted_kernel(ex2, [a, 0, 0]), math.exp(a * a / 2) * p_tilde, rtol=1e-12)


def test_stationary():
    assert np.allclose(stationary(np.array([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]])), 1 / 3)
    assert np.allclose(stationary(np.array([[0.2, 0.8], [0.8, 0.2]])), 0.5)


def test_perron_at_zero(ex1):
    sol = perron(ex1, [0.0])
    assert sol.psi == 0.0
    assert np.array_equal(sol.r, np.ones(3))
    assert np.allclose(sol.tilted, ex1.transition)


@pytest.mark.parametrize("theta, r_expected", [
    (THETA_15, (1.20, 0.88, 0.92)),
    (THETA_27, (0.747, 1.02, 1.23)),
])
def test_perron_eigenvector_values(ex1, theta, r_expected):
    sol = perron(ex1, [theta])
    assert np.allclose(sol.r, r_expected, atol=0.01)
    assert ex1.pi @ sol.r == pytest.approx(1.0, abs=1e-10)
    resid = tilted_kernel(ex1, [theta]) @ sol.r - sol.eigenvalue * sol.r
    assert np.max(np.abs(resid)) < 1e-9
    assert np.allclose(sol.tilted.sum(axis=1), 1.0, atol=1e-10)


def test_eigenvalue_label_convention(ex1):
    # The eigenvalues for states labelled 0, 1, 2 are exp(psi - theta).
    for theta, target in ((THETA_15, 0.688), (THETA_27, 3.11)):
        sol = perron(ex1, [theta])
        assert math.exp(sol.psi - theta) == pytest.approx(target, abs=0.002 if theta < 0 else 0.01)


def test_cgf_gradient(ex1):
    assert markov_cgf_gradient(ex1, [0.0])[0] == pytest.approx(2.0, abs=1e-6)
    assert markov_cgf_gradient(ex1, [THETA_15])[0] == pytest.approx(1.5, abs=1e-3)
    single = MarkovAdditiveModel(np.ones((1, 1)), np.zeros((1, 1, 1)), "gaussian")
    assert markov_cgf_gradient(single, [0.7])[0] == pytest.approx(0.7, abs=1e-6)


@pytest.mark.parametrize("mu, theta, phi", [(1.5, -0.507, 0.120), (2.7, 0.815, 0.251)])
def test_tilt_for_mean_example1(ex1, mu, theta, phi):
    tp = tilt_for_mean_markov(ex1, [mu])
    assert tp.theta[0] == pytest.approx(theta, abs=0.002)
    assert tp.rate == pytest.approx(phi, abs=0.001)
    assert tp.solution.drift[0] == pytest.approx(mu, abs=1e-9)


def test_tilt_at_drift_is_zero(ex1, ex2):
    tp = tilt_for_mean_markov(ex1, [2.0])
    assert abs(tp.theta[0]) < 1e-8 and abs(tp.rate) < 1e-12
    tp = tilt_for_mean_markov(ex2, [0.0, 0.0, 0.0])
    assert np.allclose(tp.theta, 0, atol=1e-8)


def test_example2_separable_coordinates(ex2):
    mu = np.array([0.8, -0.4, 1.1])
    tp = tilt_for_mean_markov(ex2, mu)
    assert tp.theta[1] == pytest.approx(-0.4) and tp.theta[2] == pytest.approx(1.1)
    assert np.allclose(tp.solution.drift, mu, atol=1e-9)
    assert tp.rate >= 0


def test_unattainable_mean_raises(ex1):
    with pytest.raises(TiltError):
        tilt_for_mean_markov(ex1, [3.5])


def test_single_state_reduces_to_iid():
    iid = exp_family.lattice_model([-1.0, 2.0], [0.6, 0.4])
    mk = as_markov(iid)
    for theta in (-0.8, 0.0, 0.5):
        assert perron(mk, [theta]).psi == pytest.approx(exp_family.cgf(iid, [theta]), abs=1e-10)
    gauss = MarkovAdditiveModel(np.ones((1, 1)), np.full((1, 1, 1), 0.3), "gaussian")
    assert perron(gauss, [0.9]).psi == pytest.approx(exp_family.cgf(exp_family.gaussian_model([0.3]), [0.9]),
                                                     abs=1e-12)


def test_reducible_chain_rejected():
    with pytest.raises(ValueError):
        MarkovAdditiveModel(np.eye(2), np.zeros((2, 2, 1)))


def test_sample_step_long_run_mean(ex1):
    sol = tilt_for_mean_markov(ex1, [2.7]).solution
    rng = np.random.default_rng(5)
    state, incs = 0, []
    for _ in range(100_000):
        state, inc = sample_step_tilted(ex1, sol, state, rng)
        incs.append(inc[0])
    incs = np.asarray(incs)
    # batch means absorb the chain's autocorrelation
    batches = incs.reshape(100, -1).mean(axis=1)
    assert abs(incs.mean() - 2.7) < 4 * batches.std(ddof=1) / 10


def test_sample_step_untilted_frequencies(ex1):
    sol = perron(ex1, [0.0])
    rng = np.random.default_rng(8)
    counts = np.zeros((3, 3))
    state = 0
    for _ in range(100_000):
        nxt, _ = sample_step_tilted(ex1, sol, state, rng)
        counts[state, nxt] += 1
        state = nxt
    freq = counts / counts.sum(axis=1, keepdims=True)
    se = np.sqrt(ex1.transition * (1 - ex1.transition) / counts.sum(axis=1, keepdims=True))
    assert np.all(np.abs(freq - ex1.transition) < 4 * se)


def test_example2_tilted_mean_increment(ex2):
    mu = np.array([0.5, 0.3, -0.2])
    sol = tilt_for_mean_markov(ex2, mu).solution
    rng = np.random.default_rng(9)
    state, incs = 0, []
    for _ in range(50_000):
        state, inc = sample_step_tilted(ex2, sol, state, rng)
        incs.append(inc)
    batches = np.asarray(incs).reshape(100, -1, 3).mean(axis=1)
    se = batches.std(axis=0, ddof=1) / 10
    assert np.all(np.abs(batches.mean(axis=0) - mu) < 4 * se)


def test_power_iteration_cap():
    mk = MarkovAdditiveModel(np.array([[0.9, 0.1], [0.1, 0.9]]), np.array([[[0.0], [1.0]], [[0.0], [1.0]]]))
    with pytest.raises(ConvergenceError):
        perron(mk, [3.0], tol=0.0, max_iter=3)
