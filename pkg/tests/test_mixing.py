import math

import numpy as np
import pytest

from exceedmc.estimators import make_g
from exceedmc.exp_family import gaussian_model, lattice_model
from exceedmc.markov_additive import perron, tilt_for_mean_markov
from exceedmc.mixing import (
    ConfigurationError,
    MixtureSpec,
    NumericalOverflowError,
    build_boundary_grid_mixture,
    build_finite_mixture,
    build_regime_mixture,
    build_tail_grid_mixture,
    build_tilt_mixture,
    inverse_likelihood_ratio,
    log_inverse_likelihood_ratio,
    regime_masses,
    sample_component,
    untilted_mixture,
)


def test_finite_mixture_weights_example1(ex1):
    mix = build_finite_mixture(ex1, [1.5, 2.7], n=10, rates=[0.120, 0.251])
    expected = math.exp(-1.2) / (math.exp(-1.2) + math.exp(-2.51))
    assert mix.weights[0] == pytest.approx(expected, abs=1e-12)
    assert mix.weights[0] == pytest.approx(0.78747, abs=1e-4)


def test_finite_mixture_basic_rules(ex1):
    assert build_finite_mixture(ex1, [2.5], [1.0]).weights.tolist() == [1.0]
    coin = lattice_model([-1.0, 1.0], [0.5, 0.5])
    assert np.allclose(build_finite_mixture(coin, [0.4, -0.4], [0.5, 0.5]).weights, [0.5, 0.5])
    with pytest.raises(ConfigurationError):
        build_finite_mixture(coin, [0.4, -0.4], [0.7, 0.7])
    with pytest.raises(ConfigurationError):
        build_finite_mixture(coin, [0.4], "exponential")


def test_sample_component_frequencies(ex1):
    mix = build_finite_mixture(ex1, [1.5, 2.7], n=10, rates=[0.120, 0.251])
    draws = sample_component(mix, np.random.default_rng(3), 100_000)
    w = mix.weights[0]
    assert abs(np.mean(draws == 0) - w) < 4 * math.sqrt(w * (1 - w) / draws.size)
    single = build_finite_mixture(ex1, [2.5], [1.0])
    assert np.all(sample_component(single, np.random.default_rng(0), 100) == 0)


def test_tail_grid_gaussian_weight_ratio():
    mix = build_tail_grid_mixture(gaussian_model([0.0]), 20, 1.0, make_g("identity"), spacing=0.05, box=([-3], [3]))
    mus = mix.mus[:, 0]
    w1 = mix.weights[np.argmin(np.abs(mus - 1.0))]
    w11 = mix.weights[np.argmin(np.abs(mus - 1.1))]
    assert w1 / w11 == pytest.approx(math.exp(2.1), rel=1e-9)
    assert mix.mus[np.argmax(mix.weights), 0] == pytest.approx(1.0)
    assert mix.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_tail_grid_empty_region():
    with pytest.raises(ConfigurationError):
        build_tail_grid_mixture(lattice_model([-1.0, 1.0], [0.5, 0.5]), 10, 2.0, make_g("identity"))


def test_boundary_grid_single_interior_point():
    coin = lattice_model([-1.0, 1.0], [0.5, 0.5])
    mix = build_boundary_grid_mixture(coin, make_g("identity"), 3, 2, 6, spacing=0.5)
    assert len(mix) == 1 and mix.weights[0] == 1.0 and mix.dropped == 2


def test_regime_mixture_example2(ex2):
    mix = build_regime_mixture(ex2, 20, 5, 50, 7)
    g = np.sum(mix.mus ** 2, axis=1)
    assert len(mix) > 100 and np.all(g <= 7 + 1e-12) and np.all(g >= 20 / 50 - 1e-12)
    assert mix.weights.sum() == pytest.approx(1.0, abs=1e-12)
    ann = (g >= 20 / 50) & (g <= 20 / 5)
    score = mix.rates[ann] / g[ann]
    first = -1.5 * np.log(g[ann]) - 20 * score
    assert np.argmax(first) == np.argmax(mix.weights[ann])


def test_regime_and_boundary_builders_agree(ex2):
    c, n0, n1, b = 20, 5, 50, 7
    regime = build_regime_mixture(ex2, c, n0, n1, b)
    g = np.sum(regime.mus ** 2, axis=1)
    first, _ = regime_masses(g, regime.rates, c, n0, n1, b, 3)
    # same first-term formula as the boundary builder's Lambda_c term
    ann = np.isfinite(first)
    expected = -1.5 * np.log(g[ann]) - c * regime.rates[ann] / g[ann]
    assert np.allclose(first[ann], expected)


def test_regime_requires_b_large_enough(ex2):
    with pytest.raises(ConfigurationError):
        build_regime_mixture(ex2, 20, 5, 50, 3.0)


def test_single_component_matches_siegmund_form(ex1):
    tp = tilt_for_mean_markov(ex1, [2.7])
    mix = build_finite_mixture(ex1, [2.7], [1.0])
    S, t, xt, x0 = 19.0, 7, 2, 1
    closed = math.exp(tp.theta[0] * S - t * tp.psi) * tp.solution.r[xt] / tp.solution.r[x0]
    assert inverse_likelihood_ratio(mix, [S], t, xt, x0) == pytest.approx(closed, rel=1e-12)


def test_untilted_mixture_is_one(ex1):
    mix = untilted_mixture(ex1)
    assert inverse_likelihood_ratio(mix, [13.0], 6, 2, 0) == 1.0


def test_per_step_product_oracle():
    P = np.array([[0.7, 0.3], [0.4, 0.6]])
    from exceedmc.markov_additive import MarkovAdditiveModel

    mk = MarkovAdditiveModel(P, np.array([[[-1.0], [1.0]], [[-1.0], [1.0]]]))
    mix = build_tilt_mixture(mk, [[0.3], [-0.6]], [0.25, 0.75])
    path = [0, 1, 1, 0]
    value = 0.0
    for k in range(2):
        sol = perron(mk, mix.thetas[k])
        ratio = 1.0
        for x, y in zip(path[:-1], path[1:]):
            ratio *= sol.tilted[x, y] / P[x, y]
        value += mix.weights[k] * ratio
    S = sum(mk.offsets[x, y, 0] for x, y in zip(path[:-1], path[1:]))
    assert inverse_likelihood_ratio(mix, [S], 3, path[-1], path[0]) == pytest.approx(value, rel=1e-12)


def test_flexibility_rule(ex1):
    a = build_finite_mixture(ex1, [1.5, 2.7], [0.5, 0.5])
    b = build_finite_mixture(ex1, [1.5, 2.0, 2.7], [0.3, 0.4, 0.3])
    eps = 0.6  # b's weights dominate a's by this factor on a's support
    rng = np.random.default_rng(4)
    S = rng.integers(10, 31, size=(200, 1)).astype(float)
    xt, x0 = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
    la = log_inverse_likelihood_ratio(a, S, 10, xt, x0)
    lb = log_inverse_likelihood_ratio(b, S, 10, xt, x0)
    assert np.all(lb >= np.log(eps) + la - 1e-12)


def test_log_domain_survives_large_sums(ex1):
    mix = build_finite_mixture(ex1, [1.5, 2.7], [0.5, 0.5])
    logv = log_inverse_likelihood_ratio(mix, [[8990.0]], [3000], [2], [0])
    assert np.isfinite(logv).all() and logv[0] > 1000
    with pytest.raises(NumericalOverflowError):
        inverse_likelihood_ratio(mix, [8990.0], 3000, 2, 0)


def test_invalid_weights_rejected():
    with pytest.raises(ConfigurationError):
        MixtureSpec("finite", np.zeros((1, 1)), np.array([0.5]), np.zeros((1, 1)), np.zeros(1), np.zeros(1),
                    np.ones((1, 1)), np.ones((1, 1, 1)))


def test_dump_rows(ex1):
    rows = build_finite_mixture(ex1, [1.5, 2.7], n=10).to_rows()
    assert set(rows[0]) == {"mu1", "weight", "theta1", "psi", "phi"}
