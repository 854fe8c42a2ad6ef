import math

import numpy as np
import pytest
from scipy.stats import norm

from conftest import example1_region, within
from exceedmc.estimators import (
    BoundaryEvent,
    EnumerationError,
    EstimateReport,
    NoRootError,
    TailEvent,
    estimate_boundary,
    estimate_direct,
    estimate_first_passage,
    estimate_tail,
    exact_probability_oracle,
    exact_tail_moments,
    lattice_sum_distribution,
    make_g,
    relative_second_moment,
    simulate,
    solve_zero_cgf,
    trajectories,
)
from exceedmc.exp_family import gaussian_model, lattice_model
from exceedmc.markov_additive import MarkovAdditiveModel
from exceedmc.mixing import build_finite_mixture, build_tail_grid_mixture, build_tilt_mixture, untilted_mixture

COIN = lattice_model([-1.0, 1.0], [0.5, 0.5])


def test_oracle_fair_coin():
    ev = TailEvent(4, make_g("identity"), 1.0)
    assert exact_probability_oracle(COIN, ev).probability == pytest.approx(1 / 16, abs=1e-15)


def test_oracle_refuses_large_horizon(ex1, ex2):
    with pytest.raises(EnumerationError):
        exact_probability_oracle(ex1, TailEvent(13, region=example1_region))
    with pytest.raises(EnumerationError):
        exact_probability_oracle(ex2, TailEvent(2, make_g("sqnorm"), 1.0))


def test_sum_distribution_matches_enumeration(ex1):
    for n in (3, 6):
        ev = TailEvent(n, region=example1_region)
        assert exact_tail_moments(ex1, n, example1_region).probability == pytest.approx(
            exact_probability_oracle(ex1, ev).probability, abs=1e-14)
    D, s = lattice_sum_distribution(ex1, 5)
    assert D.sum() == pytest.approx(1.0, abs=1e-14)


def test_example1_t4_importance_vs_oracle(ex1):
    region = lambda mu: mu[:, 0] >= 2.7 - 1e-12  # noqa: E731
    p = exact_probability_oracle(ex1, TailEvent(4, region=region)).probability
    mix = build_finite_mixture(ex1, [1.5, 2.7], n=4)
    rep = estimate_tail(ex1, mix, 4, TailEvent(4, region=region), m=20_000, master_seed=3)
    assert abs(rep.estimate - p) < 3 * rep.std_error


@pytest.mark.parametrize("n, tol_se", [(10, 4), (40, 4)])
def test_table1_mixture_against_exact(ex1, n, tol_se):
    p = exact_tail_moments(ex1, n, example1_region).probability
    mix = build_finite_mixture(ex1, [1.5, 2.7], n=n)
    rep = estimate_tail(ex1, mix, n, region=example1_region, m=10_000, master_seed=1)
    assert within(rep.estimate, p, rep.std_error)


def test_whole_space_estimates_one(ex1):
    mix = build_finite_mixture(ex1, [2.7], [1.0])
    ex = exact_probability_oracle(ex1, TailEvent(5, region=lambda mu: np.ones(len(mu), bool)), mixture=mix)
    assert ex.weighted == pytest.approx(1.0, abs=1e-12)
    rep = estimate_direct(ex1, TailEvent(5, region=lambda mu: np.ones(len(mu), bool)), m=1000)
    assert rep.estimate == 1.0 and rep.std_error == 0.0


def test_report_invariants(ex1):
    mix = build_finite_mixture(ex1, [1.5, 2.7], n=20)
    rep = estimate_tail(ex1, mix, 20, region=example1_region, m=3000, master_seed=2)
    assert rep.std_error >= 0 and rep.second_moment >= rep.estimate ** 2 and rep.runs == 3000


def test_relative_second_moment_identities():
    perfect = EstimateReport(0.2, 0.0, 10, 0.04, 0.0, 0, "x")
    assert relative_second_moment(perfect, 0.2) == pytest.approx(1.0)
    direct = EstimateReport(0.1, 0.0, 10, 0.1, 0.0, 0, "direct")
    assert relative_second_moment(direct, 0.1) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        relative_second_moment(direct, 0.0)


def test_boundary_nearly_sure_event():
    up = lattice_model([0.0, 1.0], [0.01, 0.99])
    ev = BoundaryEvent(make_g("identity"), 0.5, 2, 4)
    p = exact_probability_oracle(up, ev).probability
    assert p > 0.99
    rep = estimate_boundary(up, untilted_mixture(up), make_g("identity"), 0.5, 2, 4, m=5000)
    assert within(rep.estimate, p, max(rep.std_error, 1e-3))


def test_stopping_rule_is_first_crossing(ex2):
    from exceedmc.mixing import build_regime_mixture

    g = make_g("sqnorm")
    c, n0, n1 = 20, 5, 50
    mix = build_regime_mixture(ex2, c, n0, n1, 7)
    batch = simulate(ex2, mix, BoundaryEvent(g, c, n0, n1), 300, np.random.default_rng(0), keep_paths=True)
    for rec in trajectories(batch, ex2):
        if not rec.stopped:
            continue
        T = rec.stop_index
        assert np.allclose(np.cumsum(rec.increments, axis=0), rec.sums[1:], atol=1e-12)
        assert T * g(rec.sums[T][None] / T)[0] >= c - 1e-9
        for t in range(n0, T):
            assert t * g(rec.sums[t][None] / t)[0] < c


def test_direct_agrees_with_importance_on_common_event(ex1):
    region = lambda mu: mu[:, 0] >= 2.2  # noqa: E731
    direct = estimate_direct(ex1, TailEvent(10, region=region), m=20_000, master_seed=5)
    mix = build_finite_mixture(ex1, [2.2], [1.0])
    imp = estimate_tail(ex1, mix, 10, TailEvent(10, region=region), m=20_000, master_seed=6)
    assert abs(direct.estimate - imp.estimate) < 4 * math.hypot(direct.std_error, imp.std_error)


def test_worker_count_does_not_change_result(ex1):
    mix = build_finite_mixture(ex1, [1.5, 2.7], n=20)
    one = estimate_tail(ex1, mix, 20, region=example1_region, m=9000, master_seed=11, workers=1)
    four = estimate_tail(ex1, mix, 20, region=example1_region, m=9000, master_seed=11, workers=4)
    assert (one.estimate, one.std_error, one.second_moment) == (four.estimate, four.std_error, four.second_moment)


def test_trace_output(ex1, tmp_path):
    import json

    mix = build_finite_mixture(ex1, [1.5, 2.7], n=10)
    path = tmp_path / "trace.ndjson"
    rep = estimate_tail(ex1, mix, 10, region=example1_region, m=50, master_seed=1, trace=str(path))
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert len(lines) == 50
    assert math.fsum(x["contribution"] for x in lines) / 50 == pytest.approx(rep.estimate)


def test_solve_zero_cgf_closed_forms():
    assert solve_zero_cgf(gaussian_model([-0.5])).theta[0] == pytest.approx(1.0, abs=1e-9)
    assert solve_zero_cgf(gaussian_model([-0.8])).theta[0] == pytest.approx(1.6, abs=1e-9)
    with pytest.raises(NoRootError):
        solve_zero_cgf(gaussian_model([0.5]))


def test_solve_zero_cgf_two_state_chain_grid_scan():
    from exceedmc.markov_additive import perron

    mk = MarkovAdditiveModel(np.array([[0.6, 0.4], [0.7, 0.3]]), np.array([[[-1.0], [1.0]], [[-1.0], [1.0]]]))
    tp = solve_zero_cgf(mk)
    grid = np.linspace(0.01, 3, 300_001)
    psi = np.array([perron(mk, [t]).psi for t in grid[::1000]])
    coarse = grid[::1000][np.argmin(np.abs(psi))]
    fine = np.linspace(coarse - 0.02, coarse + 0.02, 40_001)
    vals = np.abs([perron(mk, [t]).psi for t in fine])
    assert tp.theta[0] == pytest.approx(fine[np.argmin(vals)], abs=1e-6)
    assert abs(tp.psi) < 1e-10


def test_first_passage_level_against_direct():
    model = gaussian_model([-0.5])
    rep = estimate_first_passage(model, "level", 5.0, m=10_000, master_seed=1)
    assert rep.truncations == 0
    # Siegmund: exp(-theta S_T) with theta = 1 and overshoot; direct oracle by long runs
    direct = estimate_direct(model, _level_event(5.0, 400), m=200_000, master_seed=2)
    assert abs(rep.estimate - direct.estimate) < 4 * math.hypot(rep.std_error, direct.std_error)


def _level_event(c, steps):
    from exceedmc.estimators import FirstPassageEvent

    return FirstPassageEvent("level", c, steps)


def test_first_passage_zero_level_sparre_andersen():
    model = gaussian_model([-0.5])
    n = np.arange(1, 20_000)
    exact = 1 - math.exp(-np.sum(norm.cdf(-0.5 * np.sqrt(n)) / n))
    rep = estimate_first_passage(model, "level", 0.0, m=10_000, master_seed=4)
    assert within(rep.estimate, exact, rep.std_error)


def test_first_passage_max_symmetry():
    model = gaussian_model([-0.5, -0.5])
    a = estimate_first_passage(model, "max", 3.0, m=10_000, master_seed=7, weights=[0.5, 0.5])
    swapped = estimate_first_passage(gaussian_model([-0.5, -0.5]), "halfspace", 3.0, m=10_000, master_seed=7,
                                     normal=[0.0, 1.0])
    single = estimate_first_passage(gaussian_model([-0.5, -0.5]), "halfspace", 3.0, m=10_000, master_seed=7,
                                    normal=[1.0, 0.0])
    assert abs(swapped.estimate - single.estimate) < 4 * math.hypot(swapped.std_error, single.std_error)
    assert a.estimate >= single.estimate - 4 * math.hypot(a.std_error, single.std_error)


def test_first_passage_truncation_counted():
    rep = estimate_first_passage(gaussian_model([-0.5]), "level", 5.0, m=500, master_seed=1, max_steps=3)
    assert rep.truncations > 0


def test_make_g_unknown():
    with pytest.raises(ValueError):
        make_g("cube")
