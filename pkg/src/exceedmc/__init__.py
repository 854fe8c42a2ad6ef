"""Importance sampling for exceedance and boundary-crossing probabilities.

Mixtures of exponentially tilted measures for i.i.d. and Markov additive
random walks, with regeneration-based diagnostics and a batch command line.
"""

from .estimators import (
    BoundaryEvent,
    EstimateReport,
    FirstPassageEvent,
    TailEvent,
    estimate_boundary,
    estimate_direct,
    estimate_first_passage,
    estimate_tail,
    exact_probability_oracle,
    relative_second_moment,
    solve_zero_cgf,
)
from .exp_family import IidModel, TiltPoint, gaussian_model, lattice_model, rate, tilt_for_mean
from .markov_additive import (
    MarkovAdditiveModel,
    PerronSolution,
    example1_model,
    example2_model,
    perron,
    tilt_for_mean_markov,
)
from .mixing import (
    MixtureSpec,
    build_boundary_grid_mixture,
    build_finite_mixture,
    build_regime_mixture,
    build_tail_grid_mixture,
    inverse_likelihood_ratio,
)

__version__ = "0.1.0"
