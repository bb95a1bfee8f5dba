"""Rational-factor sum-of-squares conditional densities on Beta-kernel bases,
with exact normalization and closed-form belief propagation."""

from .beta_algebra import BetaBasis, CrossMomentTensor, cross_moment_tensor, gram_matrix, quadrature_oracle
from .belief import Belief, PropagationEngine, integrate_belief, marginal_grid, moments, propagate, propagate_many
from .quadratic_forms import PsdFactor, QuadraticForm
from .rf_cde import (RationalFactorCDE, conditional_param_count, count_parameters, eval_conditional,
                     initial_param_count, log_conditional, solve_normalization, uniform_model)
from .systems import BoxTransform, evaluate_llh, get_system, make_datasets, simulate
from .training import TrainConfig, train_cde, train_initial

__version__ = "0.1.0"
