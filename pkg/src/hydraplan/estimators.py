"""scikit-learn style wrappers around the latency fit and the strategy planner."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cost_model import LatencyCoeffs, build_profile, default_hardware, fit_latency
from .errors import ValidationError
from .planner import PlannerOptions, select_strategy
from .proposal import DEFAULT_CAP, DPSteps, propose
from .schemes import enumerate_schemes
from .workload import LengthSample, build_histogram


class LatencyModel(RegressorMixin, BaseEstimator):
    """Fits ``t(l) = a*l^2 + b*l + c`` with non-negative coefficients.

    ``X`` holds sequence lengths in its single column, ``y`` the measured seconds.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[1] != 1:
            raise ValidationError(f"expected one feature (sequence length), got {X.shape[1]}")
        report = fit_latency(np.column_stack([X[:, 0], y]))
        self.coef_ = np.asarray(report.coeffs.as_tuple())
        self.rmse_ = report.rmse
        self.max_rel_error_ = report.max_rel_error
        self.n_features_in_ = 1
        return self

    @property
    def coeffs_(self) -> LatencyCoeffs:
        check_is_fitted(self, "coef_")
        return LatencyCoeffs(*map(float, self.coef_))

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 1:
            raise ValidationError(f"expected one feature (sequence length), got {X.shape[1]}")
        return self.coeffs_(X[:, 0])


def _lengths(X) -> np.ndarray:
    arr = check_array(X, ensure_2d=False, dtype=np.int64)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValidationError("lengths must be a 1-D array or a single column")
        arr = arr[:, 0]
    return arr


class HeteroPlanner(BaseEstimator):
    """Proposes candidate strategies from a length corpus, then plans mini-batches.

    ``fit`` takes the corpus of sequence lengths; ``predict`` takes a list of
    mini-batches (each a list of lengths) and returns the estimated latency of
    the selected plan per mini-batch.  ``plan`` returns the plan itself.
    """

    def __init__(self, n_gpus=16, n_layers=32, pp_domain=(1, 2, 4), context_length=32768, profile=None,
                 bin_width=16, l_step=128, integer_steps=False, cap=DEFAULT_CAP, trials=100, seed=0):
        self.n_gpus = n_gpus
        self.n_layers = n_layers
        self.pp_domain = pp_domain
        self.context_length = context_length
        self.profile = profile
        self.bin_width = bin_width
        self.l_step = l_step
        self.integer_steps = integer_steps
        self.cap = cap
        self.trials = trials
        self.seed = seed

    def _options(self):
        return PlannerOptions(trials=self.trials, seed=self.seed)

    def fit(self, X, y=None):
        lengths = _lengths(X)
        if lengths.size == 0 or lengths.min() < 1:
            raise ValidationError("lengths must be positive")
        lengths = np.minimum(lengths, self.context_length)
        schemes = enumerate_schemes(self.n_gpus, self.n_layers, pp_domain=list(self.pp_domain))
        profile = self.profile if self.profile is not None else build_profile(schemes, hardware=default_hardware(self.n_gpus))
        schemes = [s for s in schemes if s in profile.coeffs]
        steps = DPSteps(1, 1, self.l_step) if self.integer_steps else DPSteps(l_step=self.l_step)
        l_max = -(-int(lengths.max()) // self.l_step) * self.l_step
        self.histogram_ = build_histogram(LengthSample.from_array(lengths), self.bin_width)
        self.profile_ = profile
        self.candidates_ = propose(self.histogram_, self.n_gpus, l_max, schemes, profile, steps, self.cap)
        self.l_max_ = l_max
        return self

    def plan(self, minibatch):
        check_is_fitted(self, "candidates_")
        best, _ = select_strategy(list(_lengths(minibatch)), self.candidates_.strategies, self.profile_,
                                  self._options())
        return best

    def predict(self, X):
        return np.asarray([self.plan(mb).estimated_latency for mb in X], dtype=np.float64)

    def selected_strategies(self, X):
        return [str(self.plan(mb).strategy) for mb in X]
