"""scikit-learn style front end over :func:`cwpinn.trainer.train`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import TestSet, predict
from .problems import get_problem
from .trainer import TrainConfig, train
from .weighting import SchemeConfig


class PINNRegressor(RegressorMixin, BaseEstimator):
    """Physics-informed network for one of the registered benchmark problems.

    ``fit(X)`` trains on the collocation points ``X`` (or on ``n_collocation``
    uniform draws when ``X`` is None); there is no target, the PDE residual
    is driven to zero. ``predict`` returns the first field, or every field
    with ``all_fields=True``.
    """

    def __init__(self, problem="heat1d", scheme="cwp", n_collocation=1000, iterations=50_000, lr0=1.5e-3,
                 decay_factor=0.8, decay_every=2000, lr_floor=0.0, resample_K=200, weight_update_stride=1,
                 M=4, epsilon=0.01, eta_lambda=1e-3, eta_star=None, sa_lr=1e-3, checkpoint_every=100,
                 n_test=10_000, problem_options=None, random_state=0):
        self.problem = problem
        self.scheme = scheme
        self.n_collocation = n_collocation
        self.iterations = iterations
        self.lr0 = lr0
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.lr_floor = lr_floor
        self.resample_K = resample_K
        self.weight_update_stride = weight_update_stride
        self.M = M
        self.epsilon = epsilon
        self.eta_lambda = eta_lambda
        self.eta_star = eta_star
        self.sa_lr = sa_lr
        self.checkpoint_every = checkpoint_every
        self.n_test = n_test
        self.problem_options = problem_options
        self.random_state = random_state

    def _build_problem(self):
        return get_problem(self.problem, **(self.problem_options or {}))

    def fit(self, X=None, y=None):
        if y is not None:
            raise ValueError("PINNRegressor learns from the PDE alone; y must be None")
        problem = self._build_problem()
        seed = int(self.random_state)
        if X is not None:
            X = check_array(X, dtype=np.float64, ensure_min_samples=1)
            if X.shape[1] != problem.input_dim:
                raise ValueError(f"X has {X.shape[1]} columns; {problem.name} expects {problem.input_dim}")
        config = TrainConfig(
            iterations=self.iterations, lr0=self.lr0, decay_factor=self.decay_factor,
            decay_every=self.decay_every, lr_floor=self.lr_floor, resample_K=self.resample_K,
            weight_update_stride=self.weight_update_stride, checkpoint_every=self.checkpoint_every, seed=seed,
        )
        scheme = SchemeConfig(self.scheme, self.eta_lambda, self.eta_star, self.M, self.epsilon, self.sa_lr)
        test = TestSet.for_problem(problem, self.n_test, seed) if problem.exact_solution else None
        result = train(problem, scheme, config, n_collocation=self.n_collocation, test=test, points=X)
        self.problem_ = problem
        self.params_ = result.params
        self.history_ = result.history
        self.weights_ = result.weights.lambdas
        self.collocation_ = result.collocation.points
        self.n_features_in_ = problem.input_dim
        return self

    def predict(self, X, all_fields=False):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        out = predict(self.problem_, self.params_, X)
        return out if all_fields else out[:, 0]

    def score(self, X, y=None, sample_weight=None):
        """R^2 of the first field against ``y``, or against the exact solution when y is None."""
        if y is None:
            check_is_fitted(self, "params_")
            X = check_array(X, dtype=np.float64)
            y = np.asarray(self.problem_.exact_solution(X))[:, 0]
        return super().score(X, y, sample_weight=sample_weight)
