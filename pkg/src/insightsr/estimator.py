"""scikit-learn compatible wrappers.

``SkeletonRegressor`` fits the parameters of a fixed skeleton.
``EquationSearchRegressor`` runs the full LLM-guided search in ``fit`` and
predicts with the best equation found.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import engine as engine_mod
from .data import Dataset, VariableInfo
from .expr import evaluate, parse, render
from .fit import FitConfig, fit_arrays


def _names(variable_names: Optional[Sequence[str]], n_features: int) -> list[str]:
    if variable_names is None:
        return [f"x{i}" for i in range(n_features)]
    names = list(variable_names)
    if len(names) != n_features:
        raise ValueError(f"got {len(names)} variable names for {n_features} features")
    return names


class SkeletonRegressor(RegressorMixin, BaseEstimator):
    """Fit the learnable parameters of one equation skeleton.

    Parameters
    ----------
    expression : str
        Skeleton such as ``"params[0]*sin(x0) + params[1]"``.
    variable_names : list of str, optional
        Names of the columns of ``X``; defaults to ``x0, x1, ...``.
    restarts, max_iter, tol : fitting controls (see :class:`FitConfig`).
    random_state : int
        Seed for the restart draws.
    """

    def __init__(self, expression="params[0]", variable_names=None, restarts=5, max_iter=200, tol=1e-9,
                 random_state=0):
        self.expression = expression
        self.variable_names = variable_names
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        names = _names(self.variable_names, X.shape[1])
        self.expression_ = parse(self.expression, names)
        cfg = FitConfig(restarts=self.restarts, max_iters_per_restart=self.max_iter, tolerance=self.tol)
        result = fit_arrays(self.expression_, X, y, names, cfg, seed=self.random_state)
        self.params_ = result.params
        self.mse_ = result.mse
        self.converged_ = result.converged
        self.feature_names_ = names
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return evaluate(self.expression_, self.params_, X, self.feature_names_)


class EquationSearchRegressor(RegressorMixin, BaseEstimator):
    """Discover an equation for ``y`` from ``X`` with an LLM backend.

    All of ``X`` is used as training data. The fitted estimator exposes
    ``equation_`` (rendered skeleton), ``params_``, ``history_`` and
    ``result_`` (the full :class:`~insightsr.engine.RunResult`).
    """

    def __init__(
        self,
        backend=None,
        n_iterations=20,
        k=3,
        b=4,
        lam=0.5,
        insight_probability=1.0,
        use_positive=True,
        use_negative=True,
        use_invalid=True,
        variable_names=None,
        target_name="y",
        description="",
        fit_restarts=5,
        random_state=0,
    ):
        self.backend = backend
        self.n_iterations = n_iterations
        self.k = k
        self.b = b
        self.lam = lam
        self.insight_probability = insight_probability
        self.use_positive = use_positive
        self.use_negative = use_negative
        self.use_invalid = use_invalid
        self.variable_names = variable_names
        self.target_name = target_name
        self.description = description
        self.fit_restarts = fit_restarts
        self.random_state = random_state

    def _config(self) -> engine_mod.EngineConfig:
        return engine_mod.EngineConfig(
            iterations=self.n_iterations,
            k=self.k,
            b=self.b,
            lam=self.lam,
            insight_probability=self.insight_probability,
            use_positive=self.use_positive,
            use_negative=self.use_negative,
            use_invalid=self.use_invalid,
            seed=self.random_state,
            fit=FitConfig(restarts=self.fit_restarts),
        )

    def fit(self, X, y):
        if self.backend is None:
            raise ValueError("EquationSearchRegressor needs a backend")
        X, y = check_X_y(X, y, y_numeric=True)
        names = _names(self.variable_names, X.shape[1])
        data = Dataset(
            name="estimator",
            description=self.description,
            variables=tuple(VariableInfo(n) for n in names),
            X=X,
            y=y,
            target_name=self.target_name,
            splits={"train": np.arange(len(y))},
        )
        result = engine_mod.run(self._config(), data, self.backend)
        if result.best is None:
            raise RuntimeError(result.error or "search produced no valid equation")
        self.result_ = result
        self.history_ = result.history
        self.expression_ = result.best.expression
        self.equation_ = render(result.best.expression)
        self.params_ = np.asarray(result.best.fit.params)
        self.feature_names_ = names
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return evaluate(self.expression_, self.params_, X, self.feature_names_)
