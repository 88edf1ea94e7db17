"""Parameter fitting for equation skeletons.

Parameters are optimised with BFGS on the training mean squared error.
Skeletons are black boxes, so gradients come from central finite
differences. A handful of seeded restarts guards against poor local minima.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .expr import EvalError, Expression, ExpressionError, evaluate

_EPS = np.finfo(float).eps


class FitError(ExpressionError):
    """Skeleton rejected before fitting (e.g. too many parameters)."""


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 5
    max_iters_per_restart: int = 200
    grad_step: float = float(np.sqrt(_EPS))
    tolerance: float = 1e-9
    max_params: int = 10
    # Starting points used before falling back to standard-normal draws.
    initial_guesses: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        for name in ("restarts", "max_iters_per_restart", "max_params"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("grad_step", "tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(
            self, "initial_guesses", tuple(tuple(float(v) for v in g) for g in self.initial_guesses)
        )

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "restarts": self.restarts,
            "max_iters_per_restart": self.max_iters_per_restart,
            "grad_step": self.grad_step,
            "tolerance": self.tolerance,
            "max_params": self.max_params,
            "initial_guesses": [list(g) for g in self.initial_guesses],
        }


@dataclass(frozen=True)
class FitResult:
    params: np.ndarray
    score: float
    mse: float
    converged: bool
    restarts_used: int
    evals: int

    def __eq__(self, other):
        if not isinstance(other, FitResult):
            return NotImplemented
        return (
            np.array_equal(self.params, other.params)
            and self.score == other.score
            and self.mse == other.mse
            and self.converged == other.converged
            and self.restarts_used == other.restarts_used
            and self.evals == other.evals
        )


def numerical_gradient(
    fun: Callable[[np.ndarray], float], theta: np.ndarray, grad_step: float
) -> np.ndarray:
    """Central differences with step ``grad_step * max(1, |theta_j|)``.

    Coordinates whose central difference is non-finite fall back to a
    one-sided difference; if that also fails the component is NaN.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    f0 = None
    for j in range(theta.size):
        h = grad_step * max(1.0, abs(theta[j]))
        up = theta.copy()
        up[j] += h
        down = theta.copy()
        down[j] -= h
        f_up, f_down = fun(up), fun(down)
        if np.isfinite(f_up) and np.isfinite(f_down):
            grad[j] = (f_up - f_down) / (2 * h)
            continue
        if f0 is None:
            f0 = fun(theta)
        if np.isfinite(f_up) and np.isfinite(f0):
            grad[j] = (f_up - f0) / h
        elif np.isfinite(f_down) and np.isfinite(f0):
            grad[j] = (f0 - f_down) / h
        else:
            grad[j] = np.nan
    return grad


@dataclass
class _Minimum:
    x: np.ndarray
    f: float
    converged: bool
    iterations: int


def _backtrack(fun, x, f, g, p, c1=1e-4, shrink=0.5, max_steps=60):
    slope = float(g @ p)
    alpha = 1.0
    for _ in range(max_steps):
        x_new = x + alpha * p
        f_new = fun(x_new)
        # Non-finite values count as +inf, so the step is simply shortened.
        if np.isfinite(f_new) and f_new <= f + c1 * alpha * slope:
            return x_new, f_new
        alpha *= shrink
    return None, None


def minimize_bfgs(
    fun: Callable[[np.ndarray], float],
    x0: np.ndarray,
    grad: Callable[[np.ndarray], np.ndarray],
    max_iter: int = 200,
    gtol: float = 1e-9,
) -> _Minimum:
    """Plain BFGS with an Armijo backtracking line search."""
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    f = fun(x)
    if not np.isfinite(f):
        return _Minimum(x, np.inf, False, 0)
    g = grad(x)
    H = np.eye(n)
    scaled = False
    for it in range(max_iter):
        if not np.all(np.isfinite(g)):
            return _Minimum(x, f, False, it)
        if np.max(np.abs(g)) <= gtol or f == 0.0:
            return _Minimum(x, f, True, it)
        p = -H @ g
        if not g @ p < 0:
            H = np.eye(n)
            p = -g
        x_new, f_new = _backtrack(fun, x, f, g, p)
        if x_new is None and scaled:
            # Stale curvature; retry once along steepest descent.
            H = np.eye(n)
            scaled = False
            x_new, f_new = _backtrack(fun, x, f, g, -g)
        if x_new is None:
            return _Minimum(x, f, False, it)
        g_new = grad(x_new)
        s = x_new - x
        y = g_new - g
        x, f_prev, f, g = x_new, f, f_new, g_new
        if np.max(np.abs(s)) <= 4 * _EPS * (1.0 + np.max(np.abs(x))):
            return _Minimum(x, f, np.max(np.abs(g)) <= gtol, it + 1)
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y) and np.all(np.isfinite(y)):
            if not scaled:
                H = np.eye(n) * (sy / float(y @ y))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        if f_prev - f <= 1e-15 * max(1.0, abs(f)) and f_prev - f >= 0 and np.max(np.abs(g)) <= 1e3 * gtol:
            return _Minimum(x, f, True, it + 1)
    return _Minimum(x, f, np.max(np.abs(g)) <= gtol, max_iter)


class _Objective:
    def __init__(self, e: Expression, X: np.ndarray, y: np.ndarray, variable_order):
        self.e = e
        self.X = X
        self.y = y
        self.order = list(variable_order)
        self.evals = 0
        self.first_error: Optional[EvalError] = None

    def __call__(self, theta: np.ndarray) -> float:
        self.evals += 1
        try:
            pred = evaluate(self.e, theta, self.X, self.order)
        except EvalError as err:
            if self.first_error is None:
                self.first_error = err
            return np.inf
        with np.errstate(over="ignore", invalid="ignore"):
            mse = float(np.mean((pred - self.y) ** 2))
        return mse if np.isfinite(mse) else np.inf


def fit_arrays(
    e: Expression,
    X: np.ndarray,
    y: np.ndarray,
    variable_order: Sequence[str],
    cfg: FitConfig = FitConfig(),
    seed: int = 0,
) -> FitResult:
    """Fit the parameters of ``e`` to ``(X, y)``; the best restart wins."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("cannot fit on an empty split")
    if e.param_count > cfg.max_params:
        raise FitError(f"skeleton uses {e.param_count} parameters; limit is {cfg.max_params}")
    objective = _Objective(e, X, y, variable_order)
    if e.param_count == 0:
        mse = objective(np.empty(0))
        if not np.isfinite(mse):
            raise objective.first_error or EvalError("non_finite", 0, "objective")
        return FitResult(np.empty(0), -mse, mse, True, 1, objective.evals)

    rng = np.random.default_rng(seed)
    grad = lambda theta: numerical_gradient(objective, theta, cfg.grad_step)
    best: Optional[_Minimum] = None
    for r in range(cfg.restarts):
        draw = rng.standard_normal(e.param_count)
        if r < len(cfg.initial_guesses):
            x0 = np.asarray(cfg.initial_guesses[r], dtype=float)
            if x0.shape != (e.param_count,):
                raise ValueError(f"initial guess {r} has wrong length")
        else:
            x0 = draw
        result = minimize_bfgs(objective, x0, grad, cfg.max_iters_per_restart, cfg.tolerance)
        if np.isfinite(result.f) and (best is None or result.f < best.f):
            best = result
    if best is None:
        raise objective.first_error or EvalError("non_finite", 0, "objective")
    mse = float(best.f)
    return FitResult(best.x.copy(), -mse, mse, best.converged, cfg.restarts, objective.evals)


def fit(e: Expression, data, cfg: FitConfig = FitConfig(), seed: int = 0, split: str = "train") -> FitResult:
    """Fit ``e`` on one split of a :class:`~insightsr.data.Dataset`."""
    X, y = data.split(split)
    return fit_arrays(e, X, y, data.variable_names, cfg, seed)


def score_arrays(e: Expression, params, X: np.ndarray, y: np.ndarray, variable_order) -> float:
    pred = evaluate(e, params, X, variable_order)
    return -float(np.mean((pred - np.asarray(y, dtype=float)) ** 2))


def score(e: Expression, params, data, split: str = "train") -> float:
    """Negative mean squared error of ``e`` with ``params`` on a split."""
    X, y = data.split(split)
    return score_arrays(e, params, X, y, data.variable_names)
