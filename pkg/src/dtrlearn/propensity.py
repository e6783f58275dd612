"""Logistic propensity models and inverse-propensity weights.

The propensity of treatment at a step is fit by maximum likelihood with
iteratively reweighted least squares (IRLS) on the intercept-augmented
history design. A small ridge (1e-6) on the normal equations keeps the
Newton step well conditioned; step halving keeps the log-likelihood
monotone. Complete separation is reported instead of silently producing
huge weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import HistoryMatrix
from .errors import DegenerateFitError

RIDGE = 1e-6
MAX_ITER = 100
GRADIENT_TOL = 1e-8
SEPARATION_BOUND = 30.0
DEFAULT_CLIP = (0.01, 0.99)


class FitConvergence(NamedTuple):
    iterations: int
    gradient_norm: float


@dataclass
class PropensityModel:
    """Fitted logistic model: coefficients[0] is the intercept."""

    step: int
    coefficients: np.ndarray
    convergence: FitConvergence
    clip_bounds: tuple[float, float] = DEFAULT_CLIP

    def __post_init__(self):
        lo, hi = self.clip_bounds
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"clip bounds must satisfy 0 < lo < hi < 1, got {self.clip_bounds}")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("non-finite propensity coefficients")

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "coefficients": self.coefficients.tolist(),
            "iterations": self.convergence.iterations,
            "gradient_norm": self.convergence.gradient_norm,
            "clip_bounds": list(self.clip_bounds),
        }

    @staticmethod
    def from_dict(d: dict) -> "PropensityModel":
        return PropensityModel(
            step=d["step"],
            coefficients=np.asarray(d["coefficients"], dtype=float),
            convergence=FitConvergence(d["iterations"], d["gradient_norm"]),
            clip_bounds=tuple(d["clip_bounds"]),
        )


def _matrix(history) -> np.ndarray:
    if isinstance(history, HistoryMatrix):
        return history.values
    return np.asarray(history, dtype=float)


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_likelihood(coefficients: np.ndarray, history, treatments: np.ndarray) -> float:
    """Bernoulli log-likelihood of the logistic model on (history, treatments)."""
    X = _augment(_matrix(history))
    a = np.asarray(treatments, dtype=float)
    eta = X @ coefficients
    return float(np.sum(a * eta - np.logaddexp(0.0, eta)))


def log_likelihood_gradient(coefficients: np.ndarray, history,
                            treatments: np.ndarray) -> np.ndarray:
    """Analytic gradient of `log_likelihood` with respect to the coefficients."""
    X = _augment(_matrix(history))
    a = np.asarray(treatments, dtype=float)
    return X.T @ (a - _sigmoid(X @ coefficients))


def fit_propensity(history, treatments: np.ndarray, *,
                   clip_bounds: tuple[float, float] = DEFAULT_CLIP,
                   step: int = 0) -> PropensityModel:
    """Fit the treatment propensity by IRLS maximum likelihood.

    Converges when the gradient infinity-norm drops below 1e-8 or after
    100 iterations. The normal equations carry a 1e-6 ridge.

    Args:
        history: HistoryMatrix or raw (N, d) design (no intercept column).
        treatments: Binary treatment vector of length N.
        clip_bounds: Probability clip bounds stored on the model.
        step: Step label recorded on the model.

    Raises:
        ValueError: Only one treatment arm present.
        DegenerateFitError: Complete separation (a coefficient exceeds 30
            in magnitude after the ridge fallback), which points at a
            positivity violation.
    """
    X = _matrix(history)
    a = np.asarray(treatments, dtype=float)
    if X.shape[0] != a.shape[0]:
        raise ValueError("history and treatments are misaligned")
    n_treated = int(a.sum())
    if n_treated == 0 or n_treated == len(a):
        raise ValueError("both treatment arms must be present to fit a propensity model")
    if X.shape[0] <= X.shape[1] + 1:
        warnings.warn(
            f"propensity fit with N={X.shape[0]} <= d+1={X.shape[1] + 1}; "
            "estimates will be unstable", stacklevel=2)

    Xa = _augment(X)
    d1 = Xa.shape[1]
    gamma = np.zeros(d1)
    ll = log_likelihood(gamma, X, a)
    iterations = 0
    grad_norm = np.inf
    while iterations < MAX_ITER:
        p = _sigmoid(Xa @ gamma)
        grad = Xa.T @ (a - p)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < GRADIENT_TOL:
            break
        w = p * (1.0 - p)
        hess = (Xa * w[:, None]).T @ Xa + RIDGE * np.eye(d1)
        delta = np.linalg.solve(hess, grad)
        # Step halving keeps the log-likelihood non-decreasing.
        new_gamma = gamma + delta
        new_ll = log_likelihood(new_gamma, X, a)
        halvings = 0
        while new_ll < ll and halvings < 40:
            delta *= 0.5
            new_gamma = gamma + delta
            new_ll = log_likelihood(new_gamma, X, a)
            halvings += 1
        gamma, ll = new_gamma, new_ll
        iterations += 1

    if np.max(np.abs(gamma)) > SEPARATION_BOUND:
        raise DegenerateFitError(
            "propensity fit is degenerate (complete or quasi-complete separation); "
            "treatment assignment looks deterministic given the history, violating positivity")

    grad_norm = float(np.max(np.abs(Xa.T @ (a - _sigmoid(Xa @ gamma)))))
    return PropensityModel(
        step=step, coefficients=gamma,
        convergence=FitConvergence(iterations, grad_norm),
        clip_bounds=clip_bounds)


def predict_propensity(model: PropensityModel, h) -> float | np.ndarray:
    """Raw (unclipped) logistic probability for one history row or a matrix of rows."""
    arr = np.asarray(_matrix(h), dtype=float)
    single = arr.ndim == 1
    X = arr.reshape(1, -1) if single else arr
    if X.shape[1] != len(model.coefficients) - 1:
        raise ValueError(
            f"history width {X.shape[1]} does not match model width "
            f"{len(model.coefficients) - 1}")
    p = _sigmoid(_augment(X) @ model.coefficients)
    return float(p[0]) if single else p


def ipw_weights(model: PropensityModel, history, treatments: np.ndarray, *,
                convention: str = "received") -> np.ndarray:
    """Inverse-propensity weights with clipped probabilities.

    With the default "received" convention, treated patients get
    1/clip(pi) and controls 1/clip(1 - pi): the inverse probability of the
    treatment actually received. The "treated-prob" convention applies
    1/clip(pi) to every patient regardless of arm (ablation variant).

    Returns:
        Weight vector; every weight is >= 1/hi.
    """
    pi = predict_propensity(model, history)
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    a = np.asarray(treatments)
    lo, hi = model.clip_bounds
    if convention == "received":
        prob = np.where(a == 1, pi, 1.0 - pi)
    elif convention == "treated-prob":
        prob = pi
    else:
        raise ValueError(f"unknown weighting convention {convention!r}")
    return 1.0 / np.clip(prob, lo, hi)


@dataclass(frozen=True)
class PositivityReport:
    """How often the clip bounds were binding; a proxy for positivity trouble."""

    n: int
    n_clipped: int

    @property
    def clipped_fraction(self) -> float:
        return self.n_clipped / self.n if self.n else 0.0


def positivity_report(model: PropensityModel, history, treatments: np.ndarray, *,
                      convention: str = "received") -> PositivityReport:
    """Count observations whose weighting probability was clipped."""
    pi = np.atleast_1d(np.asarray(predict_propensity(model, history), dtype=float))
    a = np.asarray(treatments)
    lo, hi = model.clip_bounds
    prob = pi if convention == "treated-prob" else np.where(a == 1, pi, 1.0 - pi)
    clipped = (prob < lo) | (prob > hi)
    return PositivityReport(n=len(prob), n_clipped=int(clipped.sum()))
