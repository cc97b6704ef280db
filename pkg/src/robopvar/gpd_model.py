"""Generalized Pareto model primitives: distribution functions, scores, Fisher information.

Parameters are ordered (xi, beta) throughout, matching the score vector layout.
Internally most quantities are evaluated through the "exponential time"
``t = log(1 + xi * z) / xi`` with ``z = (x - u) / beta``; under the model ``t`` is
standard exponential, which gives numerically stable closed forms.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np


class DomainError(ValueError):
    """Argument outside the support or domain of a model function."""


@dataclass(frozen=True)
class GpdParams:
    u: float
    xi: float
    beta: float

    def __post_init__(self):
        if not np.isfinite(self.u):
            raise ValueError(f"threshold u must be finite, got {self.u}")
        if not (self.xi > 0 and np.isfinite(self.xi)):
            raise ValueError(f"shape xi must be > 0, got {self.xi}")
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"scale beta must be > 0, got {self.beta}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.xi, self.beta])

    def with_scale(self, beta: float) -> "GpdParams":
        return replace(self, beta=beta)


@dataclass
class ExceedanceSummary:
    n: int
    n_u: int
    u: float

    def __post_init__(self):
        if not 0 <= self.n_u <= self.n:
            raise ValueError(f"need 0 <= n_u <= n, got n_u={self.n_u}, n={self.n}")


@dataclass
class LossSample:
    """Positive loss amounts in input order, with free-form provenance metadata."""

    values: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()

    def __len__(self) -> int:
        return self.values.size

    def exceedances(self, u: float) -> np.ndarray:
        return self.values[self.values > u]

    def summary(self, u: float) -> ExceedanceSummary:
        return ExceedanceSummary(n=len(self), n_u=int(np.sum(self.values > u)), u=u)


def _check_support(p: GpdParams, x, strict: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    bad = x <= p.u if strict else x < p.u
    if np.any(bad):
        raise DomainError(f"x must be {'>' if strict else '>='} u={p.u}")
    return x


def exp_time(p: GpdParams, x) -> np.ndarray:
    """Map x >= u to t = log(1 + xi (x-u)/beta) / xi, which is Exp(1) under the model."""
    z = (np.asarray(x, dtype=float) - p.u) / p.beta
    return np.log1p(p.xi * z) / p.xi


def from_exp_time(p: GpdParams, t) -> np.ndarray:
    return p.u + p.beta * np.expm1(p.xi * np.asarray(t, dtype=float)) / p.xi


def cdf(p: GpdParams, x):
    x = _check_support(p, x)
    return -np.expm1(-exp_time(p, x))


def survival(p: GpdParams, x):
    """1 - cdf, extended by 1 below the threshold."""
    x = np.asarray(x, dtype=float)
    t = exp_time(p, np.maximum(x, p.u))
    return np.where(x < p.u, 1.0, np.exp(-t))


def cdf_ext(p: GpdParams, x):
    """cdf extended by 0 below the threshold (no domain error)."""
    return 1.0 - survival(p, x)


def quantile(p: GpdParams, prob):
    prob = np.asarray(prob, dtype=float)
    if np.any((prob < 0) | (prob >= 1)) or np.any(np.isnan(prob)):
        raise DomainError("prob must lie in [0, 1)")
    return from_exp_time(p, -np.log1p(-prob))


def density(p: GpdParams, x):
    x = _check_support(p, x)
    t = exp_time(p, x)
    # (1/beta) (1 + xi z)^(-1/xi - 1) = exp(-t (1 + xi)) / beta
    return np.exp(-t * (1.0 + p.xi)) / p.beta


def sample(p: GpdParams, n: int, seed=None) -> LossSample:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    values = quantile(p, rng.random(n))
    return LossSample(values, meta={"source": "gpd", "u": p.u, "xi": p.xi, "beta": p.beta, "seed": seed})


def _s_plus_expm1_neg(s):
    # s + expm1(-s), accurate for small s
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-3
    series = s**2 / 2 - s**3 / 6 + s**4 / 24 - s**5 / 120
    return np.where(small, series, s + np.expm1(-s))


def score_from_time(xi: float, beta: float, t) -> np.ndarray:
    """Scores (d/dxi, d/dbeta) log density as a function of exponential time t; shape (..., 2)."""
    t = np.asarray(t, dtype=float)
    s = xi * t
    em = np.expm1(-s)  # -(1 - e^{-s}) = -xi z / (1 + xi z)
    d_xi = (_s_plus_expm1_neg(s) + xi * em) / xi**2
    d_beta = (-1.0 - (xi + 1.0) / xi * em) / beta
    return np.stack([d_xi, d_beta], axis=-1)


def score(p: GpdParams, x) -> np.ndarray:
    x = _check_support(p, x, strict=True)
    return score_from_time(p.xi, p.beta, exp_time(p, x))


def fisher_info(p: GpdParams) -> np.ndarray:
    xi, beta = p.xi, p.beta
    c = 1.0 / ((2 * xi + 1) * (xi + 1))
    return c * np.array([[2.0, 1.0 / beta], [1.0 / beta, (xi + 1) / beta**2]])


def tail_cdf_estimate(p: GpdParams, x, n: int, n_u: int):
    """Survival estimate (n_u / n) * (1 - G(x)) for the full loss distribution beyond u."""
    if not 1 <= n_u <= n:
        raise ValueError(f"need 1 <= n_u <= n, got n_u={n_u}, n={n}")
    x = _check_support(p, x)
    return (n_u / n) * np.exp(-exp_time(p, x))
