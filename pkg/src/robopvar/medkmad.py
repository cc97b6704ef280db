"""MedkMAD starting estimator: match the empirical median and kMad to the GPD.

kMad = inf{s > 0 : F(m + k s) - F(m - s) >= 1/2}, an asymmetric MAD; k = 10 by default.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .classical import FitResult, exceedances
from .gpd_model import GpdParams, LossSample, cdf_ext

XI_BOX = (0.01, 20.0)


class DegenerateSampleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KmadConfig:
    k: float = 10.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")


def empirical_median(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("median of an empty sample")
    return float(np.median(values))


def empirical_kmad(values, k: float = 10.0) -> float:
    """Exact kMad of the empirical distribution.

    The count of points in (m - s, m + k s] is a step function of s, so the
    infimum sits at one of the breakpoints (x_i - m)/k or m - x_i.  Returns 0 and
    warns when half the mass sits at the median (degenerate sample).
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("kMad of an empty sample")
    if not k > 0:
        raise ValueError("k must be positive")
    m = float(np.median(x))
    n = x.size
    right = np.sort((x[x >= m] - m) / k)  # entered once s >= value
    left = np.sort(m - x[x < m])  # entered once s > value
    cand = np.unique(np.concatenate([right, left]))
    # count in (m - s, m + k s] just to the right of each candidate
    count = np.searchsorted(right, cand, side="right") + np.searchsorted(left, cand, side="right")
    ok = np.nonzero(2 * count >= n)[0]
    s = float(cand[ok[0]])
    if s == 0.0:
        warnings.warn("kMad is zero: at least half the sample equals the median", DegenerateSampleWarning)
    return s


def model_median(p: GpdParams) -> float:
    return p.u + p.beta / p.xi * math.expm1(p.xi * math.log(2.0))


@lru_cache(maxsize=4096)
def _std_kmad(xi: float, k: float) -> float:
    """kMad of G_{0, xi, 1}."""
    p = GpdParams(0.0, xi, 1.0)
    m = model_median(p)

    def g(s):
        return float(cdf_ext(p, m + k * s) - cdf_ext(p, m - s)) - 0.5

    hi = max(m, 1.0)
    while g(hi) < 0:
        hi *= 2.0
    return brentq(g, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def model_kmad(p: GpdParams, k: float = 10.0) -> float:
    return p.beta * _std_kmad(float(p.xi), float(k))


def _ratio(xi: float, k: float) -> float:
    # kMad / (median - u) at any scale
    return _std_kmad(xi, k) / (math.expm1(xi * math.log(2.0)) / xi)


def medkmad_fit(sample: LossSample | np.ndarray, u: float, cfg: KmadConfig = KmadConfig()) -> FitResult:
    """Solve model median = empirical median and model kMad = empirical kMad.

    beta is eliminated through the closed-form median; xi then solves a scalar
    equation in the scale-free ratio kMad / (median - u).
    """
    exc = exceedances(sample, u)
    values = exc + u
    med = empirical_median(values)
    kmad = empirical_kmad(values, cfg.k)
    if not kmad > 0:
        raise ValueError("empirical kMad is zero; MedkMAD undefined")
    target = kmad / (med - u)

    grid = np.geomspace(*XI_BOX, 60)
    vals = np.array([_ratio(float(x), cfg.k) - target for x in grid])
    sign_change = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]
    info = {"median": med, "kmad": kmad, "k": cfg.k, "n_exceedances": int(exc.size)}
    if sign_change.size == 0:
        i = int(np.argmin(np.abs(vals)))
        xi = float(grid[i])
        beta = xi * (med - u) / math.expm1(xi * math.log(2.0))
        info["reason"] = "no root in search box"
        return FitResult(GpdParams(u, xi, beta), "MedkMAD", converged=False, info=info)
    i = int(sign_change[0])
    xi, rr = brentq(lambda x: _ratio(x, cfg.k) - target, grid[i], grid[i + 1],
                    xtol=1e-15, rtol=4 * np.finfo(float).eps, full_output=True)
    beta = xi * (med - u) / math.expm1(xi * math.log(2.0))
    p = GpdParams(u, float(xi), float(beta))
    info["residual_median"] = abs(model_median(p) - med) / abs(med - u)
    info["residual_kmad"] = abs(model_kmad(p, cfg.k) - kmad) / kmad
    return FitResult(p, "MedkMAD", converged=True, iterations=rr.iterations, info=info)
