"""Optimally robust influence functions for the GPD scale/shape model.

All multipliers are solved in standardized coordinates (beta = 1, u = 0), where the
problem depends on xi alone.  For a general scale the influence function is

    psi_theta(x) = diag(1, beta) psi_1(t(x)),

i.e. the beta coordinate is expressed in units of beta, while clipping acts on the
standardized norm.  This mirrors the exact scale equivariance of the score.

Kinds:
    MLE   psi = I^{-1} Lambda
    OMSE  psi = Y min(1, b/|Y|), Y = A Lambda - a, r^2 b = E(|Y| - b)_+
    MBRE  psi = b Y / |Y|, b = tr A / E|Y|
"""
from __future__ import annotations

import logging
from importlib import resources
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar, root

from . import quadrature
from .gpd_model import GpdParams, exp_time, fisher_info, score_from_time

log = logging.getLogger(__name__)

KINDS = ("MLE", "MBRE", "OMSE")
PSI2_TOL = 1e-5
_EYE = np.eye(2)


class SolverError(RuntimeError):
    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


@dataclass(frozen=True)
class Radius:
    r: float

    def __post_init__(self):
        if not (self.r >= 0 and math.isfinite(self.r)):
            raise ValueError(f"radius must be finite and >= 0, got {self.r}")

    def eps(self, n: int) -> float:
        """Contamination fraction r / sqrt(n) of the shrinking neighbourhood."""
        return self.r / math.sqrt(n)


@dataclass
class InfluenceSpec:
    """Lagrange multipliers (standardized coordinates) anchored at ``params``."""

    kind: str
    params: GpdParams
    A: np.ndarray
    a: np.ndarray
    b: float = math.inf
    radius: float | None = None
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        self.A = np.asarray(self.A, dtype=float).reshape(2, 2)
        self.a = np.asarray(self.a, dtype=float).reshape(2)
        if self.kind != "MLE" and not self.b > 0:
            raise ValueError("clip height b must be positive for robust kinds")

    @property
    def scale_matrix(self) -> np.ndarray:
        return np.diag([1.0, self.params.beta])

    @property
    def A_raw(self) -> np.ndarray:
        """A in raw coordinates, so that Y_raw = A_raw Lambda_theta - a_raw."""
        D = self.scale_matrix
        return D @ self.A @ D

    @property
    def a_raw(self) -> np.ndarray:
        return self.scale_matrix @ self.a

    def rescaled(self, beta: float) -> "InfluenceSpec":
        return replace(self, params=self.params.with_scale(beta), residuals=dict(self.residuals))

    def psi_std(self, t) -> np.ndarray:
        return _psi_std(self.kind, self.params.xi, self.A, self.a, self.b, t)

    def y_norm(self, x) -> np.ndarray:
        lam = score_from_time(self.params.xi, 1.0, exp_time(self.params, x))
        return np.linalg.norm(lam @ self.A.T - self.a, axis=-1)

    def weight(self, x) -> np.ndarray:
        """Downweighting factor min(1, b/|Y|) (1 for the MLE kind)."""
        if self.kind == "MLE":
            return np.ones_like(np.asarray(x, dtype=float))
        ny = self.y_norm(x)
        if self.kind == "MBRE":
            return self.b / ny
        return np.minimum(1.0, self.b / ny)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x <= self.params.u):
            raise ValueError(f"influence function needs x > u={self.params.u}")
        return self.psi_std(exp_time(self.params, x)) * np.array([1.0, self.params.beta])

    @property
    def ges(self) -> float:
        """Gross error sensitivity (standardized norm)."""
        return self.b


def eval_psi(spec: InfluenceSpec, x) -> np.ndarray:
    return spec(x)


def _psi_std(kind, xi, A, a, b, t):
    lam = score_from_time(xi, 1.0, t)
    if kind == "MLE":
        return lam @ np.linalg.inv(fisher_info(GpdParams(0.0, xi, 1.0))).T
    y = lam @ A.T - a
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    if kind == "MBRE":
        with np.errstate(invalid="ignore", divide="ignore"):
            out = b * y / ny
        return np.where(ny > 0, out, 0.0)
    with np.errstate(divide="ignore"):
        w = np.minimum(1.0, b / ny)
    return y * w


def _kinks(xi, A, a, b):
    def h(t):
        lam = score_from_time(xi, 1.0, t)
        return np.linalg.norm(lam @ A.T - a, axis=-1) - b

    return quadrature.crossings(h)


def moments(kind, xi, A, a, b):
    """Quadrature moments of psi: dict with E psi, E psi Lambda^T, E psi psi^T, E(|Y|-b)_+, E|Y|."""
    breaks = _kinks(xi, A, a, b) if kind == "OMSE" and math.isfinite(b) else ()

    def f(t):
        lam = score_from_time(xi, 1.0, t)
        psi = _psi_std(kind, xi, A, a, b, t)
        if kind == "MLE":
            ny = np.linalg.norm(psi, axis=-1)
        else:
            ny = np.linalg.norm(lam @ A.T - a, axis=-1)
        excess = np.maximum(ny - b, 0.0) if math.isfinite(b) else np.zeros_like(ny)
        return np.concatenate(
            [psi, np.einsum("ni,nj->nij", psi, lam).reshape(-1, 4),
             np.einsum("ni,nj->nij", psi, psi).reshape(-1, 4), excess[:, None], ny[:, None]],
            axis=1,
        )

    m = quadrature.expect(f, breaks)
    return {
        "mean": m[0:2],
        "cross": m[2:6].reshape(2, 2),
        "cov": m[6:10].reshape(2, 2),
        "excess": m[10],
        "abs_y": m[11],
        "kinks": breaks,
    }


def _psi2_residual(mom) -> float:
    return float(max(np.abs(mom["mean"]).max(), np.abs(mom["cross"] - _EYE).max()))


def check_spec(spec: InfluenceSpec) -> dict:
    """Recompute constraint residuals of a spec by quadrature."""
    mom = moments(spec.kind, spec.params.xi, spec.A, spec.a, spec.b)
    res = {"psi2": _psi2_residual(mom), "mean": mom["mean"], "cross": mom["cross"] - _EYE}
    if spec.kind == "OMSE" and spec.radius is not None:
        res["clip"] = abs(spec.radius**2 * spec.b - mom["excess"]) / spec.b
    if spec.kind == "MBRE":
        res["trace_ratio"] = abs(spec.b - np.trace(spec.A) / mom["abs_y"]) / spec.b
    res["trace_cov"] = float(np.trace(mom["cov"]))
    return res


def _std_params(xi):
    return GpdParams(0.0, xi, 1.0)


def mle_spec(p: GpdParams) -> InfluenceSpec:
    std = _std_params(p.xi)
    return InfluenceSpec("MLE", p, np.linalg.inv(fisher_info(std)), np.zeros(2), math.inf, radius=0.0)


# ---------------------------------------------------------------- clipped solver

def _solve_b_for_radius(xi, A, a, r):
    """Root in b of r^2 b = E(|Y| - b)_+ (left side increasing, right side decreasing)."""

    def g(b):
        return r**2 * b - moments("OMSE", xi, A, a, b)["excess"]

    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
    lo = hi / 2
    while g(lo) > 0:
        lo /= 2.0
    return brentq(g, lo, hi, xtol=1e-14, rtol=1e-13)


def _clipped_fixed_point(xi, b_of, A, a, b, iters=60, damping=0.5):
    """Alternating updates: b from its equation, then centering a and normalizing A."""
    for _ in range(iters):
        b = b_of(A, a, b)
        breaks = _kinks(xi, A, a, b)

        def f(t):
            lam = score_from_time(xi, 1.0, t)
            ny = np.linalg.norm(lam @ A.T - a, axis=-1)
            w = np.minimum(1.0, b / ny)
            return np.concatenate([w[:, None], lam * w[:, None]], axis=1)

        m = quadrature.expect(f, breaks)
        z = m[1:3] / m[0]

        def g(t):
            lam = score_from_time(xi, 1.0, t)
            ny = np.linalg.norm(lam @ A.T - a, axis=-1)
            w = np.minimum(1.0, b / ny)
            d = lam - z
            return np.einsum("ni,nj->nij", d, d) * w[:, None, None]

        M = quadrature.expect(g, breaks)
        A_new = np.linalg.inv(M)
        A = damping * A + (1 - damping) * A_new
        a = A @ z
    return A, a, b


def _pack(A, a, b):
    return np.concatenate([A.ravel(), a, [b]])


def _unpack(v):
    return v[:4].reshape(2, 2), v[4:6], v[6]


def _polish(fun, v0, what):
    sol = root(fun, v0, method="hybr", options={"xtol": 1e-13, "maxfev": 4000})
    res = np.abs(fun(sol.x)).max()
    if not np.all(np.isfinite(sol.x)) or res > 1e-9:
        raise SolverError(f"{what}: root polish did not converge (max residual {res:.3g})", residuals=res)
    return sol.x


def solve_omse(p: GpdParams, radius: Radius | float, start: InfluenceSpec | None = None) -> InfluenceSpec:
    r = radius.r if isinstance(radius, Radius) else float(radius)
    Radius(r)
    if r == 0:
        return mle_spec(p)
    xi = p.xi
    if start is not None and start.kind == "OMSE":
        A, a, b = start.A.copy(), start.a.copy(), start.b
    else:
        A, a = np.linalg.inv(fisher_info(_std_params(xi))), np.zeros(2)
        A, a, b = _clipped_fixed_point(xi, lambda A, a, b: _solve_b_for_radius(xi, A, a, r), A, a, None, iters=25)

    def fun(v):
        A, a, b = _unpack(v)
        if not b > 0:
            return np.full(7, 1e6)
        m = moments("OMSE", xi, A, a, b)
        return np.concatenate([m["mean"], (m["cross"] - _EYE).ravel(), [(r**2 * b - m["excess"]) / b]])

    A, a, b = _unpack(_polish(fun, _pack(A, a, b), f"OMSE(xi={xi}, r={r})"))
    spec = InfluenceSpec("OMSE", p, A, a, b, radius=r)
    spec.residuals = check_spec(spec)
    return spec


def solve_obre(p: GpdParams, b: float, start: InfluenceSpec | None = None) -> InfluenceSpec:
    """Clipped influence function with prescribed bias bound b; its radius is implied."""
    xi = p.xi
    if start is not None and start.kind == "OMSE":
        A, a = start.A.copy(), start.a.copy()
    else:
        A, a = np.linalg.inv(fisher_info(_std_params(xi))), np.zeros(2)
        A, a, _ = _clipped_fixed_point(xi, lambda A, a, b_: b, A, a, b, iters=25)

    def fun(v):
        A, a, _ = _unpack(np.concatenate([v, [b]]))
        m = moments("OMSE", xi, A, a, b)
        return np.concatenate([m["mean"], (m["cross"] - _EYE).ravel()])

    v = _polish(fun, _pack(A, a, b)[:6], f"OBRE(xi={xi}, b={b})")
    A, a = v[:4].reshape(2, 2), v[4:6]
    m = moments("OMSE", xi, A, a, b)
    spec = InfluenceSpec("OMSE", p, A, a, b, radius=math.sqrt(m["excess"] / b))
    spec.residuals = check_spec(spec)
    return spec


# ---------------------------------------------------------------- MBRE

def solve_mbre(p: GpdParams) -> InfluenceSpec:
    xi = p.xi
    A = np.linalg.inv(fisher_info(_std_params(xi)))
    A = A / np.trace(A)
    # Weiszfeld-type centering for a start value
    z = np.zeros(2)
    for _ in range(50):
        m = quadrature.expect(lambda t: _mbre_center_terms(xi, A, z, t))
        z = m[1:3] / m[0]
    a = A @ z
    M = quadrature.expect(lambda t: _mbre_cross_terms(xi, A, a, t))
    b = np.trace(np.linalg.inv(M))

    def fun(v):
        A, a, b = _unpack(v)
        m = moments("MBRE", xi, A, a, b)
        return np.concatenate([m["mean"], (m["cross"] - _EYE).ravel(), [np.trace(A) - 1.0]])

    A, a, b = _unpack(_polish(fun, _pack(A, a, b), f"MBRE(xi={xi})"))
    # psi and b are invariant to scaling (A, a); fix the scale so that min |Y| = b,
    # which makes the MBRE the clip-everywhere boundary case of the OMSE family
    ymin = min_y_norm(xi, A, a)
    A, a = A * (b / ymin), a * (b / ymin)
    spec = InfluenceSpec("MBRE", p, A, a, b, radius=math.inf)
    spec.residuals = check_spec(spec)
    return spec


def _mbre_center_terms(xi, A, z, t):
    lam = score_from_time(xi, 1.0, t)
    ny = np.linalg.norm((lam - z) @ A.T, axis=-1)
    return np.concatenate([(1 / ny)[:, None], lam / ny[:, None]], axis=1)


def _mbre_cross_terms(xi, A, a, t):
    lam = score_from_time(xi, 1.0, t)
    y = lam @ A.T - a
    ny = np.linalg.norm(y, axis=-1)
    return np.einsum("ni,nj->nij", y / ny[:, None], lam)


def min_y_norm(xi, A, a):
    def f(s):
        lam = score_from_time(xi, 1.0, np.array([s]))
        return float(np.linalg.norm(lam @ A.T - a))

    grid = np.concatenate([[0.0], np.geomspace(1e-6, quadrature.T_MAX, 2000)])
    lam = score_from_time(xi, 1.0, grid)
    vals = np.linalg.norm(lam @ A.T - a, axis=-1)
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    if hi > lo:
        opt = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
        return min(float(opt.fun), float(vals[i]))
    return float(vals[i])


# ---------------------------------------------------------------- criteria

def max_mse(spec: InfluenceSpec, radius: Radius | float) -> float:
    """Asymptotic maximal MSE on the radius-r shrinking neighbourhood: tr E psi psi^T + r^2 sup|psi|^2."""
    r = radius.r if isinstance(radius, Radius) else float(radius)
    tr = spec.residuals.get("trace_cov")
    if tr is None:
        tr = check_spec(spec)["trace_cov"]
    if r == 0:
        return tr
    if spec.kind == "MLE":
        return math.inf
    return tr + r**2 * spec.b**2


def asymptotic_trace(spec: InfluenceSpec) -> float:
    tr = spec.residuals.get("trace_cov")
    return tr if tr is not None else check_spec(spec)["trace_cov"]


def _warm_solve_omse(p, r, start=None):
    if start is not None:
        try:
            return solve_omse(p, r, start=start)
        except SolverError:
            log.debug("warm start failed at xi=%s r=%s, solving cold", p.xi, r)
    return solve_omse(p, r)


# ---------------------------------------------------------------- radius minimax

DEFAULT_R_RANGE = (0.0, math.inf)
_R_FLOOR, _R_CEIL = 1e-2, 1e2


def _inner_radii(r_range, n_grid):
    lo, hi = r_range
    grid = np.geomspace(max(lo, _R_FLOOR), min(hi, _R_CEIL), n_grid)
    return grid


@dataclass
class RadiusMinimaxResult:
    r_lf: float
    spec: InfluenceSpec
    worst_rel_eff: float
    r_range: tuple
    evaluations: int = 0


class _Reference:
    """Denominators maxMSE(OMSE_r, r) over the inner radius grid, plus closed-form endpoints."""

    def __init__(self, p, r_range, n_grid):
        self.p = p
        self.r_range = r_range
        self.radii = _inner_radii(r_range, n_grid)
        self.tr_mle = float(np.trace(np.linalg.inv(fisher_info(_std_params(p.xi)))))
        self.mbre = solve_mbre(p) if math.isinf(r_range[1]) else None
        self.specs = []
        prev = None
        for r in self.radii:
            prev = _warm_solve_omse(p, float(r), prev)
            self.specs.append(prev)
        self.den = np.array([max_mse(s, r) for s, r in zip(self.specs, self.radii)])

    def rel_mse(self, spec) -> float:
        """max over the radius range of maxMSE(spec, r) / maxMSE(OMSE_r, r)."""
        tr = asymptotic_trace(spec)
        vals = (tr + self.radii**2 * spec.b**2) / self.den
        worst = float(vals.max())
        if self.r_range[0] == 0:
            worst = max(worst, tr / self.tr_mle)
        if self.mbre is not None:
            worst = max(worst, spec.b**2 / self.mbre.b**2)
        return worst


def rel_mse(spec_s: InfluenceSpec, r: float, spec_r: InfluenceSpec | None = None) -> float:
    """maxMSE(spec_s, r) / maxMSE(OMSE_r, r)."""
    if spec_r is None:
        spec_r = solve_omse(spec_s.params, r)
    return max_mse(spec_s, r) / max_mse(spec_r, r)


def radius_minimax(p: GpdParams, r_range=DEFAULT_R_RANGE, n_grid: int = 25, tol: float = 1e-3) -> RadiusMinimaxResult:
    """Least favourable radius: minimize over s the worst relative maxMSE of OMSE_s.

    r_range may include 0 (classical limit, MLE) and inf (MBRE limit); both are
    evaluated in closed form from the trace and clip height.
    """
    lo, hi = float(r_range[0]), float(r_range[1])
    if not (0 <= lo < hi):
        raise ValueError(f"invalid radius range {r_range}")
    ref = _Reference(p, (lo, hi), n_grid)
    cache = {}

    def objective(log_s):
        s = float(math.exp(log_s))
        nearest = ref.specs[int(np.argmin(np.abs(np.log(ref.radii) - log_s)))]
        spec = _warm_solve_omse(p, s, nearest)
        cache[s] = spec
        return math.log(ref.rel_mse(spec))

    bounds = (math.log(max(lo, _R_FLOOR)), math.log(min(hi, _R_CEIL)))
    opt = minimize_scalar(objective, bounds=bounds, method="bounded", options={"xatol": tol})
    s = float(math.exp(opt.x))
    spec = cache.get(s) or solve_omse(p, s)
    return RadiusMinimaxResult(s, spec, float(math.exp(-opt.fun)), (lo, hi), evaluations=int(opt.nfev))


def worst_case_efficiency(spec: InfluenceSpec, r_range=DEFAULT_R_RANGE, n_grid: int = 25) -> float:
    """min over r in r_range of maxMSE(OMSE_r, r) / maxMSE(spec, r)."""
    ref = _Reference(_std_params(spec.params.xi), (float(r_range[0]), float(r_range[1])), n_grid)
    return 1.0 / ref.rel_mse(spec)


def anscombe_obre(p: GpdParams, are: float = 0.95) -> InfluenceSpec:
    """Clipped influence function with b tuned to a prescribed ideal-model efficiency."""
    tr_mle = float(np.trace(np.linalg.inv(fisher_info(_std_params(p.xi)))))
    mbre = solve_mbre(p)
    state = {"spec": None}

    def gap(b):
        spec = solve_obre(p, b, start=state["spec"])
        state["spec"] = spec
        return tr_mle / asymptotic_trace(spec) - are

    lo, hi = mbre.b * 1.01, mbre.b * 2
    while gap(hi) < 0:
        lo, hi = hi, hi * 2
    b = brentq(gap, lo, hi, xtol=1e-10, rtol=1e-12)
    return solve_obre(p, b, start=state["spec"])


# ---------------------------------------------------------------- multiplier grid

GRID_FORMAT = "robopvar-multiplier-grid"
GRID_VERSION = 1
DEFAULT_XI_NODES = np.round(np.arange(0.10, 3.0 + 1e-9, 0.05), 10)
_COLUMNS = ("kind", "r", "xi", "A11", "A12", "A21", "A22", "a1", "a2", "b", "trace_cov",
            "res_psi2", "res_clip", "worst_eff")


@dataclass
class MultiplierGrid:
    """Multipliers archived at beta = 1 over a grid of xi values.

    ``label`` is MBRE, OMSE (fixed radius) or RMXE (radius chosen per node).
    """

    label: str
    xi_nodes: np.ndarray
    specs: list
    radius: float | None = None
    r_range: tuple | None = None
    worst_eff: np.ndarray | None = None

    def __post_init__(self):
        self.xi_nodes = np.asarray(self.xi_nodes, dtype=float)
        if np.any(np.diff(self.xi_nodes) <= 0):
            raise ValueError("xi nodes must be strictly increasing")
        if len(self.specs) != self.xi_nodes.size:
            raise ValueError("one spec per node required")

    def _table(self):
        A = np.array([s.A.ravel() for s in self.specs])
        a = np.array([s.a for s in self.specs])
        b = np.array([s.b for s in self.specs])
        r = np.array([s.radius if s.radius is not None else np.nan for s in self.specs])
        tr = np.array([asymptotic_trace(s) for s in self.specs])
        return np.column_stack([A, a, b, r, tr])


def _solve_node(label, xi, radius, r_range):
    p = _std_params(float(xi))
    if label == "MBRE":
        return solve_mbre(p), np.nan
    if label == "OMSE":
        return solve_omse(p, radius), np.nan
    if label == "RMXE":
        res = radius_minimax(p, r_range)
        return res.spec, res.worst_rel_eff
    raise ValueError(f"unknown grid label {label!r}")


def build_grid(label: str, radius: float | None = None, xi_nodes=DEFAULT_XI_NODES,
               r_range=DEFAULT_R_RANGE, progress=None) -> MultiplierGrid:
    label = label.upper()
    if label == "OMSE" and not (radius is not None and radius > 0):
        raise ValueError("OMSE grid needs a positive radius")
    specs, effs = [], []
    for xi in np.asarray(xi_nodes, dtype=float):
        spec, eff = _solve_node(label, xi, radius, r_range)
        specs.append(spec)
        effs.append(eff)
        if progress is not None:
            progress(xi, spec)
    return MultiplierGrid(label, xi_nodes, specs, radius=radius if label == "OMSE" else None,
                          r_range=tuple(r_range) if label == "RMXE" else None, worst_eff=np.array(effs))


def interpolate_spec(grid: MultiplierGrid, xi: float, beta: float = 1.0, u: float = 0.0,
                     check: bool = True) -> InfluenceSpec:
    """Monotone cubic (PCHIP) interpolation of multipliers over xi, then the exact scale map to beta."""
    from scipy.interpolate import PchipInterpolator

    lo, hi = grid.xi_nodes[0], grid.xi_nodes[-1]
    if not lo <= xi <= hi:
        raise ValueError(f"xi={xi} outside grid range [{lo}, {hi}]; no extrapolation")
    p = GpdParams(u, float(xi), float(beta))
    hit = np.nonzero(grid.xi_nodes == xi)[0]
    if hit.size:
        node = grid.specs[int(hit[0])]
        return replace(node, params=p, A=node.A.copy(), a=node.a.copy(), residuals=dict(node.residuals))
    table = grid._table()
    cols = np.full(table.shape[1], np.nan)
    ok = np.all(np.isfinite(table), axis=0)  # radius column is undefined for MBRE
    cols[ok] = PchipInterpolator(grid.xi_nodes, table[:, ok], axis=0)(xi)
    A, a, b, r, tr = cols[:4].reshape(2, 2), cols[4:6], float(cols[6]), float(cols[7]), float(cols[8])
    kind = grid.specs[0].kind
    radius = None if np.isnan(r) else r
    spec = InfluenceSpec(kind, p, A, a, b, radius=radius, residuals={"trace_cov": tr, "interpolated": True})
    if check:
        res = check_spec(spec)
        res["interpolated"] = True
        spec.residuals = res
        if res["psi2"] > 1e-3:
            warnings.warn(f"interpolated multipliers at xi={xi} violate Psi2 constraints by {res['psi2']:.2e}")
    return spec


def _fmt(v) -> str:
    return format(float(v), ".17g")


def save_grid(grid: MultiplierGrid, path, header_lines=()) -> None:
    lines = [
        f"# {GRID_FORMAT} v{GRID_VERSION}",
        *(f"# {line}" for line in header_lines),
        f"# label={grid.label}",
        f"# radius={_fmt(grid.radius) if grid.radius is not None else 'none'}",
        "# r_range=" + (",".join(_fmt(v) for v in grid.r_range) if grid.r_range else "none"),
        "# beta=1 u=0 (standardized coordinates)",
        "# " + " ".join(_COLUMNS),
    ]
    effs = grid.worst_eff if grid.worst_eff is not None else np.full(len(grid.specs), np.nan)
    for xi, s, eff in zip(grid.xi_nodes, grid.specs, effs):
        r = s.radius if s.radius is not None else np.nan
        fields = [s.kind, _fmt(r), _fmt(xi), *(_fmt(v) for v in s.A.ravel()), *(_fmt(v) for v in s.a),
                  _fmt(s.b), _fmt(asymptotic_trace(s)), _fmt(s.residuals.get("psi2", np.nan)),
                  _fmt(s.residuals.get("clip", np.nan)), _fmt(eff)]
        lines.append(" ".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_grid(path) -> MultiplierGrid:
    header = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# {GRID_FORMAT} v{GRID_VERSION}":
            raise ValueError(f"{path}: not a v{GRID_VERSION} multiplier grid file")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line and not line.startswith("# beta"):
                    key, val = line[1:].strip().split("=", 1)
                    header[key] = val
                continue
            rows.append(line.split())
    specs, xis, effs = [], [], []
    for f in rows:
        kind = f[0]
        r, xi = float(f[1]), float(f[2])
        vals = [float(v) for v in f[3:]]
        A, a, b, tr, psi2, clip, eff = np.array(vals[:4]).reshape(2, 2), np.array(vals[4:6]), *vals[6:]
        res = {"trace_cov": tr, "psi2": psi2}
        if not math.isnan(clip):
            res["clip"] = clip
        specs.append(InfluenceSpec(kind, _std_params(xi), A, a, b, radius=None if math.isnan(r) else r, residuals=res))
        xis.append(xi)
        effs.append(eff)
    radius = None if header.get("radius", "none") == "none" else float(header["radius"])
    r_range = None if header.get("r_range", "none") == "none" else tuple(float(v) for v in header["r_range"].split(","))
    return MultiplierGrid(header["label"], np.array(xis), specs, radius=radius, r_range=r_range, worst_eff=np.array(effs))


def grid_filename(label: str, radius: float | None = None) -> str:
    label = label.upper()
    return f"grid_{label}_r{_fmt(radius)}.txt" if label == "OMSE" else f"grid_{label}.txt"


def default_grid(label: str, radius: float | None = None) -> MultiplierGrid:
    """Prebuilt grid shipped with the package (MBRE, RMXE, OMSE at r = 0.5)."""
    name = grid_filename(label, radius)
    path = resources.files("robopvar") / "data" / name
    if not path.is_file():
        raise FileNotFoundError(f"no packaged multiplier grid {name}; build one with build_grid")
    with resources.as_file(path) as fp:
        return load_grid(fp)


# ---------------------------------------------------------------- one-step construction

XI_LOWER = 0.01
ROBUST_KINDS = ("MLE", "MBRE", "OMSE", "RMXE")


def spec_for(kind: str, p: GpdParams, radius: float | None = None, grid: MultiplierGrid | None = None) -> InfluenceSpec:
    """Influence function of the requested kind at p, from a grid when one covers p.xi."""
    kind = kind.upper()
    if kind == "MLE":
        return mle_spec(p)
    if grid is not None and grid.xi_nodes[0] <= p.xi <= grid.xi_nodes[-1]:
        if grid.label != kind or (kind == "OMSE" and grid.radius != radius):
            raise ValueError(f"grid holds {grid.label} multipliers, requested {kind}")
        return interpolate_spec(grid, p.xi, p.beta, p.u)
    std = _std_params(p.xi)
    if kind == "MBRE":
        spec = solve_mbre(std)
    elif kind == "OMSE":
        spec = solve_omse(std, radius)
    elif kind == "RMXE":
        spec = radius_minimax(std).spec
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return replace(spec, params=p)


def one_step(start, kind: str, radius: float | None, sample, grid: MultiplierGrid | None = None,
             spec: InfluenceSpec | None = None):
    """theta_0 + mean psi_theta0(X_i); xi additive, beta on the log scale."""
    from .classical import FitResult, exceedances

    if not start.converged:
        raise ValueError("one-step construction needs a converged start estimate")
    p0 = start.params
    exc = exceedances(sample, p0.u) + p0.u
    if spec is None:
        spec = spec_for(kind, p0, radius, grid)
    psi = spec(exc)
    corr = psi.mean(axis=0)
    xi = p0.xi + corr[0]
    clamped = False
    if xi <= XI_LOWER:
        warnings.warn(f"one-step shape {xi:.4g} below {XI_LOWER}; clamped")
        xi, clamped = XI_LOWER, True
    beta = p0.beta * math.exp(corr[1] / p0.beta)
    info = {
        "start": {"estimator": start.estimator, "xi": p0.xi, "beta": p0.beta},
        "correction": [float(corr[0]), float(corr[1])],
        "clip_height": spec.b,
        "radius": spec.radius,
        "psi2_residual": spec.residuals.get("psi2"),
        "clamped": clamped,
        "n_exceedances": int(exc.size),
    }
    return FitResult(GpdParams(p0.u, float(xi), float(beta)), kind.upper(), converged=True,
                     iterations=1, info=info, influence=spec)
