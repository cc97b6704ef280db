"""Plot-ready diagnostic tables: influence plot, outlyingness plot, QQ plot with bands.

Nothing here draws; every builder returns a :class:`DiagnosticTable` that can be
written to CSV or JSON and handed to any plotting tool.
"""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .classical import FitResult
from .gpd_model import GpdParams, LossSample, cdf, quantile
from .robust_optimal import InfluenceSpec, mle_spec

INFLUENCE_COLUMNS = ("index", "value", "psi_xi", "psi_beta", "psi_norm", "weight")
OUTLYING_COLUMNS = ("index", "value", "psi_xi", "psi_beta", "psi_norm", "weight", "mahalanobis_sq", "flagged")
QQ_COLUMNS = ("index", "value", "position", "model_quantile", "weight",
              "pw_lower", "pw_upper", "sim_lower", "sim_upper", "inside_sim")
LEVEL_CAP = 1 - 1e-6


@dataclass
class DiagnosticTable:
    """Column-oriented table with a fixed column order and free-form metadata."""

    columns: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        first = next(iter(self.columns.values()), [])
        return len(first)

    def __getitem__(self, name):
        return self.columns[name]

    def records(self) -> list[dict]:
        names = list(self.columns)
        return [{k: _plain(self.columns[k][i]) for k in names} for i in range(len(self))]

    def write_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.columns))
            for rec in self.records():
                w.writerow([_csv_cell(v) for v in rec.values()])

    def to_json(self) -> dict:
        return {"meta": self.meta, "rows": self.records()}


def _plain(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


def _csv_cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return format(v, ".17g")
    return v


# ---------------------------------------------------------------- influence plot

def _standardized_psi(spec: InfluenceSpec, x) -> np.ndarray:
    # beta coordinate on the beta = 1 scale, as plotted
    return spec(x) / np.array([1.0, spec.params.beta])


def influence_table(spec: InfluenceSpec, sample: LossSample) -> DiagnosticTable:
    x = sample.values
    keep = x > spec.params.u
    idx = np.nonzero(keep)[0]
    psi = _standardized_psi(spec, x[keep])
    meta = {"kind": spec.kind, "xi": spec.params.xi, "beta": spec.params.beta, "u": spec.params.u,
            "clip_height": spec.b, "radius": spec.radius, "excluded": int((~keep).sum())}
    cols = {
        "index": idx,
        "value": x[keep],
        "psi_xi": psi[:, 0],
        "psi_beta": psi[:, 1],
        "psi_norm": np.linalg.norm(psi, axis=1),
        "weight": spec.weight(x[keep]),
    }
    return DiagnosticTable(cols, meta)


# ---------------------------------------------------------------- MCD

@dataclass
class RobustCov:
    center: np.ndarray
    scatter: np.ndarray
    h: int
    support: np.ndarray  # boolean mask of the optimal h-subset
    consistency: float = 1.0  # factor making scatter * consistency Fisher consistent at the normal
    raw: "RobustCov | None" = None  # the raw h-subset estimate when this one is reweighted

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.scatter))

    def mahalanobis_sq(self, points) -> np.ndarray:
        d = np.asarray(points, dtype=float) - self.center
        inv = np.linalg.inv(self.scatter * self.consistency)
        return np.einsum("ni,ij,nj->n", d, inv, d)


def default_h(n: int) -> int:
    return (n + 3) // 2


def _h_range(n):
    return (n + 3) // 2, n


def _mean_cov(points, mask):
    sub = points[mask]
    mu = sub.mean(axis=0)
    return mu, np.cov(sub, rowvar=False)


def c_step(points, center, scatter, h):
    """One concentration step: keep the h points closest in Mahalanobis distance."""
    d = points - center
    dist = np.einsum("ni,ij,nj->n", d, np.linalg.inv(scatter), d)
    mask = np.zeros(len(points), dtype=bool)
    mask[np.argsort(dist, kind="stable")[:h]] = True
    mu, cov = _mean_cov(points, mask)
    return mu, cov, mask


def _consistency(h, n):
    q = h / n
    return q / stats.chi2.cdf(stats.chi2.ppf(q, 2), 4)


def _exact_mcd(points, h):
    n = len(points)
    best_det, best = math.inf, None
    x, y = points[:, 0], points[:, 1]
    combos = itertools.combinations(range(n), h)
    while True:
        chunk = np.fromiter(itertools.chain.from_iterable(itertools.islice(combos, 200_000)), dtype=np.int64)
        if chunk.size == 0:
            break
        idx = chunk.reshape(-1, h)
        sx, sy = x[idx], y[idx]
        mx, my = sx.mean(axis=1), sy.mean(axis=1)
        vxx = ((sx - mx[:, None]) ** 2).sum(axis=1)
        vyy = ((sy - my[:, None]) ** 2).sum(axis=1)
        vxy = ((sx - mx[:, None]) * (sy - my[:, None])).sum(axis=1)
        det = (vxx * vyy - vxy**2) / (h - 1) ** 2
        i = int(np.argmin(det))
        if det[i] < best_det:
            best_det, best = det[i], idx[i]
    mask = np.zeros(n, dtype=bool)
    mask[best] = True
    return mask


def _lockstep_csteps(points, mu, cov, h, steps):
    keep = None
    for _ in range(steps):
        diff = points[None, :, :] - mu[:, None, :]
        dist = np.einsum("rni,rij,rnj->rn", diff, np.linalg.inv(cov), diff)
        keep = np.argpartition(dist, h - 1, axis=1)[:, :h]
        sel = points[keep]
        mu = sel.mean(axis=1)
        dd = sel - mu[:, None, :]
        cov = np.einsum("rki,rkj->rij", dd, dd) / (h - 1)
    return mu, cov, keep


def _fast_mcd(points, h, n_restarts, n_csteps, seed, n_best=10):
    n = len(points)
    rng = np.random.default_rng(seed)
    R = n_restarts
    # initial subsets: 3 random points each (enough for a 2x2 covariance)
    init = np.array([rng.choice(n, size=3, replace=False) for _ in range(R)])
    sub = points[init]
    mu = sub.mean(axis=1)
    d = sub - mu[:, None, :]
    cov = np.einsum("rki,rkj->rij", d, d) / 2
    cov += np.eye(2) * 1e-12 * np.trace(np.atleast_2d(np.cov(points, rowvar=False)))
    # two steps on every start, then carry only the most promising ones further
    mu, cov, keep = _lockstep_csteps(points, mu, cov, h, 2)
    top = np.argsort(np.linalg.det(cov), kind="stable")[:n_best]
    mu, cov, keep = _lockstep_csteps(points, mu[top], cov[top], h, max(n_csteps - 2, 1))
    best = int(np.argmin(np.linalg.det(cov)))  # argmin takes the lowest index on ties
    mask = np.zeros(n, dtype=bool)
    mask[keep[best]] = True
    # polish the winner to a fixed point
    mu_b, cov_b = _mean_cov(points, mask)
    for _ in range(100):
        mu_n, cov_n, mask_n = c_step(points, mu_b, cov_b, h)
        if np.array_equal(mask_n, mask):
            break
        mu_b, cov_b, mask = mu_n, cov_n, mask_n
    return mask


def mcd_cov(points, h: int | None = None, n_restarts: int = 500, n_csteps: int = 20, seed=0,
            exact_max_n: int = 25, reweight: bool = False) -> RobustCov:
    """Minimum covariance determinant location/scatter of bivariate points.

    Exact enumeration for n <= ``exact_max_n``; otherwise random restarts with
    concentration steps run in lockstep: two steps for every start, then the ten
    lowest-determinant starts iterate on and the best is polished to a fixed point.
    ``reweight`` adds the usual efficiency step: mean and covariance of the points
    within the 97.5% chi-square distance of the raw estimate.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("mcd_cov expects an (n, 2) array")
    n = len(points)
    if n < 4:
        raise ValueError("mcd_cov needs at least 4 points")
    h = default_h(n) if h is None else int(h)
    lo, hi = _h_range(n)
    if not lo <= h <= hi:
        raise ValueError(f"h={h} outside [{lo}, {hi}]")
    mask = _exact_mcd(points, h) if n <= exact_max_n else _fast_mcd(points, h, n_restarts, n_csteps, seed)
    center, scatter = _mean_cov(points, mask)
    if np.linalg.matrix_rank(scatter) < 2 or np.linalg.det(scatter) <= 0:
        raise np.linalg.LinAlgError("MCD subset is degenerate (rank < 2)")
    raw = RobustCov(center, scatter, h, mask, consistency=_consistency(h, n))
    return _reweight(points, raw) if reweight else raw


def _reweight(points, raw: RobustCov, level: float = 0.975) -> RobustCov:
    keep = raw.mahalanobis_sq(points) <= stats.chi2.ppf(level, 2)
    center, scatter = _mean_cov(points, keep)
    factor = level / stats.chi2.cdf(stats.chi2.ppf(level, 2), 4)
    return RobustCov(center, scatter, int(keep.sum()), keep, consistency=factor, raw=raw)


# ---------------------------------------------------------------- outlyingness plot

def chi2_threshold(level: float = 0.99, df: int = 2) -> float:
    return float(stats.chi2.ppf(level, df))


def outlyingness_table(sample: LossSample, mle_fit: FitResult, rmxe_fit: FitResult, level: float = 0.99,
                       seed=0) -> DiagnosticTable:
    """Distance-projection outlyingness: squared MCD-Mahalanobis distance of the MLE
    influence function (anchored at the robust fit) against the data value."""
    if not (mle_fit.converged and rmxe_fit.converged):
        raise ValueError("outlyingness needs converged MLE and robust fits")
    p = rmxe_fit.params
    x_all = sample.values
    keep = x_all > p.u
    x = x_all[keep]
    psi = _standardized_psi(mle_spec(p), x)
    cov = mcd_cov(psi, seed=seed)
    d2 = cov.mahalanobis_sq(psi)
    y_cut = chi2_threshold(level)
    x_cut = float(np.quantile(x, level))
    flagged = (d2 > y_cut) & (x > x_cut)
    weight = rmxe_fit.influence.weight(x) if rmxe_fit.influence is not None else np.ones_like(x)
    cols = {
        "index": np.nonzero(keep)[0],
        "value": x,
        "psi_xi": psi[:, 0],
        "psi_beta": psi[:, 1],
        "psi_norm": np.linalg.norm(psi, axis=1),
        "weight": weight,
        "mahalanobis_sq": d2,
        "flagged": flagged,
    }
    meta = {"anchor": {"xi": p.xi, "beta": p.beta, "u": p.u}, "mle": {"xi": mle_fit.params.xi, "beta": mle_fit.params.beta},
            "y_threshold": y_cut, "x_threshold": x_cut, "level": level, "mcd_h": cov.h,
            "mcd_center": cov.center.tolist(), "n_flagged": int(flagged.sum())}
    return DiagnosticTable(cols, meta)


# ---------------------------------------------------------------- QQ plot with bands

@dataclass
class BandSpec:
    kind: str  # "pointwise" or "simultaneous"
    nominal_level: float
    radius_adjusted_level: float
    lower: np.ndarray
    upper: np.ndarray
    capped: bool = False


def adjusted_level(nominal: float, r: float, n: int) -> tuple[float, bool]:
    """nominal + r / sqrt(n), capped just below 1."""
    if not 0 < nominal < 1:
        raise ValueError("nominal level must lie in (0, 1)")
    level = nominal + r / math.sqrt(n)
    if level >= LEVEL_CAP:
        warnings.warn(f"radius-adjusted level {level:.4f} >= 1; capped at {LEVEL_CAP}")
        return LEVEL_CAP, True
    return level, False


def dkw_halfwidth(level: float, n: int) -> float:
    return math.sqrt(math.log(2 / (1 - level)) / (2 * n))


def _model_q(p: GpdParams, prob):
    prob = np.asarray(prob, dtype=float)
    out = np.full(prob.shape, np.inf)
    lo = prob <= 0
    out[lo] = p.u
    mid = (prob > 0) & (prob < 1)
    out[mid] = quantile(p, prob[mid])
    return out


def qq_bands(p: GpdParams, n: int, nominal: float = 0.95, r: float = 0.0) -> tuple[BandSpec, BandSpec]:
    """Pointwise (order-statistic Beta / Clopper-Pearson) and simultaneous (DKW) bands
    for the i-th order statistic under the fitted model, i = 1..n."""
    level, capped = adjusted_level(nominal, r, n)
    i = np.arange(1, n + 1)
    tail = (1 - level) / 2
    pw = BandSpec("pointwise", nominal, level,
                  _model_q(p, stats.beta.ppf(tail, i, n - i + 1)),
                  _model_q(p, stats.beta.ppf(1 - tail, i, n - i + 1)), capped)
    eps = dkw_halfwidth(level, n)
    sim = BandSpec("simultaneous", nominal, level,
                   _model_q(p, i / n - eps), _model_q(p, (i - 1) / n + eps), capped)
    return pw, sim


def qq_band_table(fit: FitResult, sample: LossSample, nominal: float = 0.95, radius: float | None = None):
    """QQ table of order statistics against fitted model quantiles at i/(n+1), with bands.

    The radius defaults to the one of the fit's influence function (0 if none).
    Returns (pointwise BandSpec, simultaneous BandSpec, DiagnosticTable).
    """
    p = fit.params
    x = np.sort(sample.values[sample.values > p.u])
    n = x.size
    if radius is None:
        spec_r = getattr(fit.influence, "radius", None)
        radius = spec_r if spec_r is not None and math.isfinite(spec_r) else 0.0
    pw, sim = qq_bands(p, n, nominal, radius)
    pos = np.arange(1, n + 1) / (n + 1)
    weight = fit.influence.weight(x) if fit.influence is not None else np.ones(n)
    inside = (x >= sim.lower) & (x <= sim.upper)
    cols = {
        "index": np.arange(1, n + 1),
        "value": x,
        "position": pos,
        "model_quantile": quantile(p, pos),
        "weight": weight,
        "pw_lower": pw.lower,
        "pw_upper": pw.upper,
        "sim_lower": sim.lower,
        "sim_upper": sim.upper,
        "inside_sim": inside,
    }
    meta = {"nominal": nominal, "radius": radius, "adjusted_level": sim.radius_adjusted_level,
            "capped": sim.capped, "dkw_halfwidth": dkw_halfwidth(sim.radius_adjusted_level, n),
            "all_inside_sim": bool(inside.all()), "estimator": fit.estimator}
    return pw, sim, DiagnosticTable(cols, meta)


def ecdf_within_dkw(p: GpdParams, x, level: float) -> bool:
    """True when sup |F_n - G| <= DKW half-width, i.e. the ecdf stays inside the band."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    g = cdf(p, x)
    i = np.arange(1, n + 1)
    ks = max(np.max(i / n - g), np.max(g - (i - 1) / n))
    return bool(ks <= dkw_halfwidth(level, n))


# ---------------------------------------------------------------- GES

def ges(spec: InfluenceSpec, probe_grid=None) -> float:
    """sup |psi| (standardized norm).

    Exact b for clipped kinds.  For the MLE the sup is probed along the extending
    grid p_k = 1 - 10^-k; strictly increasing values with non-shrinking increments
    (psi grows linearly in log x) are reported as infinite.
    """
    if spec.kind != "MLE":
        return spec.b
    probs = np.asarray(probe_grid if probe_grid is not None else 1 - 10.0 ** -np.arange(1, 13))
    x = quantile(spec.params, probs)
    sup = np.linalg.norm(_standardized_psi(spec, x), axis=1)
    steps = np.diff(sup)
    if np.all(steps > 0) and steps[-1] >= 0.9 * steps[-2]:
        return math.inf
    return float(sup.max())
