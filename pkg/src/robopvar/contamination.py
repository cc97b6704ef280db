"""Gross-error neighbourhood sampling and Monte Carlo / asymptotic robustness studies."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .classical import FitResult, mle_fit
from .gpd_model import GpdParams, LossSample, quantile
from .medkmad import KmadConfig, medkmad_fit
from .robust_optimal import (MultiplierGrid, default_grid, max_mse, mle_spec, one_step,
                             solve_omse)

CONTAMINANTS = ("point", "gpd", "quantile")


@dataclass(frozen=True)
class ContaminationSpec:
    """Q = (1 - eps) F + eps H with H a point mass, another GPD, or a multiple of a model quantile."""

    eps: float
    kind: str = "point"
    value: float | None = None  # point mass location
    params: GpdParams | None = None  # contaminating GPD
    multiplier: float = 100.0  # quantile kind: H = delta at multiplier * F^{-1}(prob)
    prob: float = 0.999

    def __post_init__(self):
        if not 0 <= self.eps < 1:
            raise ValueError(f"eps must lie in [0, 1), got {self.eps}")
        if self.kind not in CONTAMINANTS:
            raise ValueError(f"unknown contaminant {self.kind!r}")
        if self.kind == "point" and self.value is None:
            raise ValueError("point contamination needs a value")
        if self.kind == "gpd" and self.params is None:
            raise ValueError("gpd contamination needs params")

    def location(self, p: GpdParams) -> float | None:
        if self.kind == "point":
            return float(self.value)
        if self.kind == "quantile":
            return float(self.multiplier * quantile(p, self.prob))
        return None

    def describe(self) -> dict:
        d = {"eps": self.eps, "kind": self.kind, "value": self.value, "multiplier": self.multiplier, "prob": self.prob}
        if self.params is not None:
            d["params"] = asdict(self.params)
        return d


def gross_error_sample(p: GpdParams, spec: ContaminationSpec, n: int, seed=None) -> LossSample:
    """Each observation from H with probability eps, else from the model.

    The model uniforms are drawn first from the stream, so eps = 0 reproduces
    ``gpd_model.sample(p, n, seed)`` value for value.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    values = quantile(p, rng.random(n))
    hit = rng.random(n) < spec.eps
    if spec.kind == "gpd":
        cont = quantile(spec.params, rng.random(n))
    else:
        cont = np.full(n, spec.location(p))
    values = np.where(hit, cont, values)
    return LossSample(values, meta={"source": "gross_error", "contaminated": hit, "spec": spec.describe()})


# ---------------------------------------------------------------- Monte Carlo study

@dataclass
class EstimatorStats:
    name: str
    mean: np.ndarray
    bias: np.ndarray
    cov: np.ndarray
    mse: float
    n_ok: int
    n_failed: int

    def row(self) -> dict:
        return {"estimator": self.name, "bias_xi": float(self.bias[0]), "bias_beta": float(self.bias[1]),
                "mse": self.mse, "var_xi": float(self.cov[0, 0]), "var_beta": float(self.cov[1, 1]),
                "n_ok": self.n_ok, "n_failed": self.n_failed}


@dataclass
class StudyReport:
    """Per-estimator bias and MSE of (xi, beta / beta_true) across replicates."""

    stats: dict
    params: GpdParams
    contamination: ContaminationSpec
    n: int
    reps: int
    seed: int | None
    estimates: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("replicate count must be positive")

    def rows(self) -> list[dict]:
        return [s.row() for s in self.stats.values()]

    def write_csv(self, path, header_lines=()) -> None:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})

    def to_json(self) -> dict:
        return {"params": asdict(self.params), "contamination": self.contamination.describe(),
                "n": self.n, "reps": self.reps, "seed": self.seed, "estimators": self.rows()}


Estimator = Callable[[LossSample], FitResult]


def standard_estimators(u: float = 0.0, kinds=("MLE", "MedkMAD", "RMXE", "MBRE"), k: float = 10.0,
                        grids: Mapping[str, MultiplierGrid] | None = None, omse_radius: float = 0.5) -> dict:
    """MLE, MedkMAD, and one-step robust estimators started at MedkMAD."""
    cfg = KmadConfig(k)
    grids = dict(grids or {})

    def robust(kind):
        grid = grids.get(kind)
        if grid is None and kind in ("RMXE", "MBRE"):
            grid = grids[kind] = default_grid(kind)
        radius = omse_radius if kind == "OMSE" else None

        def fit(s):
            return one_step(medkmad_fit(s, u, cfg), kind, radius, s, grid=grid)

        return fit

    out = {}
    for kind in kinds:
        if kind == "MLE":
            out[kind] = lambda s: mle_fit(s, u)
        elif kind == "MedkMAD":
            out[kind] = lambda s: medkmad_fit(s, u, cfg)
        else:
            out[kind] = robust(kind)
    return out


def _fit_replicate(estimators, p, spec, n, child):
    s = gross_error_sample(p, spec, n, child)
    out = {}
    for name, fit in estimators.items():
        try:
            res = fit(s)
        except (ValueError, ArithmeticError, RuntimeError):
            res = None
        out[name] = [res.params.xi, res.params.beta / p.beta] if res is not None and res.converged else None
    return out


def bias_mse_study(estimators: Mapping[str, Estimator], p: GpdParams, spec: ContaminationSpec, n: int,
                   reps: int, seed=None, workers: int = 1) -> StudyReport:
    """Monte Carlo bias and MSE; replicate i uses the i-th spawned seed, so results do not depend on workers."""
    if reps < 1:
        raise ValueError("replicate count must be positive")
    children = np.random.SeedSequence(seed).spawn(reps)
    truth = np.array([p.xi, 1.0])

    def job(child):
        return _fit_replicate(estimators, p, spec, n, child)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(job, children))
    else:
        results = [job(c) for c in children]
    est = {name: [r[name] for r in results if r[name] is not None] for name in estimators}
    failed = {name: sum(r[name] is None for r in results) for name in estimators}
    stats = {}
    for name, rows in est.items():
        arr = np.array(rows).reshape(-1, 2)
        err = arr - truth
        mean = arr.mean(axis=0) if len(arr) else np.full(2, np.nan)
        cov = np.cov(arr, rowvar=False, ddof=0) if len(arr) > 1 else np.full((2, 2), np.nan)
        stats[name] = EstimatorStats(name, mean, mean - truth, cov, float((err**2).sum(axis=1).mean()),
                                     len(arr), failed[name])
    return StudyReport(stats, p, spec, n, reps, seed, estimates={k: np.array(v) for k, v in est.items()})


# ---------------------------------------------------------------- asymptotic studies

@dataclass
class EfficiencyCurve:
    s_grid: np.ndarray
    r_grid: np.ndarray
    rel_mse: np.ndarray  # rel_mse[i, j] = maxMSE(OMSE_s_i, r_j) / maxMSE(OMSE_r_j, r_j)

    @property
    def efficiency(self) -> np.ndarray:
        return 1.0 / self.rel_mse

    def minimax(self) -> tuple[float, float]:
        """(s minimizing the worst relative MSE over r, its worst efficiency)."""
        worst = self.rel_mse.max(axis=1)
        i = int(np.argmin(worst))
        return float(self.s_grid[i]), float(1.0 / worst[i])


def efficiency_curve(p: GpdParams, s_grid, r_grid) -> EfficiencyCurve:
    std = GpdParams(0.0, p.xi, 1.0)
    s_grid, r_grid = np.asarray(s_grid, dtype=float), np.asarray(r_grid, dtype=float)
    cache = {}

    def spec(r):
        if r not in cache:
            cache[r] = solve_omse(std, float(r)) if r > 0 else mle_spec(std)
        return cache[r]

    den = np.array([max_mse(spec(r), r) for r in r_grid])
    rel = np.array([[max_mse(spec(s), r) / d for r, d in zip(r_grid, den)] for s in s_grid])
    return EfficiencyCurve(s_grid, r_grid, rel)


def worst_point_mass_bias(spec, eps: float, placements=None) -> tuple[float, float]:
    """Largest asymptotic bias eps |psi(x)| over point-mass placements x (standardized norm)."""
    p = spec.params
    if placements is None:
        placements = p.u + p.beta * np.geomspace(1e-3, 1e6, 20)
    x = np.asarray(placements, dtype=float)
    norms = np.linalg.norm(spec(x) / np.array([1.0, p.beta]), axis=1)
    i = int(np.argmax(norms))
    return float(eps * norms[i]), float(x[i])
