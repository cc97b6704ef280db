"""Command-line front end: ingest loss data, fit, compute OpVaR, emit diagnostics, run studies.

Configuration precedence: explicit flags > --config JSON file > built-in defaults.
Exit codes: 0 success (possibly with warnings), 1 usage/config error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .classical import MIN_EXCEEDANCES, FitResult, mle_fit
from .contamination import ContaminationSpec, bias_mse_study, standard_estimators
from .diagnostics import influence_table, outlyingness_table, qq_band_table
from .gpd_model import DomainError, ExceedanceSummary, GpdParams, LossSample
from .medkmad import KmadConfig, medkmad_fit
from .oprisk import FrequencyModel, compound_mc_quantile, estimate_lambda, opvar_single_loss
from .robust_optimal import (DEFAULT_XI_NODES, SolverError, build_grid, default_grid, grid_filename, load_grid,
                             one_step, save_grid)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ESTIMATORS = ("mle", "medkmad", "mbre", "omse", "rmxe")
OPTIONAL_COLUMNS = ("business_line", "event_type", "settlement_date", "organization", "region")
LOCK_NAME = ".robopvar.lock"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    command: str = "fit"
    input: str | None = None
    threshold: float | None = None
    estimator: str = "rmxe"
    radius: float | None = None
    k: float = 10.0
    alpha: float = 0.999
    lam: float | None = None
    institutions: int | None = None
    years: float | None = None
    horizon: float = 1.0
    seed: int = 0
    out: str = "."
    format: str = "csv"
    business_line: str | None = None
    event_type: str | None = None
    grid_file: str | None = None
    # opvar: evaluate at given parameters instead of fitting
    xi: float | None = None
    beta: float | None = None
    mc_reps: int = 0
    # study
    n: int = 1000
    reps: int = 500
    eps: float = 0.05
    contaminant: str = "quantile"
    contaminant_value: float | None = None
    multiplier: float = 100.0
    estimators: str = "MLE,MedkMAD,RMXE,MBRE"
    # build-grid
    label: str = "RMXE"
    xi_min: float = float(DEFAULT_XI_NODES[0])
    xi_max: float = float(DEFAULT_XI_NODES[-1])
    xi_step: float = 0.05

    def settings(self) -> dict:
        """Every setting that affects results (the output directory excluded)."""
        return {k: v for k, v in asdict(self).items() if k != "out"}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.settings(), sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        if self.command in ("fit", "opvar", "diagnose"):
            fixed = self.command == "opvar" and self.xi is not None
            if self.input is None and not fixed:
                raise ConfigError("--input is required")
            if self.input is not None and not Path(self.input).is_file():
                raise ConfigError(f"input file not found: {self.input}")
            if not fixed and (self.threshold is None or not math.isfinite(self.threshold)):
                raise ConfigError("--threshold is required and must be finite")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.estimator == "omse" and not (self.radius is not None and self.radius > 0):
            raise ConfigError("estimator omse needs --radius > 0")
        if self.radius is not None and not self.radius >= 0:
            raise ConfigError("--radius must be >= 0")
        if not self.k > 0:
            raise ConfigError("--k must be > 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("--alpha must lie in (0, 1)")
        if not self.horizon > 0:
            raise ConfigError("--horizon must be > 0")
        if self.format not in ("csv", "json"):
            raise ConfigError("--format must be csv or json")
        if self.grid_file is not None and self.command != "build-grid" and not Path(self.grid_file).is_file():
            raise ConfigError(f"grid file not found: {self.grid_file}")
        if self.command == "opvar":
            if (self.xi is None) != (self.beta is None):
                raise ConfigError("--xi and --beta go together")
            if self.lam is None and (self.institutions is None or self.years is None):
                raise ConfigError("opvar needs --lambda or both --institutions and --years")
        if self.command == "study":
            if not 0 <= self.eps < 1:
                raise ConfigError("--eps must lie in [0, 1)")
            if self.reps < 1 or self.n < MIN_EXCEEDANCES:
                raise ConfigError(f"study needs --reps >= 1 and --n >= {MIN_EXCEEDANCES}")
            if self.xi is None or self.beta is None:
                raise ConfigError("study needs --xi and --beta")
        if self.command == "build-grid":
            if self.label.upper() not in ("MBRE", "OMSE", "RMXE"):
                raise ConfigError("--label must be MBRE, OMSE or RMXE")
            if self.label.upper() == "OMSE" and not (self.radius is not None and self.radius > 0):
                raise ConfigError("OMSE grid needs --radius > 0")
            if not 0 < self.xi_min < self.xi_max or not self.xi_step > 0:
                raise ConfigError("need 0 < --xi-min < --xi-max and --xi-step > 0")


def _config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key, val in raw.items():
        name = key.replace("-", "_")
        name = "lam" if name == "lambda" else name
        if name not in known or name == "command":
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = val
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = _config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["command"] = args.command
    try:
        cfg = RunConfig(**values)
        cfg.validate()
    except (TypeError, AttributeError) as exc:  # wrongly typed config-file values
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


# ---------------------------------------------------------------- ingest

@dataclass
class IngestReport:
    path: str
    rows: int = 0
    kept: int = 0
    rejected: list = field(default_factory=list)  # (line number, reason)
    filtered_out: int = 0
    cells: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"path": self.path, "rows": self.rows, "kept": self.kept, "filtered_out": self.filtered_out,
                "rejected": [{"line": ln, "reason": why} for ln, why in self.rejected], "cells": self.cells}


def ingest(path, business_line: str | None = None, event_type: str | None = None) -> tuple[LossSample, IngestReport]:
    """Read a loss CSV (header row, UTF-8, '.' decimals); bad rows are reported and skipped."""
    report = IngestReport(str(path))
    values, extra = [], {c: [] for c in OPTIONAL_COLUMNS}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "loss_amount" not in [c.strip() for c in reader.fieldnames]:
            raise DataError(f"{path}: required column 'loss_amount' missing")
        reader.fieldnames = [c.strip() for c in reader.fieldnames]
        present = [c for c in OPTIONAL_COLUMNS if c in reader.fieldnames]
        cells: dict = {}
        for row in reader:
            line = reader.line_num
            report.rows += 1
            if None in row:
                report.rejected.append((line, "too many fields"))
                continue
            raw = row.get("loss_amount")
            try:
                x = float(raw)
            except (TypeError, ValueError):
                report.rejected.append((line, f"loss_amount not a number: {raw!r}"))
                continue
            if not math.isfinite(x) or x <= 0:
                report.rejected.append((line, f"loss_amount must be positive and finite: {raw!r}"))
                continue
            bl, et = (row.get("business_line") or "").strip(), (row.get("event_type") or "").strip()
            key = f"{bl}|{et}"
            cells[key] = cells.get(key, 0) + 1
            if (business_line is not None and bl != business_line) or (event_type is not None and et != event_type):
                report.filtered_out += 1
                continue
            values.append(x)
            for c in present:
                extra[c].append((row.get(c) or "").strip())
    report.kept = len(values)
    report.cells = dict(sorted(cells.items()))
    if not values:
        raise DataError(f"{path}: no valid loss rows")
    meta = {"source": str(path), **{c: np.array(v) for c, v in extra.items() if v}}
    return LossSample(np.array(values), meta), report


# ---------------------------------------------------------------- pipeline pieces

def _grid_for(cfg: RunConfig):
    kind = cfg.estimator.upper()
    if cfg.grid_file:
        grid = load_grid(cfg.grid_file)
        if grid.label != kind:
            raise ConfigError(f"grid file holds {grid.label} multipliers, estimator is {kind}")
        return grid
    try:
        return default_grid(kind, cfg.radius if kind == "OMSE" else None)
    except FileNotFoundError:
        return None  # solved on the fly


def run_fit(cfg: RunConfig, sample: LossSample) -> FitResult:
    u = cfg.threshold
    n_u = int(np.sum(sample.values > u))
    if n_u < MIN_EXCEEDANCES:
        raise DataError(f"only {n_u} losses exceed the threshold {u}; need {MIN_EXCEEDANCES}")
    if cfg.estimator == "mle":
        fit = mle_fit(sample, u)
    else:
        fit = medkmad_fit(sample, u, KmadConfig(cfg.k))
        if cfg.estimator != "medkmad":
            if not fit.converged:
                raise NumericalError("MedkMAD start did not converge; no one-step correction possible")
            fit = one_step(fit, cfg.estimator.upper(), cfg.radius, sample, grid=_grid_for(cfg))
    if not fit.converged:
        raise NumericalError(f"{fit.estimator} fit did not converge: {fit.info}")
    return fit


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, (GpdParams, ExceedanceSummary)):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class Emitter:
    """Writes output files, each led by a header naming tool version, config hash and seed."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.header = {"tool": "robopvar", "version": __version__, "config_sha256": cfg.digest(), "seed": cfg.seed}
        self.written: list[str] = []

    @property
    def header_lines(self):
        return [f"{k}={v}" for k, v in self.header.items()]

    def json(self, name, payload) -> None:
        doc = {"header": self.header, **payload}
        text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
        (self.out / name).write_text(text + "\n", encoding="utf-8")
        self.written.append(name)

    def table(self, stem, table) -> None:
        if self.cfg.format == "json":
            self.json(f"{stem}.json", table.to_json())
        else:
            table.write_csv(self.out / f"{stem}.csv", self.header_lines)
            self.written.append(f"{stem}.csv")


def _fit_payload(cfg, fit, report):
    d = fit.to_dict()
    if fit.influence is not None:
        d["influence"] = {"kind": fit.influence.kind, "A": fit.influence.A, "a": fit.influence.a,
                          "b": fit.influence.b, "radius": fit.influence.radius}
    return {"config": cfg.settings(), "fit": d, "ingest": report.to_json() if report else None}


# ---------------------------------------------------------------- commands

def cmd_fit(cfg: RunConfig, em: Emitter) -> list[str]:
    sample, report = ingest(cfg.input, cfg.business_line, cfg.event_type)
    fit = run_fit(cfg, sample)
    em.json("fit.json", _fit_payload(cfg, fit, report))
    return _ingest_warnings(report)


def cmd_opvar(cfg: RunConfig, em: Emitter) -> list[str]:
    report = None
    if cfg.xi is not None:
        u = cfg.threshold if cfg.threshold is not None else 0.0
        params = GpdParams(u, cfg.xi, cfg.beta)
        if cfg.input is not None:
            sample, report = ingest(cfg.input, cfg.business_line, cfg.event_type)
            exc = sample.summary(u)
        else:
            exc = ExceedanceSummary(1, 1, u)
        fit_doc = {"estimator": "fixed", "u": u, "xi": cfg.xi, "beta": cfg.beta}
    else:
        sample, report = ingest(cfg.input, cfg.business_line, cfg.event_type)
        fit = run_fit(cfg, sample)
        params, exc = fit.params, sample.summary(cfg.threshold)
        fit_doc = _fit_payload(cfg, fit, None)["fit"]
    if cfg.lam is not None:
        freq = FrequencyModel(cfg.lam, cfg.horizon)
    else:
        freq = estimate_lambda(exc.n, cfg.institutions, cfg.years, cfg.horizon)
    res = opvar_single_loss(params, exc, freq, cfg.alpha)
    payload = {
        "config": cfg.settings(),
        "fit": fit_doc,
        "frequency": {"lambda": freq.lam, "horizon": freq.t, "institutions": freq.institutions, "years": freq.years},
        "exceedances": {"n": exc.n, "n_u": exc.n_u, "u": exc.u},
        "opvar": {"value": res.value, "alpha": res.alpha, "alpha_prime": res.alpha_prime,
                  "infinite_mean": res.infinite_mean, "method": "single-loss approximation"},
        "ingest": report.to_json() if report else None,
    }
    warn = _ingest_warnings(report)
    if res.infinite_mean:
        warn.append(f"shape {params.xi:.4g} >= 1: severity mean is infinite")
    if cfg.mc_reps > 0:
        mc = compound_mc_quantile(params, freq, cfg.alpha, cfg.mc_reps, seed=cfg.seed)
        payload["monte_carlo"] = {"value": mc.value, "reps": mc.reps, "seed": cfg.seed,
                                  "relative_gap": res.value / mc.value - 1 if mc.value else None,
                                  "low_tail_count": mc.low_tail_count}
    em.json("opvar.json", payload)
    return warn


def cmd_diagnose(cfg: RunConfig, em: Emitter) -> list[str]:
    sample, report = ingest(cfg.input, cfg.business_line, cfg.event_type)
    robust = run_fit(cfg, sample)
    mle = run_fit(RunConfig(**{**asdict(cfg), "estimator": "mle"}), sample)
    spec = robust.influence
    if spec is None:  # mle / medkmad requested: show the MLE influence function
        from .robust_optimal import mle_spec
        spec = mle_spec(robust.params)
    sub = LossSample(sample.values[sample.values > cfg.threshold])
    em.table("influence", influence_table(spec, sub))
    em.table("outlying", outlyingness_table(sample, mle, robust, seed=cfg.seed))
    pw, sim, qq = qq_band_table(robust, sample, radius=cfg.radius)
    em.table("qqband", qq)
    bands = {name: {"kind": b.kind, "nominal_level": b.nominal_level,
                    "radius_adjusted_level": b.radius_adjusted_level, "capped": b.capped}
             for name, b in (("pointwise", pw), ("simultaneous", sim))}
    em.json("diagnose.json", {"config": cfg.settings(), "fit": robust.to_dict(), "mle": mle.to_dict(),
                              "bands": bands, "qq": qq.meta, "ingest": report.to_json()})
    warn = _ingest_warnings(report)
    if sim.capped:
        warn.append("radius-adjusted band level capped")
    return warn


def cmd_study(cfg: RunConfig, em: Emitter) -> list[str]:
    p = GpdParams(0.0, cfg.xi, cfg.beta)
    if cfg.contaminant == "point" and cfg.contaminant_value is None:
        raise ConfigError("point contamination needs --contaminant-value")
    try:
        spec = ContaminationSpec(cfg.eps, cfg.contaminant, value=cfg.contaminant_value, multiplier=cfg.multiplier)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    names = [s.strip() for s in cfg.estimators.split(",") if s.strip()]
    known = {"MLE", "MEDKMAD", "RMXE", "MBRE", "OMSE"}
    if not names or any(n.upper() not in known for n in names):
        raise ConfigError(f"--estimators must list names from {sorted(known)}")
    canon = {"MEDKMAD": "MedkMAD"}
    kinds = tuple(canon.get(n.upper(), n.upper()) for n in names)
    est = standard_estimators(0.0, kinds, k=cfg.k, omse_radius=cfg.radius if cfg.radius else 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = bias_mse_study(est, p, spec, cfg.n, cfg.reps, seed=cfg.seed)
    if cfg.format == "json":
        em.json("study.json", rep.to_json())
    else:
        rep.write_csv(em.out / "study.csv", em.header_lines)
        em.written.append("study.csv")
    return [f"{s.name}: {s.n_failed} failed replicates" for s in rep.stats.values() if s.n_failed]


def cmd_build_grid(cfg: RunConfig, em: Emitter) -> list[str]:
    label = cfg.label.upper()
    radius = cfg.radius if label == "OMSE" else None
    nodes = np.round(np.arange(cfg.xi_min, cfg.xi_max + 1e-9, cfg.xi_step), 10)
    grid = build_grid(label, radius=radius, xi_nodes=nodes)
    name = cfg.grid_file or grid_filename(label, radius)
    path = Path(name) if Path(name).is_absolute() else em.out / name
    save_grid(grid, path, em.header_lines)
    em.written.append(str(path.name))
    return []


COMMANDS = {"fit": cmd_fit, "opvar": cmd_opvar, "diagnose": cmd_diagnose, "study": cmd_study,
            "build-grid": cmd_build_grid}


def _ingest_warnings(report) -> list[str]:
    if report is None:
        return []
    return [f"{report.path}:{ln}: rejected ({why})" for ln, why in report.rejected]


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON file of settings; explicit flags take precedence")
    g.add_argument("--input", help="loss CSV with a loss_amount column")
    g.add_argument("--threshold", type=float, help="POT threshold u")
    g.add_argument("--estimator", choices=ESTIMATORS)
    g.add_argument("--radius", type=float, help="contamination radius for omse (and QQ band adjustment)")
    g.add_argument("--k", type=float, help="kMad asymmetry (default 10)")
    g.add_argument("--alpha", type=float, help="OpVaR level (default 0.999)")
    g.add_argument("--lambda", dest="lam", type=float, help="loss frequency per year")
    g.add_argument("--institutions", type=int)
    g.add_argument("--years", type=float)
    g.add_argument("--horizon", type=float, help="time horizon t in years (default 1)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory (default .)")
    g.add_argument("--format", choices=("csv", "json"), help="table format (default csv)")
    g.add_argument("--business-line")
    g.add_argument("--event-type")
    g.add_argument("--grid-file", help="multiplier grid to use (or to write, for build-grid)")

    ap = _Parser(prog="robopvar", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"robopvar {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("fit", parents=[common], help="fit the severity model")
    op = sub.add_parser("opvar", parents=[common], help="fit and compute the single-loss OpVaR")
    op.add_argument("--xi", type=float, help="use this shape instead of fitting")
    op.add_argument("--beta", type=float, help="use this scale instead of fitting")
    op.add_argument("--mc-reps", type=int, help="also run a compound Poisson Monte Carlo check")
    sub.add_parser("diagnose", parents=[common], help="influence, outlyingness and QQ band tables")
    st = sub.add_parser("study", parents=[common], help="bias/MSE study under gross-error contamination")
    st.add_argument("--xi", type=float)
    st.add_argument("--beta", type=float)
    st.add_argument("--n", type=int)
    st.add_argument("--reps", type=int)
    st.add_argument("--eps", type=float)
    st.add_argument("--contaminant", choices=("point", "quantile"))
    st.add_argument("--contaminant-value", type=float)
    st.add_argument("--multiplier", type=float, help="quantile contaminant: multiple of the 99.9%% quantile")
    st.add_argument("--estimators", help="comma-separated list (default MLE,MedkMAD,RMXE,MBRE)")
    bg = sub.add_parser("build-grid", parents=[common], help="solve and write a multiplier grid")
    bg.add_argument("--label", choices=("MBRE", "OMSE", "RMXE", "mbre", "omse", "rmxe"))
    bg.add_argument("--xi-min", type=float)
    bg.add_argument("--xi-max", type=float)
    bg.add_argument("--xi-step", type=float)
    return ap


def _fail(code: int, kind: str, message: str, out: Path | None) -> int:
    record = {"error": kind, "message": message, "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out is not None and out.is_dir():
        (out / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None  # error record target until the config resolves
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        em = Emitter(cfg)
        with FileLock(str(out / LOCK_NAME), timeout=0):
            stale = out / "error.json"
            if stale.exists():
                stale.unlink()
            warn = COMMANDS[cfg.command](cfg, em)
    except Timeout:
        return _fail(EXIT_CONFIG, "locked", f"another run holds {out / LOCK_NAME}", None)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), out)
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc), out)
    except (NumericalError, SolverError, DomainError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", str(exc), out)
    for w in warn:
        print(f"warning: {w}", file=sys.stderr)
    for name in em.written:
        print(out / name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
