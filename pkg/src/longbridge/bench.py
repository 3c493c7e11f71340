"""Monte Carlo benchmark over confounding strength, ridge level, and estimator.

Each replication draws an experiment-like pool: an experimental sample
plus an unconfounded observational pool whose latent confounder is a
discrete level. Confounding of strength eta is then injected by biased
subsampling of the pool, and every configured estimator runs at every
ridge level, recording absolute errors against the generator's exact
effect. Replications are embarrassingly parallel with derived
per-replication seeds, so reports are bitwise identical across worker
counts; failures (solver non-convergence, degenerate folds) are counted
per cell and excluded from the error aggregates.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional, Union

import numpy as np

from longbridge.bridges import BasisSpec
from longbridge.covshift import tau_dr_covshift
from longbridge.data import CombinedSample
from longbridge.estimators import (
    EstimationError,
    EstimatorConfig,
    imputation_baseline,
    naive_dim,
    tau_dr,
    tau_out,
    tau_sel,
)
from longbridge.gmm import GmmConfig
from longbridge.synthetic import (
    DiscreteDgp,
    LatentLog,
    LinearSemParams,
    SubsampleConfig,
    biased_subsample,
    discrete_true_tau,
    gen_levels_sem,
    linear_sem_true_tau,
    sample_discrete,
)

SCHEMA_VERSION = 1

ESTIMATOR_NAMES = ("naive", "imputation", "out", "sel", "dr", "dr_covshift")
RIDGE_FREE = frozenset({"naive", "imputation"})

_ESTIMATOR_FNS = {
    "naive": lambda sample, cfg: naive_dim(sample),
    "imputation": lambda sample, cfg: imputation_baseline(sample),
    "out": tau_out,
    "sel": tau_sel,
    "dr": tau_dr,
    "dr_covshift": tau_dr_covshift,
}

_DEFAULT_ETA = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)
_DEFAULT_LAMBDA0 = (0.0, 0.33, 0.67, 1.0)


@dataclass(frozen=True)
class BenchmarkConfig:
    """Grid and budget of one benchmark run.

    ``lambda0_grid`` entries are ridge levels in the per-arm units of the
    bridge fits (the fit divides by the arm's observational row count).
    ``pool_n_o`` is the size of the unconfounded observational pool before
    subsampling; ``n_levels`` is the number of confounder levels when the
    process is the structural equation model.
    """

    dgp: Union[LinearSemParams, DiscreteDgp] = field(
        default_factory=LinearSemParams)
    pool_n_o: int = 20000
    n_e: int = 10000
    n_levels: int = 4
    eta_grid: tuple = _DEFAULT_ETA
    lambda0_grid: tuple = _DEFAULT_LAMBDA0
    replications: int = 1000
    estimators: tuple = ("naive", "imputation", "out", "sel", "dr")
    k_folds: int = 5
    base_seed: int = 0
    workers: int = 1
    subsample_floor: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "eta_grid", tuple(float(e) for e in self.eta_grid))
        object.__setattr__(self, "lambda0_grid",
                           tuple(float(l) for l in self.lambda0_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not self.eta_grid or not self.lambda0_grid:
            raise ValueError("eta_grid and lambda0_grid must be non-empty")
        unknown = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if unknown:
            raise ValueError(f"unknown estimator names {unknown}; choose from "
                             f"{sorted(ESTIMATOR_NAMES)}")
        if not self.estimators:
            raise ValueError("estimators must be non-empty")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if min(self.eta_grid) < 0:
            raise ValueError("eta values must be nonnegative")

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "dgp":
                if isinstance(value, LinearSemParams):
                    d["dgp"] = {"kind": "linear_sem", "params": _params_to_dict(value)}
                else:
                    d["dgp"] = {"kind": "discrete", "params": _dgp_to_dict(value)}
            elif isinstance(value, tuple):
                d[f.name] = list(value)
            else:
                d[f.name] = value
        return d

    @staticmethod
    def from_dict(d: dict) -> "BenchmarkConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}; "
                             f"this build reads version {SCHEMA_VERSION}")
        kwargs = {}
        for f in fields(BenchmarkConfig):
            if f.name not in d:
                continue
            value = d.pop(f.name)
            if f.name == "dgp":
                value = _dgp_from_dict(value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        if d:
            raise ValueError(f"unknown config fields {sorted(d)}")
        return BenchmarkConfig(**kwargs)

    def hash(self) -> str:
        # worker count changes scheduling, never results, so it is not
        # part of the experiment's identity
        d = self.to_dict()
        d.pop("workers", None)
        text = json.dumps(d, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _params_to_dict(params: LinearSemParams) -> dict:
    out = {}
    for f in fields(params):
        value = getattr(params, f.name)
        out[f.name] = value.tolist() if isinstance(value, np.ndarray) else value
    return out


def _dgp_to_dict(dgp: DiscreteDgp) -> dict:
    out = {}
    for f in fields(dgp):
        value = getattr(dgp, f.name)
        out[f.name] = value.tolist() if isinstance(value, np.ndarray) else value
    return out


def _dgp_from_dict(d: dict) -> Union[LinearSemParams, DiscreteDgp]:
    kind = d.get("kind")
    params = d.get("params", {})
    if kind == "linear_sem":
        return LinearSemParams(**params)
    if kind == "discrete":
        arrays = {k: (np.asarray(v) if isinstance(v, list) else v)
                  for k, v in params.items()}
        return DiscreteDgp(**arrays)
    raise ValueError(f"unknown dgp kind {kind!r}; use linear_sem or discrete")


@dataclass(frozen=True)
class CellStats:
    """Aggregates for one (eta, lambda0, estimator) cell.

    ``lambda0`` is None for ridge-free estimators. Percent improvements are
    against the naive cell at the same eta on the replications where both
    succeeded; positive means better than naive; None when naive was not
    benchmarked or no replication is matched.
    """

    eta: float
    lambda0: Optional[float]
    estimator: str
    mae: float
    medae: float
    replications: int
    failures: int
    pct_mae: Optional[float]
    pct_medae: Optional[float]


@dataclass(frozen=True)
class BenchmarkReport:
    cells: tuple
    metadata: dict
    wall_time_s: float = field(compare=False, default=0.0)

    def cell(self, eta: float, lambda0: Optional[float], estimator: str) -> CellStats:
        for c in self.cells:
            if (c.eta == eta and c.estimator == estimator
                    and (c.lambda0 == lambda0
                         or (c.lambda0 is None and lambda0 is None))):
                return c
        raise KeyError((eta, lambda0, estimator))

    def to_json(self) -> str:
        body = {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "wall_time_s": self.wall_time_s,
            "cells": [vars(c) for c in self.cells],
        }
        return json.dumps(body, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "BenchmarkReport":
        body = json.loads(text)
        if body.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported report schema_version")
        cells = tuple(CellStats(**c) for c in body["cells"])
        return BenchmarkReport(cells=cells, metadata=body["metadata"],
                               wall_time_s=body["wall_time_s"])


def _child_seed(base_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(base_seed, spawn_key=key).generate_state(1)[0])


def _gen_pool(cfg: BenchmarkConfig, r: int) -> tuple[CombinedSample, LatentLog, int]:
    """Replication r's experiment-like pool, before confounding is injected."""
    pool_seed = _child_seed(cfg.base_seed, 0xDA, r)
    if isinstance(cfg.dgp, LinearSemParams):
        sample, latent = gen_levels_sem(cfg.dgp, cfg.pool_n_o, cfg.n_e,
                                        seed=pool_seed, n_levels=cfg.n_levels)
        return sample, latent, cfg.n_levels - 1
    sample, latent = sample_discrete(cfg.dgp, cfg.pool_n_o, cfg.n_e, seed=pool_seed)
    return sample, latent, cfg.dgp.m_u - 1


def true_tau(dgp: Union[LinearSemParams, DiscreteDgp]) -> float:
    if isinstance(dgp, LinearSemParams):
        return linear_sem_true_tau(dgp)
    return discrete_true_tau(dgp)


def _estimator_cfg(cfg: BenchmarkConfig, lambda0: float, fold_seed: int,
                   tabular: bool) -> EstimatorConfig:
    basis = BasisSpec(kind="indicator", per_arm=True) if tabular else BasisSpec()
    return EstimatorConfig(k_folds=cfg.k_folds,
                           gmm=GmmConfig(ridge_scale=lambda0),
                           basis=basis, seed=fold_seed)


_WORKER: dict = {}


def _worker_init(cfg: BenchmarkConfig) -> None:
    _WORKER["cfg"] = cfg


def _run_replication(r: int) -> list:
    """All cells of one replication: (eta_i, lambda0 or None, name, estimate).

    Each replication draws its own experiment-like pool, then injects each
    confounding strength by biased subsampling; both seeds derive from the
    base seed and the replication index alone. The retention seed is shared
    across the eta grid, so within a replication the subsamples at different
    strengths reuse the same uniforms; cross-eta comparisons are paired,
    which sharpens grid-pattern contrasts without biasing any single cell.
    """
    cfg: BenchmarkConfig = _WORKER["cfg"]
    sample, latent, l_max = _gen_pool(cfg, r)
    tabular = isinstance(cfg.dgp, DiscreteDgp)
    records = []
    for ei, eta in enumerate(cfg.eta_grid):
        sub = biased_subsample(sample, latent, SubsampleConfig(
            eta=eta, floor=cfg.subsample_floor, l_max=l_max,
            seed=_child_seed(cfg.base_seed, 0xBE, r)))
        fold_seed = _child_seed(cfg.base_seed, 0xF0, r, ei)
        for name in cfg.estimators:
            lambdas = (None,) if name in RIDGE_FREE else cfg.lambda0_grid
            for lam in lambdas:
                est_cfg = _estimator_cfg(cfg, lam or 0.0, fold_seed, tabular)
                try:
                    est = _ESTIMATOR_FNS[name](sub.sample, est_cfg)
                    records.append((ei, lam, name, float(est.tau_hat)))
                except EstimationError:
                    records.append((ei, lam, name, None))
    return records


def run_benchmark(cfg: BenchmarkConfig) -> BenchmarkReport:
    """Run the full grid; deterministic given the config, whatever the workers.

    Per-replication seeds are derived from the base seed and the replication
    index alone, and the error arrays are reduced in replication order, so
    the report's cells are bitwise identical for any worker count.
    """
    start = time.monotonic()
    tau_true = true_tau(cfg.dgp)
    _worker_init(cfg)
    if cfg.workers == 1:
        all_records = [_run_replication(r) for r in range(cfg.replications)]
    else:
        with ProcessPoolExecutor(
                max_workers=cfg.workers, initializer=_worker_init,
                initargs=(cfg,)) as pool:
            chunk = max(1, cfg.replications // (4 * cfg.workers))
            all_records = list(pool.map(_run_replication,
                                        range(cfg.replications), chunksize=chunk))

    errors: dict = {}
    for r, records in enumerate(all_records):
        for ei, lam, name, tau_hat in records:
            key = (cfg.eta_grid[ei], lam, name)
            cell = errors.setdefault(key, np.full(cfg.replications, np.nan))
            if tau_hat is not None:
                cell[r] = abs(tau_hat - tau_true)

    cells = []
    for (eta, lam, name), errs in errors.items():
        ok = np.isfinite(errs)
        n_ok = int(ok.sum())
        mae = float(np.mean(errs[ok])) if n_ok else float("nan")
        medae = float(np.median(errs[ok])) if n_ok else float("nan")
        pct_mae = pct_medae = None
        naive_key = (eta, None, "naive")
        if name != "naive" and naive_key in errors:
            both = ok & np.isfinite(errors[naive_key])
            if both.any():
                base = errors[naive_key][both]
                mine = errs[both]
                pct_mae = float(100.0 * (np.mean(base) - np.mean(mine))
                                / np.mean(base))
                pct_medae = float(100.0 * (np.median(base) - np.median(mine))
                                  / np.median(base))
        cells.append(CellStats(eta=eta, lambda0=lam, estimator=name,
                               mae=mae, medae=medae, replications=n_ok,
                               failures=cfg.replications - n_ok,
                               pct_mae=pct_mae, pct_medae=pct_medae))
    cells.sort(key=lambda c: (c.eta, c.lambda0 is not None, c.lambda0 or 0.0,
                              c.estimator))
    metadata = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "base_seed": cfg.base_seed,
        "tau_true": tau_true,
    }
    return BenchmarkReport(cells=tuple(cells), metadata=metadata,
                           wall_time_s=time.monotonic() - start)


# -- report emission --------------------------------------------------------------------


def _fmt(value: Optional[float], digits: int = 3) -> str:
    if value is None or not np.isfinite(value):
        return "-"
    return f"{value:.{digits}f}"


def _csv_text(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["eta", "lambda0", "estimator", "metric", "value",
                     "replications", "failures", "pct_improvement"])
    for c in report.cells:
        lam = "" if c.lambda0 is None else repr(c.lambda0)
        for metric, value, pct in (("mae", c.mae, c.pct_mae),
                                   ("medae", c.medae, c.pct_medae)):
            writer.writerow([repr(c.eta), lam, c.estimator, metric, repr(value),
                             c.replications, c.failures,
                             "" if pct is None else repr(pct)])
    return buf.getvalue()


def _markdown_text(report: BenchmarkReport) -> str:
    """Grid layout: one block of two metric sub-rows per eta, one column per
    estimator-and-ridge-level combination, percent improvement in parens."""
    etas = sorted({c.eta for c in report.cells})
    columns = []
    seen = set()
    for c in report.cells:
        rank = (ESTIMATOR_NAMES.index(c.estimator)
                if c.estimator in ESTIMATOR_NAMES else len(ESTIMATOR_NAMES))
        key = (c.lambda0 is not None, rank, c.lambda0 or 0.0)
        if (c.lambda0, c.estimator) not in seen:
            seen.add((c.lambda0, c.estimator))
            columns.append((key, c.lambda0, c.estimator))
    columns.sort(key=lambda item: item[0])
    headers = ["eta", "metric"] + [
        name if lam is None else f"{name} (l0={lam:g})"
        for _, lam, name in columns]
    lines = ["| " + " | ".join(headers) + " |",
             "|" + "|".join("---" for _ in headers) + "|"]
    for eta in etas:
        for metric in ("MAE", "MedAE"):
            row = [f"{eta:g}", metric]
            for _, lam, name in columns:
                try:
                    c = report.cell(eta, lam, name)
                except KeyError:
                    row.append("-")
                    continue
                value = c.mae if metric == "MAE" else c.medae
                pct = c.pct_mae if metric == "MAE" else c.pct_medae
                text = _fmt(value)
                if pct is not None:
                    text += f" ({pct:+.0f}%)"
                row.append(text)
            lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: BenchmarkReport, fmt: str, path: str) -> str:
    """Write the report as json, csv, or a markdown grid; returns the path."""
    if fmt == "json":
        text = report.to_json() + "\n"
    elif fmt == "csv":
        text = _csv_text(report)
    elif fmt in ("md", "markdown", "markdown_table"):
        text = _markdown_text(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}; use json, csv, or md")
    with open(path, "w") as fh:
        fh.write(text)
    return path


def load_report(path: str) -> BenchmarkReport:
    with open(path) as fh:
        return BenchmarkReport.from_json(fh.read())
