"""Evaluation metrics for copula flows: grid JSD, marginal uniformity, NLL."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import xlogy

DensityFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BinSpec:
    n: int = 25

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one bin")

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n + 1) / self.n

    def counts(self, x: np.ndarray) -> np.ndarray:
        """Counts in ``[(k-1)/n, k/n)``; a value of exactly 1 goes to the last bin."""
        idx = np.minimum(np.floor(np.asarray(x) * self.n).astype(np.int64), self.n - 1)
        if np.any(idx < 0):
            raise ValueError("samples must lie in [0, 1]")
        return np.bincount(idx, minlength=self.n)


def mesh_centers(mesh: int) -> np.ndarray:
    """Cell centres of an equidistant ``mesh x mesh`` grid, shape (mesh, mesh, 2), [row=y, col=x]."""
    if mesh < 2:
        raise ValueError("mesh must be at least 2")
    g = (np.arange(mesh) + 0.5) / mesh
    x, y = np.meshgrid(g, g)
    return np.stack([x, y], axis=-1)


def _masses(p: DensityFn, q: DensityFn, mesh: int):
    pts = mesh_centers(mesh).reshape(-1, 2)
    pv = np.asarray(p(pts), dtype=np.float64)
    qv = np.asarray(q(pts), dtype=np.float64)
    valid = np.isfinite(pv) & np.isfinite(qv) & (pv >= 0) & (qv >= 0)
    if not valid.any():
        raise ValueError("every grid cell produced an invalid density evaluation")
    pm = np.where(valid, pv, 0.0)
    qm = np.where(valid, qv, 0.0)
    if pm.sum() <= 0 or qm.sum() <= 0:
        raise ValueError("a density vanishes on every valid cell")
    return pm / pm.sum(), qm / qm.sum(), valid


def _jsd_terms(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    M = 0.5 * (P + Q)
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(P > 0, xlogy(P, P) - xlogy(P, M), 0.0)
        tq = np.where(Q > 0, xlogy(Q, Q) - xlogy(Q, M), 0.0)
    return 0.5 * (tp + tq)


def jsd_grid(p: DensityFn, q: DensityFn, mesh: int = 300) -> float:
    """Jensen-Shannon divergence (nats) of two densities discretised on cell centres.

    Cells where either density is NaN or infinite are dropped and both mass
    vectors renormalised over the rest.
    """
    P, Q, _ = _masses(p, q, mesh)
    return float(min(max(_jsd_terms(P, Q).sum(), 0.0), math.log(2.0)))


def jsd_pointwise_map(p: DensityFn, q: DensityFn, mesh: int = 300) -> np.ndarray:
    """Per-cell JSD integrand, ``(mesh, mesh)`` with NaN on invalid cells.

    Multiplying by the cell area ``1 / mesh**2`` and summing gives :func:`jsd_grid`.
    """
    P, Q, valid = _masses(p, q, mesh)
    out = _jsd_terms(P, Q) * mesh * mesh
    out[~valid] = np.nan
    return out.reshape(mesh, mesh)


def _check_coord(i: int) -> int:
    if i not in (1, 2):
        raise ValueError(f"coordinate must be 1 or 2, got {i}")
    return i - 1


def _log_bin_errors(samples, i: int, n: int) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)[:, _check_coord(i)]
    if x.size < n:
        raise ValueError(f"need at least {n} samples, got {x.size}")
    counts = BinSpec(n).counts(x)
    with np.errstate(divide="ignore"):
        return np.abs(np.log(counts / x.size) + math.log(n))


def uniformity_T(samples, i: int, n: int = 25) -> float:
    """Mean over bins of ``|log P(C_i in A_k) + log n|``; an empty bin gives ``inf``."""
    return float(_log_bin_errors(samples, i, n).mean())


def uniformity_M(samples, i: int, n: int = 25) -> float:
    """Worst bin of the same statistic as :func:`uniformity_T`."""
    return float(_log_bin_errors(samples, i, n).max())


def uniformity_from_probs(probs) -> tuple[float, float]:
    """(T, M) for exact bin probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        err = np.abs(np.log(p) + math.log(p.size))
    return float(err.mean()), float(err.max())


def eval_nll(log_density: Callable[[np.ndarray], np.ndarray], samples) -> float:
    lp = np.asarray(log_density(np.asarray(samples, dtype=np.float64)), dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(lp))
    if bad.size:
        raise FloatingPointError(f"non-finite log density at sample index {int(bad[0])}")
    return float(-lp.mean())


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CMFLOW_THREADS", "1")))
    except ValueError:
        return 1


def map_chunks(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, chunk: int = 50_000) -> np.ndarray:
    """Apply ``fn`` chunk-wise (optionally on threads) and concatenate in order."""
    parts = [x[i:i + chunk] for i in range(0, len(x), chunk)] or [x]
    workers = min(worker_count(), len(parts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            outs = list(ex.map(fn, parts))
    else:
        outs = [fn(p) for p in parts]
    return np.concatenate(outs, axis=0)


@dataclass(frozen=True)
class Thresholds:
    jsd: float | None = 1e-3
    T: float | None = 1e-2
    M: float | None = 8e-2

    def met(self, report: "MetricReport") -> bool:
        checks = [(self.jsd, [report.jsd]), (self.T, report.T), (self.M, report.M)]
        return all(all(v <= lim for v in vals) for lim, vals in checks if lim is not None)


@dataclass(frozen=True)
class EvalConfig:
    mesh: int = 300
    bins: int = 25
    eval_batch: int = 500_000
    nll_batch: int = 3000
    seed: int = 0
    thresholds: Thresholds = field(default_factory=Thresholds)


@dataclass
class MetricReport:
    jsd: float
    T: list[float]
    M: list[float]
    nll: float
    eval_samples: int
    mesh: int
    bins: int
    seed: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["T"] = [_finite_or_str(v) for v in self.T]
        d["M"] = [_finite_or_str(v) for v in self.M]
        return d


def _finite_or_str(v: float):
    return v if math.isfinite(v) else "inf"


def metric_report(flow, target, config: EvalConfig = EvalConfig()) -> tuple[MetricReport, bool]:
    """Full metric suite of a copula flow against a reference copula.

    Returns the report and whether every configured threshold is met.
    """
    from .copula_flow import cf_log_density, cf_sample
    from .ref_copulas import copula_density, copula_sample

    ss = np.random.SeedSequence(config.seed)
    s_uniform, s_target = ss.spawn(2)
    jsd = jsd_grid(lambda c: copula_density(target, c),
                   lambda c: np.exp(map_chunks(lambda z: cf_log_density(flow, z), c)),
                   config.mesh)
    u = np.random.default_rng(s_uniform).random((config.eval_batch, 2))
    samples = map_chunks(lambda z: cf_sample(flow, z), u)
    T = [uniformity_T(samples, i, config.bins) for i in (1, 2)]
    M = [uniformity_M(samples, i, config.bins) for i in (1, 2)]
    batch = copula_sample(target, config.nll_batch, np.random.default_rng(s_target))
    nll = eval_nll(lambda c: cf_log_density(flow, c), batch)
    report = MetricReport(jsd, T, M, nll, config.eval_batch, config.mesh, config.bins, config.seed)
    return report, config.thresholds.met(report)
