"""Metrics, benchmark execution, fold aggregation, timing and CSV reports.

Metric conventions used everywhere in this module:

* every metric is computed on the 3-D position block (filters are projected),
* ``MD`` is the mean of the squared Mahalanobis distance ``D^2`` (expected 3 for a
  consistent estimator), not of its square root,
* ``Det`` is ``det(P)`` of the 3x3 position covariance, reported in m^6,
* the first two measurements of every sequence are excluded for every method.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .bnn import BnnModel
from .filters import ProcessModel, run_filter
from .geom import POS_IDX, CovarianceError, GaussianEstimate, NoiseSigmas, SensorPose, check_psd
from .hybrid import EnsembleModel, bnkf_estimate, bnkfe_estimate, bnn_estimate
from .simkit import MeasurementTable, derive_seed, feature_matrix

METHODS = ("EKF", "UKF", "BNN", "BNKF", "BNKFe")
FILTER_METHODS = ("EKF", "UKF")
LEARNED_METHODS = ("BNN", "BNKF", "BNKFe")
TIER_ORDER = ("low", "medium", "high")
SKIP_STEPS = 2
Q_GRID = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0)

PER_STEP_COLUMNS = ["method", "tier", "rate", "fold", "traj_id", "step", "t",
                    "euclidean_error", "mahalanobis_sq", "cov_det"]
SUMMARY_COLUMNS = ["method", "tier", "rate", "status", "n_folds", "n_steps",
                   "ED_mean", "ED_std", "MD_mean", "MD_std", "Det_mean", "Det_std"]
FOLD_COLUMNS = ["method", "tier", "rate", "fold", "status", "ED", "MD", "Det"]
NOISE_SWEEP_COLUMNS = ["method", "tier", "ED_mean", "ED_std", "MD_mean", "MD_std",
                       "Det_mean", "Det_std"]
TIMING_COLUMNS = ["method", "traj_id", "n_measurements", "repeats", "min_s", "median_s", "max_s"]
_METRICS = (("ED", "euclidean_error"), ("MD", "mahalanobis_sq"), ("Det", "cov_det"))


# --------------------------------------------------------------------------- metrics


def euclidean_error(estimate, truth) -> np.ndarray:
    d = np.asarray(estimate, float) - np.asarray(truth, float)
    return np.sqrt(np.einsum("...i,...i->...", d, d))


def cov_volume(P) -> np.ndarray:
    """det(P) of (..., 3, 3) covariances; non-PSD input raises ``CovarianceError``."""
    P = np.asarray(P, float)
    check_psd(P)
    return np.linalg.det(P)


def mahalanobis_sq(truth, estimate: GaussianEstimate) -> np.ndarray:
    """Squared Mahalanobis distance via a Cholesky solve (no explicit inverse)."""
    err = np.asarray(truth, float) - estimate.mean
    P = estimate.covariance
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        cond = float(np.max(np.linalg.cond(P.reshape(-1, *P.shape[-2:]))))
        raise CovarianceError(f"covariance is singular or not positive definite "
                              f"(condition {cond:.3g})", cond) from None
    y = np.linalg.solve(L, err[..., None])[..., 0]
    return np.einsum("...i,...i->...", y, y)


def position_block(mean6: np.ndarray, cov6: np.ndarray) -> GaussianEstimate:
    return GaussianEstimate(mean6[..., POS_IDX], cov6[..., POS_IDX[:, None], POS_IDX])


# --------------------------------------------------------------------------- records


@dataclass(frozen=True)
class StepRecord:
    traj_id: int
    t: float
    method: str
    euclidean_error: float
    mahalanobis_sq: float
    cov_det: float
    wall_time: float = float("nan")


@dataclass
class AggregateRecord:
    method: str
    tier: str
    rate: float | str
    fold_means: dict[int, dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]
    n_steps: int
    status: str = "ok"
    time_per_trajectory: float = float("nan")


@dataclass
class FoldModels:
    bnn: BnnModel | None = None
    ensemble: EnsembleModel | None = None


@dataclass
class BenchmarkConfig:
    q: dict[str, float] = field(default_factory=lambda: {"EKF": 1.0, "UKF": 1.0})
    kappa: float = 0.0
    mc_samples: int = 100
    seed: int = 0
    sensor: tuple[float, float, float] = (0.0, 0.0, 0.0)
    batch: int = 256


@dataclass
class BenchmarkResult:
    steps: pd.DataFrame
    aggregates: list[AggregateRecord]
    wall_time: dict[str, float]
    checks: dict[str, bool]


# --------------------------------------------------------------------------- execution


def _sequence_layout(table: MeasurementTable):
    """Per-row position inside its (traj_id, rate) sequence and the sequence bounds."""
    bounds = table.group_bounds()
    pos = np.empty(len(table), dtype=np.int64)
    for a, b in bounds:
        pos[a:b] = np.arange(b - a)
    return bounds, pos


def filter_rows(method: str, table: MeasurementTable, q: float, sensor: SensorPose,
                kappa: float = 0.0, batch: int = 256, bounds=None) -> GaussianEstimate:
    """Run EKF/UKF over every sequence; returns position estimates for every table row.

    Rows at sequence position 0 carry NaN; position 1 holds the initialization.
    """
    bounds = table.group_bounds() if bounds is None else bounds
    model = ProcessModel(q)
    mean = np.full((len(table), 3), np.nan)
    cov = np.full((len(table), 3, 3), np.nan)
    order = sorted(range(len(bounds)), key=lambda i: (bounds[i][1] - bounds[i][0], i))
    for c in range(0, len(order), batch):
        chunk = [bounds[i] for i in order[c:c + batch]]
        lengths = np.array([b - a for a, b in chunk])
        T = lengths.max()
        z = np.zeros((len(chunk), T, 4))
        t = np.zeros((len(chunk), T))
        for j, (a, b) in enumerate(chunk):
            z[j, :b - a] = table.z[a:b]
            t[j, :b - a] = table.t[a:b]
            # padding must keep time strictly increasing for the untouched tail
            t[j, b - a:] = table.t[b - 1] + np.arange(1, T - (b - a) + 1)
        s = table.sigmas[[a for a, _ in chunk]]
        sig = NoiseSigmas(s[:, 0], s[:, 3], s[:, 1], s[:, 2])
        m6, c6 = run_filter(method.lower(), z, t, sig, sensor, model, kappa, lengths)
        pos = position_block(m6, c6)
        for j, (a, b) in enumerate(chunk):
            mean[a:b] = pos.mean[j, :b - a]
            cov[a:b] = pos.covariance[j, :b - a]
    return GaussianEstimate(mean, cov)


def learned_features(table: MeasurementTable, rows: np.ndarray) -> np.ndarray:
    return feature_matrix(table.z[rows - 1], table.z[rows], table.sigmas[rows])


def _learned_rows(method: str, fm: FoldModels, X: np.ndarray, sensor: SensorPose,
                  seed: int, n: int):
    if method == "BNN":
        if fm.bnn is None:
            raise ValueError("BNN needs a joint model")
        return bnn_estimate(fm.bnn, X, seed, n)
    if method == "BNKF":
        if fm.bnn is None:
            raise ValueError("BNKF needs a joint model")
        return bnkf_estimate(fm.bnn, X, None, sensor, seed, n)
    if fm.ensemble is None:
        raise ValueError("BNKFe needs an ensemble model")
    return bnkfe_estimate(fm.ensemble, X, None, sensor, seed, n)


def _metrics(truth: np.ndarray, est: GaussianEstimate):
    return (euclidean_error(est.mean, truth), mahalanobis_sq(truth, est),
            cov_volume(est.covariance))


def run_benchmark(table: MeasurementTable, methods=METHODS,
                  models: dict[int, FoldModels] | None = None,
                  config: BenchmarkConfig | None = None) -> BenchmarkResult:
    """Evaluate ``methods`` on every sequence of ``table`` (one tier).

    Filters run recursively over whole sequences; learned methods estimate each
    retained pair independently with the model of the row's own (held-out) fold.
    """
    config = config or BenchmarkConfig()
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    tiers = np.unique(table.tier.astype(str))
    if tiers.size != 1:
        raise ValueError(f"a benchmark table must hold a single tier, got {list(tiers)}")
    tier = str(tiers[0])
    sensor = SensorPose(config.sensor)
    bounds, pos = _sequence_layout(table)
    rows = np.nonzero(pos >= SKIP_STEPS)[0]
    folds = np.unique(table.fold[rows])
    needs_models = [m for m in methods if m in LEARNED_METHODS]
    if needs_models:
        missing = [int(f) for f in folds if models is None or int(f) not in models]
        if missing:
            raise ValueError(f"missing trained models for folds {missing}")

    frames, wall, checks = [], {}, {}
    for method in methods:
        t0 = time.perf_counter()
        if method in FILTER_METHODS:
            est = filter_rows(method, table, config.q[method], sensor, config.kappa,
                              config.batch, bounds)
            sel = rows
            ed, d2, det = _metrics(table.target[sel], GaussianEstimate(est.mean[sel],
                                                                      est.covariance[sel]))
        else:
            parts = []
            diag_ok, det_ok = True, True
            for f in folds:
                fr = rows[table.fold[rows] == f]
                out = _learned_rows(method, models[int(f)], learned_features(table, fr), sensor,
                                    derive_seed(config.seed, "mc", method, int(f)),
                                    config.mc_samples)
                parts.append((fr, _metrics(table.target[fr], out.estimate)))
                if out.prior is not None:
                    det_prior = np.linalg.det(out.prior.covariance)
                    det_post = np.linalg.det(out.covariance)
                    det_ok &= bool(np.all(det_post <= det_prior * (1 + 1e-9)))
                    if method == "BNKFe":
                        off = out.prior.covariance[:, ~np.eye(3, dtype=bool)]
                        diag_ok &= bool(np.all(off == 0.0))
            if method in ("BNKF", "BNKFe"):
                checks[f"{method}_det_not_inflated"] = det_ok
            if method == "BNKFe":
                checks["BNKFe_prior_diagonal"] = diag_ok
            sel = np.concatenate([p[0] for p in parts])
            ed, d2, det = (np.concatenate([p[1][i] for p in parts]) for i in range(3))
            order = np.argsort(sel, kind="stable")
            sel, ed, d2, det = sel[order], ed[order], d2[order], det[order]
        wall[method] = time.perf_counter() - t0
        frames.append(pd.DataFrame({
            "method": method, "tier": tier, "rate": table.rate[sel],
            "fold": table.fold[sel], "traj_id": table.traj_id[sel], "step": pos[sel],
            "t": table.t[sel], "euclidean_error": ed, "mahalanobis_sq": d2, "cov_det": det,
        }, columns=PER_STEP_COLUMNS))
    steps = pd.concat(frames, ignore_index=True)
    n_traj = len({int(i) for i in table.traj_id})
    aggs = aggregate(steps, folds=[int(f) for f in folds])
    for a in aggs:
        if a.rate == "all":
            a.time_per_trajectory = wall.get(a.method, float("nan")) / max(n_traj, 1)
    checks["filters_std_zero"] = all(
        all(v == 0.0 for v in a.std.values()) for a in aggs if a.method in FILTER_METHODS)
    checks["all_cells_populated"] = all(a.status == "ok" for a in aggs)
    return BenchmarkResult(steps, aggs, wall, checks)


# --------------------------------------------------------------------------- aggregation


def _rate_label(rate) -> str:
    return rate if isinstance(rate, str) else repr(float(rate))


def aggregate(steps: pd.DataFrame, folds: list[int] | None = None) -> list[AggregateRecord]:
    """Fold means and grand mean +- std for every (method, tier, rate) cell.

    Learned methods: grand mean is the mean of per-fold means and the spread is the
    sample std across folds.  EKF/UKF do not depend on the fold split, so their
    grand mean pools every step and their std is exactly 0.  Rate ``"all"`` pools
    the sampling rates.
    """
    out = []
    folds = sorted(int(f) for f in (folds if folds is not None else steps["fold"].unique()))
    rates = sorted(float(r) for r in steps["rate"].unique())
    methods = [m for m in METHODS if m in set(steps["method"])]
    tiers = sorted(set(steps["tier"]), key=lambda t: (TIER_ORDER.index(t)
                                                       if t in TIER_ORDER else 99, t))
    for method in methods:
        for tier in tiers:
            cell = steps[(steps["method"] == method) & (steps["tier"] == tier)]
            for rate in ["all", *rates]:
                sub = cell if rate == "all" else cell[cell["rate"] == rate]
                fold_means = {}
                for f in folds:
                    fs = sub[sub["fold"] == f]
                    if len(fs):
                        fold_means[f] = {k: float(fs[c].mean()) for k, c in _METRICS}
                status = "ok" if len(fold_means) == len(folds) and len(sub) else "absent"
                if method in FILTER_METHODS:
                    mean = {k: float(sub[c].mean()) if len(sub) else float("nan")
                            for k, c in _METRICS}
                    std = {k: 0.0 for k, _ in _METRICS}
                else:
                    vals = {k: np.array([fm[k] for fm in fold_means.values()]) for k, _ in _METRICS}
                    mean = {k: float(v.mean()) if v.size else float("nan") for k, v in vals.items()}
                    std = {k: float(v.std(ddof=1)) if v.size > 1 else float("nan")
                           for k, v in vals.items()}
                out.append(AggregateRecord(method, tier, rate, fold_means, mean, std,
                                           int(len(sub)), status))
    return out


def summary_frame(aggregates: list[AggregateRecord]) -> pd.DataFrame:
    rows = []
    for a in aggregates:
        rows.append({"method": a.method, "tier": a.tier, "rate": _rate_label(a.rate),
                     "status": a.status, "n_folds": len(a.fold_means), "n_steps": a.n_steps,
                     **{f"{k}_{s}": (a.mean if s == "mean" else a.std)[k]
                        for k, _ in _METRICS for s in ("mean", "std")}})
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def fold_frame(aggregates: list[AggregateRecord], folds: list[int]) -> pd.DataFrame:
    rows = []
    for a in aggregates:
        for f in folds:
            fm = a.fold_means.get(f)
            rows.append({"method": a.method, "tier": a.tier, "rate": _rate_label(a.rate),
                         "fold": f, "status": "ok" if fm else "absent",
                         **{k: (fm or {}).get(k, float("nan")) for k, _ in _METRICS}})
    return pd.DataFrame(rows, columns=FOLD_COLUMNS)


def noise_sweep_frame(aggregates: list[AggregateRecord]) -> pd.DataFrame:
    s = summary_frame([a for a in aggregates if a.rate == "all"])
    s["_m"] = s["method"].map(METHODS.index)
    s["_t"] = s["tier"].map(lambda t: TIER_ORDER.index(t) if t in TIER_ORDER else 99)
    s = s.sort_values(["_m", "_t"], kind="stable")
    return s[NOISE_SWEEP_COLUMNS].reset_index(drop=True)


# --------------------------------------------------------------------------- timing


@dataclass(frozen=True)
class TimingRecord:
    method: str
    repeats: int
    min: float
    median: float
    max: float


def time_method(fn: Callable[[], object], repeats: int = 5, method: str = "") -> TimingRecord:
    """Wall time of ``fn()``: one discarded warm-up run, then ``repeats`` timed runs."""
    if repeats < 5:
        raise ValueError("timing needs at least five repetitions")
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    s = np.array(samples)
    return TimingRecord(method, repeats, float(s.min()), float(np.median(s)), float(s.max()))


def trajectory_runners(table: MeasurementTable, traj_id: int, rate: float,
                       models: FoldModels | None, config: BenchmarkConfig,
                       methods=METHODS) -> dict[str, Callable[[], object]]:
    """Zero-argument callables running each method over one full sequence."""
    sel = np.nonzero((table.traj_id == traj_id) & (table.rate == rate))[0]
    if sel.size < 3:
        raise ValueError(f"trajectory {traj_id} at rate {rate} not found or too short")
    sub = MeasurementTable(*(getattr(table, f)[sel] for f in
                             ("traj_id", "t", "z", "sigmas", "tier", "rate", "target", "fold")))
    sensor = SensorPose(config.sensor)
    X = learned_features(sub, np.arange(1, len(sub)))
    runners = {}
    for m in methods:
        if m in FILTER_METHODS:
            runners[m] = (lambda m=m: filter_rows(m, sub, config.q[m], sensor, config.kappa))
        else:
            if models is None:
                raise ValueError("learned methods need trained models for timing")
            runners[m] = (lambda m=m: _learned_rows(m, models, X, sensor, config.seed,
                                                    config.mc_samples))
    return runners


def timing_frame(records: list[TimingRecord], traj_id: int, n_meas: int) -> pd.DataFrame:
    return pd.DataFrame([{"method": r.method, "traj_id": traj_id, "n_measurements": n_meas,
                          "repeats": r.repeats, "min_s": r.min, "median_s": r.median,
                          "max_s": r.max} for r in records], columns=TIMING_COLUMNS)


# --------------------------------------------------------------------------- tuning


def tune_q(method: str, table: MeasurementTable, grid=Q_GRID, sensor=(0.0, 0.0, 0.0),
           kappa: float = 0.0) -> tuple[float, dict[float, float]]:
    """Pick the process-noise intensity minimizing mean position error on ``table``."""
    bounds, pos = _sequence_layout(table)
    rows = pos >= SKIP_STEPS
    scores = {}
    for q in grid:
        est = filter_rows(method, table, float(q), SensorPose(sensor), kappa, bounds=bounds)
        err = euclidean_error(est.mean[rows], table.target[rows])
        scores[float(q)] = float(np.mean(err)) if np.all(np.isfinite(err)) else float("inf")
    best = min(scores, key=lambda q: (scores[q], q))
    return best, scores


# --------------------------------------------------------------------------- reports


def _write(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def emit_report(aggregates: list[AggregateRecord], path: str | Path,
                steps: pd.DataFrame | None = None,
                timing: pd.DataFrame | None = None) -> dict[str, Path]:
    """Write ``summary.csv``, ``folds.csv``, ``noise_sweep.csv`` and, when given,
    ``per_step.csv`` and ``timing.csv`` into directory ``path``.

    ``summary.csv`` columns: method, tier, rate ("all" pools rates), status
    ("ok" or "absent"), n_folds, n_steps, then mean/std of ED (m), MD (mean D^2)
    and Det (det of the position covariance, m^6).  Wall times live only in
    ``timing.csv`` so the other files are byte-stable.
    """
    if not aggregates:
        raise ValueError("nothing to report")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    folds = sorted({f for a in aggregates for f in a.fold_means})
    files = {"summary": out / "summary.csv", "folds": out / "folds.csv",
             "noise_sweep": out / "noise_sweep.csv"}
    _write(summary_frame(aggregates), files["summary"])
    _write(fold_frame(aggregates, folds), files["folds"])
    _write(noise_sweep_frame(aggregates), files["noise_sweep"])
    if steps is not None:
        files["per_step"] = out / "per_step.csv"
        _write(steps[PER_STEP_COLUMNS], files["per_step"])
    if timing is not None:
        files["timing"] = out / "timing.csv"
        _write(timing[TIMING_COLUMNS], files["timing"])
    return files


def reaggregate(per_step_csv: str | Path) -> pd.DataFrame:
    """Recompute summary means from ``per_step.csv`` alone (pooled rate ``"all"`` rows)."""
    df = pd.read_csv(per_step_csv)
    rows = []
    for (method, tier), cell in df.groupby(["method", "tier"], sort=False):
        for rate, sub in [("all", cell), *cell.groupby("rate")]:
            if method in FILTER_METHODS:
                vals = {k: sub[c].mean() for k, c in _METRICS}
            else:
                fm = sub.groupby("fold")[[c for _, c in _METRICS]].mean()
                vals = {k: fm[c].mean() for k, c in _METRICS}
            rows.append({"method": method, "tier": tier, "rate": _rate_label(rate),
                         **{f"{k}_mean": v for k, v in vals.items()}})
    return pd.DataFrame(rows)
