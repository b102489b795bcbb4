"""The generate / train / eval / timing commands as plain functions over a run directory.

Layout under the run directory (subdirectory names come from ``config.paths``)::

    manifest.json
    data/trajectories.csv, data/validation_trajectories.csv
    data/<tier>/measurements.csv, dataset.csv, validation.csv
    models/<tier>/fold<k>_joint.npz, fold<k>_axis_<x|y|z>.npz, loss_trace.csv
    reports/summary.csv, folds.csv, per_step.csv, noise_sweep.csv, q_tuning.csv, timing.csv
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import pandas as pd

from . import config as cfgmod
from .bnn import BnnModel, train
from .config import RunConfig
from .evalkit import (FILTER_METHODS, SKIP_STEPS, BenchmarkConfig, FoldModels, aggregate,
                      emit_report, reaggregate, run_benchmark, time_method, timing_frame,
                      trajectory_runners, tune_q)
from .hybrid import AXES, EnsembleModel, train_ensemble
from .simkit import (MeasurementTable, assign_folds, build_validation_table, derive_seed,
                     make_sequences, make_trajectories, read_dataset, write_dataset,
                     write_measurements, write_trajectories)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
LOCK = ".bnkf.lock"


class RunError(RuntimeError):
    """A command cannot proceed (refused overwrite, missing inputs, lock held)."""


# --------------------------------------------------------------------------- plumbing


@contextlib.contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"{out} is locked by another invocation (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _nonempty(path: Path) -> bool:
    return path.exists() and any(p.name != LOCK for p in path.iterdir())


def _refuse(path: Path, force: bool, what: str) -> None:
    if _nonempty(path) and not force:
        raise RunError(f"{what} directory {path} is not empty; pass --force to overwrite")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_manifest(out: Path) -> dict:
    p = out / MANIFEST
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}


def write_manifest(out: Path, cfg: RunConfig, section: str, payload: dict) -> None:
    m = read_manifest(out)
    m["manifest_version"] = MANIFEST_VERSION
    m["config"] = json.loads(cfgmod.dumps(cfg))
    m["derived_seeds"] = derived_seeds(cfg)
    m[section] = payload
    (out / MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def derived_seeds(cfg: RunConfig) -> dict:
    s = cfg.seed
    return {
        "rule": "sha256 of the master seed and role labels, first 8 bytes, top bit cleared",
        "folds": derive_seed(s, "folds"),
        "trajectory[0]": derive_seed(s, "trajectory", 0),
        "train": {t: {str(f): {"joint": derive_seed(s, "train", t, f, "joint"),
                               "ensemble": derive_seed(s, "train", t, f, "ensemble")}
                      for f in range(cfg.folds)} for t in cfg.tiers},
        "mc": derive_seed(s, "mc"),
    }


def _files(root: Path, paths: list[Path]) -> dict:
    return {str(p.relative_to(root)): sha256(p) for p in paths}


def _dirs(out: Path, cfg: RunConfig):
    return out / cfg.paths.data, out / cfg.paths.models, out / cfg.paths.reports


# --------------------------------------------------------------------------- generate


def generate(cfg: RunConfig, out: str | Path, force: bool = False) -> list[str]:
    """Write trajectories, measurement sequences and fold-tagged datasets per tier.

    Returns the names of failed property checks (empty when all hold).
    """
    out = Path(out)
    _refuse(out, force, "output")
    with run_lock(out):
        data, _, _ = _dirs(out, cfg)
        data.mkdir(parents=True, exist_ok=True)
        sim = cfg.simulation()
        written = []
        trajs = make_trajectories(cfg.seed, sim)
        write_trajectories(trajs, data / "trajectories.csv")
        val_trajs = make_trajectories(cfg.seed, sim, role="validation", count=sim.n_validation,
                                      id_offset=10**6)
        write_trajectories(val_trajs, data / "validation_trajectories.csv")
        written += [data / "trajectories.csv", data / "validation_trajectories.csv"]
        failed = []
        for tier in cfg.tiers:
            d = data / tier
            d.mkdir(exist_ok=True)
            seqs = make_sequences(trajs, cfg.seed, sim, tier)
            folds = assign_folds([t.id for t in trajs], sim.folds, derive_seed(cfg.seed, "folds"))
            table = MeasurementTable.from_sequences(seqs, {t.id: t for t in trajs}, folds)
            write_measurements(seqs, d / "measurements.csv")
            write_dataset(table, d / "dataset.csv")
            write_dataset(build_validation_table(cfg.seed, sim, tier), d / "validation.csv")
            written += [d / "measurements.csv", d / "dataset.csv", d / "validation.csv"]
            failed += [f"{tier}:{name}" for name, ok in _dataset_checks(table, cfg).items() if not ok]
        scale = {"trajectories": sim.n_trajectories, "rates": list(sim.rates),
                 "sequences_per_tier": sim.n_trajectories * len(sim.rates),
                 "note": "desk scale; the full protocol uses 5000 trajectories x 3 rates "
                         "(~15000 test sequences per tier)"}
        write_manifest(out, cfg, "generate", {"files": _files(out, written), "scale": scale,
                                              "checks_failed": failed})
    return failed


def _dataset_checks(table: MeasurementTable, cfg: RunConfig) -> dict[str, bool]:
    ids, folds = table.traj_id, table.fold
    per_id = pd.Series(folds).groupby(ids).nunique()
    sizes = np.bincount(pd.Series(folds).groupby(ids).first().to_numpy(), minlength=cfg.folds)
    seqs = pd.Series(ids).groupby([ids, table.rate]).size()
    return {
        "folds_partition_trajectories": bool((per_id == 1).all()),
        "fold_sizes_balanced": bool(sizes.max() - sizes.min() <= 1),
        "rate_variants_per_trajectory": bool(
            (pd.Series(seqs.index.get_level_values(1)).groupby(
                seqs.index.get_level_values(0)).size() == len(cfg.rates)).all()),
        "sigmas_constant": bool(np.all(table.sigmas == table.sigmas[0])),
    }


# --------------------------------------------------------------------------- train


def _model_paths(mdir: Path, fold: int) -> dict[str, Path]:
    return {"joint": mdir / f"fold{fold}_joint.npz",
            **{f"axis_{a}": mdir / f"fold{fold}_axis_{a}.npz" for a in AXES}}


def _needs(methods) -> tuple[bool, bool]:
    return any(m in ("BNN", "BNKF") for m in methods), "BNKFe" in methods


def train_models(cfg: RunConfig, out: str | Path, force: bool = False) -> list[str]:
    """Per tier and fold: one joint 3-output model and three per-axis models."""
    out = Path(out)
    data, models, _ = _dirs(out, cfg)
    _refuse(models, force, "model")
    want_joint, want_axes = _needs(cfg.methods)
    with run_lock(out):
        written, failed = [], []
        for tier in cfg.tiers:
            src = data / tier / "dataset.csv"
            if not src.exists():
                raise RunError(f"missing dataset {src}; run generate first")
            sup = read_dataset(src).supervised()
            mdir = models / tier
            mdir.mkdir(parents=True, exist_ok=True)
            traces = []
            for fold in range(cfg.folds):
                tr = sup.subset(sup.fold != fold)
                paths = _model_paths(mdir, fold)
                fp = {"tier": tier, "fold": fold, "master_seed": cfg.seed}
                if want_joint:
                    seed = derive_seed(cfg.seed, "train", tier, fold, "joint")
                    res = train(tr.features, tr.target, cfg.bnn.train_config(seed), fp)
                    res.model.save(paths["joint"])
                    written.append(paths["joint"])
                    traces += [{"tier": tier, "fold": fold, "model": "joint", **e}
                               for e in res.loss_trace]
                if want_axes:
                    seed = derive_seed(cfg.seed, "train", tier, fold, "ensemble")
                    ens, results = train_ensemble(tr.features, tr.target,
                                                  cfg.bnn.train_config(seed), fp)
                    for a, m, r in zip(AXES, ens.models, results):
                        m.save(paths[f"axis_{a}"])
                        written.append(paths[f"axis_{a}"])
                        traces += [{"tier": tier, "fold": fold, "model": f"axis_{a}", **e}
                                   for e in r.loss_trace]
                logger.info("trained tier %s fold %d", tier, fold)
            trace = pd.DataFrame(traces, columns=["tier", "fold", "model", "epoch", "total",
                                                  "mse", "kl_scaled"])
            trace.to_csv(mdir / "loss_trace.csv", index=False, float_format="%.17g",
                         lineterminator="\n")
            written.append(mdir / "loss_trace.csv")
            if not np.all(np.isfinite(trace[["total", "mse", "kl_scaled"]].to_numpy())):
                failed.append(f"{tier}:finite_loss")
        write_manifest(out, cfg, "train", {"files": _files(out, written), "checks_failed": failed})
    return failed


def load_fold_models(cfg: RunConfig, out: Path, tier: str) -> dict[int, FoldModels]:
    _, models, _ = _dirs(out, cfg)
    want_joint, want_axes = _needs(cfg.methods)
    missing, loaded = [], {}
    for fold in range(cfg.folds):
        paths = _model_paths(models / tier, fold)
        need = (["joint"] if want_joint else []) + ([f"axis_{a}" for a in AXES] if want_axes else [])
        missing += [str(paths[k]) for k in need if not paths[k].exists()]
        if missing:
            continue
        loaded[fold] = FoldModels(
            BnnModel.load(paths["joint"]) if want_joint else None,
            EnsembleModel(tuple(BnnModel.load(paths[f"axis_{a}"]) for a in AXES))
            if want_axes else None)
    if missing:
        raise RunError("missing model artifacts:\n  " + "\n  ".join(missing))
    return loaded


# --------------------------------------------------------------------------- eval


def resolve_q(cfg: RunConfig, out: Path, tier: str) -> tuple[dict[str, float], list[dict]]:
    """Configured q per filter, tuning on the validation set where requested."""
    data, _, _ = _dirs(out, cfg)
    qs, rows, val = {}, [], None
    for m in FILTER_METHODS:
        q = cfg.filter.q.get(m, "tune")
        if q == "tune":
            if val is None:
                src = data / tier / "validation.csv"
                if not src.exists():
                    raise RunError(f"missing validation set {src}; run generate first")
                val = read_dataset(src)
            q, scores = tune_q(m, val, cfg.filter.q_grid, tuple(cfg.sensor), cfg.filter.kappa)
            rows += [{"tier": tier, "method": m, "q": g, "ED": e, "selected": g == q}
                     for g, e in scores.items()]
        qs[m] = float(q)
    return qs, rows


METRIC_NOTES = {
    "ED": "Euclidean position error, m",
    "MD": "mean of the squared Mahalanobis distance on the 3x3 position block (3 when consistent)",
    "Det": "determinant of the 3x3 position covariance, m^6",
    "skipped_initial_steps": SKIP_STEPS,
}


def evaluate(cfg: RunConfig, out: str | Path, force: bool = False) -> list[str]:
    """Benchmark every configured method and tier; write the report CSVs."""
    out = Path(out)
    data, _, reports = _dirs(out, cfg)
    if (reports / "summary.csv").exists() and not force:
        raise RunError(f"reports already exist in {reports}; pass --force to overwrite")
    learned = [m for m in cfg.methods if m not in FILTER_METHODS]
    with run_lock(out):
        steps, checks, tuning, chosen = [], {}, [], {}
        for tier in cfg.tiers:
            src = data / tier / "dataset.csv"
            if not src.exists():
                raise RunError(f"missing dataset {src}; run generate first")
            table = read_dataset(src)
            q, rows = resolve_q(cfg, out, tier)
            tuning += rows
            chosen[tier] = q
            models = load_fold_models(cfg, out, tier) if learned else None
            bc = BenchmarkConfig(q, cfg.filter.kappa, cfg.bnn.mc_samples,
                                 derive_seed(cfg.seed, "mc"), tuple(cfg.sensor))
            res = run_benchmark(table, [m for m in cfg.methods], models, bc)
            steps.append(res.steps)
            checks.update({f"{tier}:{k}": v for k, v in res.checks.items()})
        steps = pd.concat(steps, ignore_index=True)
        aggs = aggregate(steps, folds=list(range(cfg.folds)))
        files = emit_report(aggs, reports, steps)
        if tuning:
            pd.DataFrame(tuning, columns=["tier", "method", "q", "ED", "selected"]).to_csv(
                reports / "q_tuning.csv", index=False, float_format="%.17g", lineterminator="\n")
            files["q_tuning"] = reports / "q_tuning.csv"
        checks["reaggregation"] = reaggregation_matches(reports)
        failed = sorted(k for k, ok in checks.items() if not ok)
        write_manifest(out, cfg, "eval", {"files": _files(out, list(files.values())),
                                          "q": chosen, "checks": checks,
                                          "metrics": METRIC_NOTES,
                                          "checks_failed": failed})
    return failed


def reaggregation_matches(reports: Path, rtol: float = 1e-12) -> bool:
    summary = pd.read_csv(reports / "summary.csv")
    again = reaggregate(reports / "per_step.csv")
    summary["rate"] = summary["rate"].astype(str)
    again["rate"] = again["rate"].astype(str)
    merged = summary.merge(again, on=["method", "tier", "rate"], suffixes=("", "_re"))
    if len(merged) != len(summary):
        return False
    for k in ("ED", "MD", "Det"):
        a, b = merged[f"{k}_mean"].to_numpy(), merged[f"{k}_mean_re"].to_numpy()
        if not np.allclose(a, b, rtol=rtol, atol=0.0, equal_nan=True):
            return False
    return True


# --------------------------------------------------------------------------- timing


def timing(cfg: RunConfig, out: str | Path, force: bool = False) -> list[str]:
    """Median-of-repeats wall time of every method on one trajectory (first tier)."""
    out = Path(out)
    data, _, reports = _dirs(out, cfg)
    target = reports / "timing.csv"
    if target.exists() and not force:
        raise RunError(f"{target} exists; pass --force to overwrite")
    tier = cfg.tiers[0]
    src = data / tier / "dataset.csv"
    if not src.exists():
        raise RunError(f"missing dataset {src}; run generate first")
    with run_lock(out):
        table = read_dataset(src)
        tid, rate = cfg.timing.traj_id, float(cfg.timing.rate)
        sel = (table.traj_id == tid) & (table.rate == rate)
        if not sel.any():
            raise RunError(f"trajectory {tid} at rate {rate} is not in {src}")
        fold = int(table.fold[sel][0])
        q = read_manifest(out).get("eval", {}).get("q", {}).get(tier)
        if q is None:
            q, _ = resolve_q(cfg, out, tier)
        learned = [m for m in cfg.methods if m not in FILTER_METHODS]
        fm = load_fold_models(cfg, out, tier)[fold] if learned else None
        bc = BenchmarkConfig(q, cfg.filter.kappa, cfg.bnn.mc_samples,
                             derive_seed(cfg.seed, "mc"), tuple(cfg.sensor))
        runners = trajectory_runners(table, tid, rate, fm, bc, cfg.methods)
        records = [time_method(fn, cfg.timing.repeats, m) for m, fn in runners.items()]
        reports.mkdir(parents=True, exist_ok=True)
        df = timing_frame(records, tid, int(sel.sum()))
        df.insert(1, "tier", tier)
        df.to_csv(target, index=False, float_format="%.17g", lineterminator="\n")
        write_manifest(out, cfg, "timing", {"file": str(target.relative_to(out)),
                                            "warmup_runs_discarded": 1,
                                            "traj_id": tid, "rate": rate, "fold": fold})
    return []


def summary(out: str | Path, cfg: RunConfig) -> pd.DataFrame:
    return pd.read_csv(Path(out) / cfg.paths.reports / "summary.csv")
