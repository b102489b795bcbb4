"""Learned position estimators: standalone BNN, BNKF and the per-axis ensemble BNKFe.

All three take feature rows ``(..., 12)`` laid out as measurement at t, measurement
at t+1, then the four noise sigmas, and return a 3-D position estimate for t+1.
Each row is estimated independently; nothing is fed back between steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .bnn import COV_FLOOR, BnnModel, TrainConfig, TrainResult, mc_predict, train
from .filters import position_correct
from .geom import GaussianEstimate, NoiseSigmas, SensorPose, SphericalMeasurement, converted_position_measurement
from .simkit import derive_seed

AXES = ("x", "y", "z")
MC_SAMPLES = 100


@dataclass(frozen=True)
class EstimatorOutput:
    estimate: GaussianEstimate
    method: str
    wall_time: float
    prior: GaussianEstimate | None = None  # pre-correction moments, when a correction ran

    @property
    def mean(self) -> np.ndarray:
        return self.estimate.mean

    @property
    def covariance(self) -> np.ndarray:
        return self.estimate.covariance


@dataclass
class EnsembleModel:
    models: tuple[BnnModel, BnnModel, BnnModel]

    def __post_init__(self):
        self.models = tuple(self.models)
        if len(self.models) != 3:
            raise ValueError("an ensemble holds exactly one model per axis")
        ref = self.models[0]
        for m in self.models:
            if m.out_dim != 1:
                raise ValueError("ensemble members must have a single output")
            if m.in_dim != ref.in_dim:
                raise ValueError("ensemble members disagree on the input schema")
            if m.input_scaler is not None and ref.input_scaler is not None and not (
                    np.array_equal(m.input_scaler.mean, ref.input_scaler.mean)
                    and np.array_equal(m.input_scaler.std, ref.input_scaler.std)):
                raise ValueError("ensemble members were fit on different input data")


def _pseudo_measurement(z: np.ndarray, sigmas: NoiseSigmas | None,
                        sensor: SensorPose) -> GaussianEstimate:
    if sigmas is None:
        s = z[..., 8:12]
        sigmas = NoiseSigmas(s[..., 0], s[..., 3], s[..., 1], s[..., 2])
    return converted_position_measurement(SphericalMeasurement.from_array(z[..., 4:8]),
                                          sigmas, sensor)


def bnn_estimate(model: BnnModel, z: np.ndarray, seed=0, n: int = MC_SAMPLES) -> EstimatorOutput:
    t0 = time.perf_counter()
    pm = mc_predict(model, z, n=n, seed=seed)
    return EstimatorOutput(GaussianEstimate(pm.mean, pm.covariance), "BNN",
                           time.perf_counter() - t0)


def bnkf_estimate(model: BnnModel, z: np.ndarray, sigmas: NoiseSigmas | None,
                  sensor: SensorPose, seed=0, n: int = MC_SAMPLES) -> EstimatorOutput:
    """BNN predictive moments corrected by the converted t+1 measurement.

    ``sigmas=None`` reads the per-row sigmas from the feature vector itself.
    """
    t0 = time.perf_counter()
    z = np.asarray(z, dtype=float)
    pm = mc_predict(model, z, n=n, seed=seed)
    prior = GaussianEstimate(pm.mean, pm.covariance)
    post = position_correct(prior, _pseudo_measurement(z, sigmas, sensor))
    return EstimatorOutput(post, "BNKF", time.perf_counter() - t0, prior)


def ensemble_moments(ensemble: EnsembleModel, z: np.ndarray, seed=0,
                     n: int = MC_SAMPLES, floor: float = COV_FLOOR) -> GaussianEstimate:
    """Stacked per-axis means with a strictly diagonal covariance of per-axis variances."""
    z = np.asarray(z, dtype=float)
    means, variances = [], []
    for k, model in enumerate(ensemble.models):
        pm = mc_predict(model, z, n=n, seed=derive_seed(seed, "axis", k), floor=floor)
        means.append(pm.mean[..., 0])
        variances.append(pm.covariance[..., 0, 0])
    var = np.stack(variances, axis=-1)
    cov = np.zeros(var.shape + (3,))
    idx = np.arange(3)
    cov[..., idx, idx] = var
    return GaussianEstimate(np.stack(means, axis=-1), cov)


def bnkfe_estimate(ensemble: EnsembleModel, z: np.ndarray, sigmas: NoiseSigmas | None,
                   sensor: SensorPose, seed=0, n: int = MC_SAMPLES) -> EstimatorOutput:
    t0 = time.perf_counter()
    z = np.asarray(z, dtype=float)
    prior = ensemble_moments(ensemble, z, seed, n)
    post = position_correct(prior, _pseudo_measurement(z, sigmas, sensor))
    return EstimatorOutput(post, "BNKFe", time.perf_counter() - t0, prior)


def train_ensemble(X: np.ndarray, Y: np.ndarray, config: TrainConfig | None = None,
                   extra_fingerprint: dict | None = None) -> tuple[EnsembleModel, list[TrainResult]]:
    """One single-output model per Cartesian axis, each with its own derived seed."""
    config = config or TrainConfig()
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != 3:
        raise ValueError("ensemble targets must be (N, 3) positions")
    results = []
    for k, axis in enumerate(AXES):
        cfg = replace(config, seed=derive_seed(config.seed, "axis", k))
        results.append(train(X, Y[:, k:k + 1], cfg,
                             {**(extra_fingerprint or {}), "axis": axis, "base_seed": config.seed}))
    return EnsembleModel(tuple(r.model for r in results)), results
