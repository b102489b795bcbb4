"""Radar UAV tracking: EKF/UKF baselines, a Bayesian MLP position estimator, and
its Kalman-corrected variants, with a simulation and benchmark harness."""

from .bnn import BnnModel, TrainConfig, mc_predict, train
from .filters import ProcessModel, TrackState, run_filter
from .geom import GaussianEstimate, NoiseSigmas, SensorPose, SphericalMeasurement
from .hybrid import EnsembleModel, bnkf_estimate, bnkfe_estimate, bnn_estimate, train_ensemble

__version__ = "0.1.0"

__all__ = [
    "BnnModel", "TrainConfig", "mc_predict", "train",
    "ProcessModel", "TrackState", "run_filter",
    "GaussianEstimate", "NoiseSigmas", "SensorPose", "SphericalMeasurement",
    "EnsembleModel", "bnkf_estimate", "bnkfe_estimate", "bnn_estimate", "train_ensemble",
]
