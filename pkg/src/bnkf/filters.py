"""Constant-velocity EKF/UKF baselines and the shared linear position correction.

The per-step functions operate on ``TrackState``/``GaussianEstimate`` objects whose
arrays may carry leading batch dimensions, so one call can advance many
independent tracks.  ``run_filter`` drives whole measurement sequences that way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geom import (
    ANGLE_CHANNELS,
    POS_IDX,
    CovarianceError,
    GaussianEstimate,
    KinematicState,
    NoiseSigmas,
    SensorPose,
    SphericalMeasurement,
    converted_position_measurement,
    measure_state,
    measurement_jacobian,
    symmetrize,
    wrap_angle,
)

__all__ = [
    "KinematicState", "TrackState", "ProcessModel", "SigmaPointSet",
    "cv_predict", "ekf_update", "make_sigma_points", "ukf_predict", "ukf_update",
    "position_correct", "initialize_track", "run_filter", "nees",
]

STATE_DIM = 6


@dataclass(frozen=True)
class TrackState:
    estimate: GaussianEstimate
    timestamp: np.ndarray | float

    @property
    def mean(self) -> np.ndarray:
        return self.estimate.mean

    @property
    def covariance(self) -> np.ndarray:
        return self.estimate.covariance


def cv_transition(dt) -> np.ndarray:
    """(..., 6, 6) constant-velocity transition for interleaved states."""
    dt = np.asarray(dt, dtype=float)
    F = np.broadcast_to(np.eye(STATE_DIM), dt.shape + (STATE_DIM, STATE_DIM)).copy()
    F[..., 0, 1] = F[..., 2, 3] = F[..., 4, 5] = dt
    return F


def cv_process_noise(dt, q: float) -> np.ndarray:
    """Discretized continuous white-noise-acceleration covariance, intensity ``q`` per axis."""
    dt = np.asarray(dt, dtype=float)
    Q = np.zeros(dt.shape + (STATE_DIM, STATE_DIM))
    for i in range(3):
        p, v = 2 * i, 2 * i + 1
        Q[..., p, p] = q * dt**3 / 3.0
        Q[..., p, v] = Q[..., v, p] = q * dt**2 / 2.0
        Q[..., v, v] = q * dt
    return Q


@dataclass(frozen=True)
class ProcessModel:
    """Constant-velocity motion with white-noise acceleration of intensity ``accel_intensity``."""

    accel_intensity: float

    def transition(self, dt) -> np.ndarray:
        return cv_transition(dt)

    def noise(self, dt) -> np.ndarray:
        return cv_process_noise(dt, self.accel_intensity)


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray         # (..., 2n+1, n)
    mean_weights: np.ndarray   # (2n+1,)
    cov_weights: np.ndarray    # (2n+1,)
    kappa: float


def _check_dt(dt) -> np.ndarray:
    dt = np.asarray(dt, dtype=float)
    if np.any(~(dt > 0)):
        raise ValueError(f"prediction interval must be positive, got {dt.min() if dt.size else dt}")
    return dt


def _solve_gain(S: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Return ``C @ inv(S)`` for symmetric S, raising ``CovarianceError`` if singular."""
    # channels mix meters and radians; judge conditioning on the correlation matrix
    d = np.sqrt(np.abs(np.diagonal(S, axis1=-2, axis2=-1)))
    if np.any(d == 0) or not np.all(np.isfinite(S)):
        raise CovarianceError("innovation covariance is singular", float("inf"))
    cond = np.linalg.cond(S / (d[..., :, None] * d[..., None, :]))
    if not np.all(np.isfinite(cond)) or np.any(cond > 1e12):
        raise CovarianceError("innovation covariance is singular", float(np.nanmax(cond)))
    # K^T = S^-1 C^T since S is symmetric
    Kt = np.linalg.solve(S, np.swapaxes(C, -1, -2))
    return np.swapaxes(Kt, -1, -2)


def cv_predict(track: TrackState, dt, model: ProcessModel) -> TrackState:
    dt = _check_dt(dt)
    F = model.transition(dt)
    mean = np.einsum("...ij,...j->...i", F, track.mean)
    cov = F @ track.covariance @ np.swapaxes(F, -1, -2) + model.noise(dt)
    return TrackState(GaussianEstimate(mean, symmetrize(cov)), track.timestamp + dt)


def kalman_update(mean: np.ndarray, cov: np.ndarray, innovation: np.ndarray,
                  H: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linearized update given the innovation vector and measurement Jacobian."""
    PHt = cov @ np.swapaxes(H, -1, -2)
    S = H @ PHt + R
    K = _solve_gain(S, PHt)
    mean = mean + np.einsum("...ij,...j->...i", K, innovation)
    cov = (np.eye(cov.shape[-1]) - K @ H) @ cov
    return mean, symmetrize(cov)


def _wrap_channels(v: np.ndarray, channels) -> np.ndarray:
    if not channels:
        return v
    v = v.copy()
    for c in channels:
        v[..., c] = wrap_angle(v[..., c])
    return v


def ekf_update(predicted: TrackState, meas: SphericalMeasurement, sigmas: NoiseSigmas,
               sensor: SensorPose) -> TrackState:
    x = predicted.mean
    nu = _wrap_channels(meas.as_array() - measure_state(x, sensor), ANGLE_CHANNELS)
    H = measurement_jacobian(x, sensor)
    mean, cov = kalman_update(x, predicted.covariance, nu, H, sigmas.measurement_covariance())
    return TrackState(GaussianEstimate(mean, cov), meas.timestamp)


def _sqrt_factor(P: np.ndarray) -> np.ndarray:
    """Matrix square root A with A A^T = P: Cholesky, one jitter retry, then eigen fallback."""
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    flat = P.reshape((-1,) + P.shape[-2:])
    out = np.empty_like(flat)
    n = P.shape[-1]
    for k, M in enumerate(flat):
        M = symmetrize(M)
        try:
            out[k] = np.linalg.cholesky(M)
            continue
        except np.linalg.LinAlgError:
            pass
        eps = 1e-9 * abs(np.trace(M))
        try:
            out[k] = np.linalg.cholesky(M + eps * np.eye(n))
            continue
        except np.linalg.LinAlgError:
            pass
        # PSD-singular matrices (e.g. an exactly known state) have no Cholesky factor.
        w, V = np.linalg.eigh(M)
        if w[0] < -max(eps, 1e-300):
            raise CovarianceError(f"covariance not PSD (min eigenvalue {w[0]:.3e})")
        out[k] = V * np.sqrt(np.clip(w, 0.0, None))
    return out.reshape(P.shape)


def make_sigma_points(estimate: GaussianEstimate, kappa: float = 0.0) -> SigmaPointSet:
    """Julier's symmetric 2n+1 sigma points with W_0 = kappa/(n+kappa), W_i = 1/(2(n+kappa))."""
    n = estimate.dim
    if n + kappa <= 0:
        raise ValueError(f"n + kappa must be positive (n={n}, kappa={kappa})")
    A = _sqrt_factor(estimate.covariance) * np.sqrt(n + kappa)
    cols = np.swapaxes(A, -1, -2)  # rows are the columns of A
    m = estimate.mean[..., None, :]
    points = np.concatenate([m, m + cols, m - cols], axis=-2)
    w = np.full(2 * n + 1, 1.0 / (2.0 * (n + kappa)))
    w[0] = kappa / (n + kappa)
    return SigmaPointSet(points, w, w.copy(), kappa)


def unscented_moments(points: np.ndarray, wm: np.ndarray, wc: np.ndarray,
                      angle_channels=()) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and deviations of transformed sigma points, angle-aware per channel."""
    mean = np.einsum("k,...ki->...i", wm, points)
    for c in angle_channels:
        s = np.einsum("k,...k->...", wm, np.sin(points[..., c]))
        co = np.einsum("k,...k->...", wm, np.cos(points[..., c]))
        mean[..., c] = np.arctan2(s, co)
    dev = _wrap_channels(points - mean[..., None, :], angle_channels)
    return mean, dev


def ukf_predict(track: TrackState, dt, model: ProcessModel, kappa: float = 0.0) -> TrackState:
    dt = _check_dt(dt)
    sp = make_sigma_points(track.estimate, kappa)
    F = model.transition(dt)
    prop = np.einsum("...ij,...kj->...ki", F, sp.points)
    mean, dev = unscented_moments(prop, sp.mean_weights, sp.cov_weights)
    cov = np.einsum("k,...ki,...kj->...ij", sp.cov_weights, dev, dev) + model.noise(dt)
    return TrackState(GaussianEstimate(mean, symmetrize(cov)), track.timestamp + dt)


def ukf_update(predicted: TrackState, meas: SphericalMeasurement, sigmas: NoiseSigmas,
               sensor: SensorPose | None, kappa: float = 0.0,
               measurement_fn: Callable[[np.ndarray], np.ndarray] | None = None,
               angle_channels=ANGLE_CHANNELS, R: np.ndarray | None = None) -> TrackState:
    """Unscented correction.

    ``measurement_fn``/``angle_channels``/``R`` default to the radar model; overriding
    them allows a plain linear measurement for cross-checks against a linear KF.
    """
    if measurement_fn is None:
        def measurement_fn(x):
            return measure_state(x, sensor)
    z = meas.as_array() if isinstance(meas, SphericalMeasurement) else np.asarray(meas, float)
    if R is None:
        R = sigmas.measurement_covariance()
    sp = make_sigma_points(predicted.estimate, kappa)
    Z = measurement_fn(sp.points)
    z_hat, dZ = unscented_moments(Z, sp.mean_weights, sp.cov_weights, angle_channels)
    dX = sp.points - predicted.mean[..., None, :]
    Pzz = np.einsum("k,...ki,...kj->...ij", sp.cov_weights, dZ, dZ) + R
    Pxz = np.einsum("k,...ki,...kj->...ij", sp.cov_weights, dX, dZ)
    K = _solve_gain(Pzz, Pxz)
    nu = _wrap_channels(z - z_hat, angle_channels)
    mean = predicted.mean + np.einsum("...ij,...j->...i", K, nu)
    cov = predicted.covariance - K @ Pzz @ np.swapaxes(K, -1, -2)
    ts = meas.timestamp if isinstance(meas, SphericalMeasurement) else predicted.timestamp
    return TrackState(GaussianEstimate(mean, symmetrize(cov)), ts)


def position_correct(prior: GaussianEstimate, z_star: GaussianEstimate) -> GaussianEstimate:
    """Linear correction of a 3-D position prior with a position pseudo-measurement (H = I)."""
    P = prior.covariance
    K = _solve_gain(P + z_star.covariance, P)
    mean = prior.mean + np.einsum("...ij,...j->...i", K, z_star.mean - prior.mean)
    cov = (np.eye(P.shape[-1]) - K) @ P
    return GaussianEstimate(mean, symmetrize(cov))


def initialize_track(m1: SphericalMeasurement, m2: SphericalMeasurement, sigmas: NoiseSigmas,
                     sensor: SensorPose) -> TrackState:
    """Two-point differencing initializer on converted position measurements."""
    dt = np.asarray(m2.timestamp, float) - np.asarray(m1.timestamp, float)
    if np.any(~(dt > 0)):
        raise ValueError("second initialization measurement must be strictly later")
    c1 = converted_position_measurement(m1, sigmas, sensor)
    c2 = converted_position_measurement(m2, sigmas, sensor)
    batch = np.broadcast_shapes(dt.shape, c2.mean.shape[:-1])
    dt = np.broadcast_to(dt, batch)
    vel = (c2.mean - c1.mean) / dt[..., None]
    dt33 = dt[..., None, None]
    cov = np.zeros(batch + (STATE_DIM, STATE_DIM))
    P, V = POS_IDX, POS_IDX + 1
    cov[..., P[:, None], P] = c2.covariance
    cov[..., V[:, None], V] = (c1.covariance + c2.covariance) / dt33**2
    cov[..., P[:, None], V] = c2.covariance / dt33
    cov[..., V[:, None], P] = c2.covariance / dt33
    mean = np.empty(batch + (STATE_DIM,))
    mean[..., P] = c2.mean
    mean[..., V] = vel
    return TrackState(GaussianEstimate(mean, symmetrize(cov)), m2.timestamp)


def nees(truth: np.ndarray, estimate: GaussianEstimate) -> np.ndarray:
    """Normalized estimation error squared, via a Cholesky solve."""
    err = np.asarray(truth, float) - estimate.mean
    L = np.linalg.cholesky(estimate.covariance)
    y = np.linalg.solve(L, err[..., None])[..., 0]
    return np.einsum("...i,...i->...", y, y)


def _select_sigmas(sigmas: NoiseSigmas, idx) -> NoiseSigmas:
    def pick(v):
        v = np.asarray(v, float)
        return v if v.ndim == 0 else v[idx]
    return NoiseSigmas(pick(sigmas.range), pick(sigmas.range_rate),
                       pick(sigmas.bearing), pick(sigmas.elevation))


def run_filter(method: str, z: np.ndarray, t: np.ndarray, sigmas: NoiseSigmas,
               sensor: SensorPose, model: ProcessModel, kappa: float = 0.0,
               lengths: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run EKF or UKF recursively over a batch of padded measurement sequences.

    Args:
        method: ``"ekf"`` or ``"ukf"``.
        z: (B, T, 4) measurements; t: (B, T) timestamps.
        sigmas: per-sequence sigmas (scalars or (B,) arrays).
        lengths: valid length of each sequence (default T for all).

    Returns:
        means (B, T, 6) and covariances (B, T, 6, 6); step 0 is NaN, step 1 is the
        two-point initialization, later steps are posteriors.  Entries beyond a
        sequence's length are NaN.
    """
    if method not in ("ekf", "ukf"):
        raise ValueError(f"unknown filter {method!r}")
    z = np.asarray(z, float)
    t = np.asarray(t, float)
    B, T = t.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    if np.any(lengths < 2):
        raise ValueError("every sequence needs at least two measurements")
    means = np.full((B, T, STATE_DIM), np.nan)
    covs = np.full((B, T, STATE_DIM, STATE_DIM), np.nan)

    track = initialize_track(SphericalMeasurement.from_array(z[:, 0], t[:, 0]),
                             SphericalMeasurement.from_array(z[:, 1], t[:, 1]), sigmas, sensor)
    means[:, 1], covs[:, 1] = track.mean, track.covariance
    for k in range(2, T):
        active = np.nonzero(lengths > k)[0]
        if active.size == 0:
            break
        prev = TrackState(GaussianEstimate(means[active, k - 1], covs[active, k - 1]),
                          t[active, k - 1])
        dt = t[active, k] - t[active, k - 1]
        meas = SphericalMeasurement.from_array(z[active, k], t[active, k])
        sig = _select_sigmas(sigmas, active)
        if method == "ekf":
            post = ekf_update(cv_predict(prev, dt, model), meas, sig, sensor)
        else:
            post = ukf_update(ukf_predict(prev, dt, model, kappa), meas, sig, sensor, kappa)
        means[active, k], covs[active, k] = post.mean, post.covariance
    return means, covs
