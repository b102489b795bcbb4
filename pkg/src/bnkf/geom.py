"""Radar geometry: spherical <-> Cartesian maps, Jacobians, converted measurements.

Conventions used throughout the package:

- Cartesian state vectors are ordered ``(x, vx, y, vy, z, vz)``.
- Bearing is measured from +x toward +y (``atan2(dy, dx)``), in (-pi, pi].
- Elevation is measured up from the horizontal plane, in [-pi/2, pi/2].
- Spherical measurement vectors are ordered ``(range, bearing, elevation, range_rate)``.

Every function accepts arrays with arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POS_IDX = np.array([0, 2, 4])
VEL_IDX = np.array([1, 3, 5])
ANGLE_CHANNELS = (1, 2)


class GeometryError(ValueError):
    """Raised when a direction is undefined (target on top of the sensor)."""


class CovarianceError(np.linalg.LinAlgError):
    """Raised for singular or non-PSD covariance matrices.

    ``condition`` carries a condition-number estimate when one is available.
    """

    def __init__(self, message: str, condition: float | None = None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class SensorPose:
    position: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError(f"sensor position must be a finite 3-vector, got {pos!r}")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class NoiseSigmas:
    """One-sigma radar noise, SI units and radians."""

    range: float
    range_rate: float
    bearing: float
    elevation: float

    def __post_init__(self):
        for name in ("range", "range_rate", "bearing", "elevation"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise ValueError(f"noise sigma {name!r} must be strictly positive")

    @classmethod
    def from_degrees(cls, range: float, range_rate: float, bearing_deg: float,
                     elevation_deg: float) -> "NoiseSigmas":
        return cls(range, range_rate, np.deg2rad(bearing_deg), np.deg2rad(elevation_deg))

    def as_array(self) -> np.ndarray:
        """Sigmas in measurement-vector order (range, bearing, elevation, range_rate)."""
        return np.stack(np.broadcast_arrays(
            np.asarray(self.range, float), np.asarray(self.bearing, float),
            np.asarray(self.elevation, float), np.asarray(self.range_rate, float)), axis=-1)

    def measurement_covariance(self) -> np.ndarray:
        s = self.as_array()
        return s[..., :, None] ** 2 * np.eye(4)

    def scaled(self, factor: float) -> "NoiseSigmas":
        return NoiseSigmas(self.range * factor, self.range_rate * factor,
                           self.bearing * factor, self.elevation * factor)


@dataclass(frozen=True)
class SphericalMeasurement:
    range: np.ndarray
    bearing: np.ndarray
    elevation: np.ndarray
    range_rate: np.ndarray
    timestamp: np.ndarray | float = 0.0

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(
            np.asarray(self.range, float), np.asarray(self.bearing, float),
            np.asarray(self.elevation, float), np.asarray(self.range_rate, float)), axis=-1)

    @classmethod
    def from_array(cls, z: np.ndarray, timestamp=0.0) -> "SphericalMeasurement":
        z = np.asarray(z, dtype=float)
        return cls(z[..., 0], z[..., 1], z[..., 2], z[..., 3], timestamp)


@dataclass(frozen=True)
class KinematicState:
    timestamp: float
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        vel = np.asarray(self.velocity, dtype=float)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("kinematic state must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)

    def as_state_vector(self) -> np.ndarray:
        return interleave(self.position, self.velocity)


@dataclass(frozen=True)
class GaussianEstimate:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def check(self, rtol: float = 1e-9) -> None:
        """Raise ``CovarianceError`` unless the covariance is symmetric PSD up to jitter."""
        check_psd(self.covariance, rtol=rtol)


def interleave(position: np.ndarray, velocity: np.ndarray) -> np.ndarray:
    """Pack (..., 3) position and velocity into (..., 6) ``(x, vx, y, vy, z, vz)``."""
    position, velocity = np.broadcast_arrays(np.asarray(position, float),
                                             np.asarray(velocity, float))
    out = np.empty(position.shape[:-1] + (6,))
    out[..., POS_IDX] = position
    out[..., VEL_IDX] = velocity
    return out


def symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def trace(cov: np.ndarray) -> np.ndarray:
    return np.trace(cov, axis1=-2, axis2=-1)


def check_psd(cov: np.ndarray, rtol: float = 1e-9) -> None:
    cov = np.asarray(cov, dtype=float)
    scale = np.maximum(np.abs(cov).max(axis=(-2, -1)), np.finfo(float).tiny)
    asym = np.abs(cov - np.swapaxes(cov, -1, -2)).max(axis=(-2, -1)) / scale
    if np.any(asym > rtol):
        raise CovarianceError(f"covariance not symmetric (relative asymmetry {asym.max():.3e})")
    eig = np.linalg.eigvalsh(symmetrize(cov))
    if np.any(eig[..., 0] < -rtol * np.abs(trace(cov))):
        raise CovarianceError(f"covariance not PSD (min eigenvalue {eig[..., 0].min():.3e})")


def repair_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrize, add one jitter step of 1e-9*trace if needed, else raise."""
    cov = symmetrize(np.asarray(cov, dtype=float))
    n = cov.shape[-1]
    eig_min = np.linalg.eigvalsh(cov)[..., 0]
    tol = 1e-9 * np.abs(trace(cov))
    if np.all(eig_min >= -tol):
        return cov
    cov = cov + (tol[..., None, None] * np.eye(n)) * (eig_min < -tol)[..., None, None]
    if np.any(np.linalg.eigvalsh(cov)[..., 0] < -tol):
        raise CovarianceError("covariance not PSD after jitter repair")
    return cov


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    wrapped = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return wrapped if wrapped.ndim else float(wrapped)


def _sensor_offset(position: np.ndarray, sensor: SensorPose | np.ndarray) -> np.ndarray:
    s = sensor.position if isinstance(sensor, SensorPose) else np.asarray(sensor, float)
    return np.asarray(position, dtype=float) - s


def measure(position: np.ndarray, velocity: np.ndarray,
            sensor: SensorPose | np.ndarray) -> np.ndarray:
    """Noise-free radar measurement array (..., 4) of Cartesian position/velocity."""
    d = _sensor_offset(position, sensor)
    rng = np.linalg.norm(d, axis=-1)
    if np.any(rng == 0.0):
        raise GeometryError("target coincides with sensor; direction undefined")
    r_xy = np.hypot(d[..., 0], d[..., 1])
    bearing = np.arctan2(d[..., 1], d[..., 0])  # atan2(0, 0) == 0 at zenith
    bearing = np.where(bearing == -np.pi, np.pi, bearing)
    elevation = np.arctan2(d[..., 2], r_xy)
    rate = np.einsum("...i,...i->...", d, np.asarray(velocity, float)) / rng
    return np.stack([rng, bearing, elevation, rate], axis=-1)


def measure_state(x: np.ndarray, sensor: SensorPose | np.ndarray) -> np.ndarray:
    """``measure`` for interleaved (..., 6) state vectors."""
    x = np.asarray(x, dtype=float)
    return measure(x[..., POS_IDX], x[..., VEL_IDX], sensor)


def cart_to_spherical(state: KinematicState, sensor: SensorPose) -> SphericalMeasurement:
    z = measure(state.position, state.velocity, sensor)
    return SphericalMeasurement.from_array(z, state.timestamp)


def polar_to_position(rng, bearing, elevation, sensor: SensorPose | np.ndarray) -> np.ndarray:
    s = sensor.position if isinstance(sensor, SensorPose) else np.asarray(sensor, float)
    rng, bearing, elevation = np.broadcast_arrays(np.asarray(rng, float),
                                                  np.asarray(bearing, float),
                                                  np.asarray(elevation, float))
    cos_el = np.cos(elevation)
    return np.stack([rng * cos_el * np.cos(bearing),
                     rng * cos_el * np.sin(bearing),
                     rng * np.sin(elevation)], axis=-1) + s


def spherical_to_cart(meas: SphericalMeasurement, sensor: SensorPose) -> np.ndarray:
    return polar_to_position(meas.range, meas.bearing, meas.elevation, sensor)


def measurement_jacobian(state_mean: np.ndarray, sensor: SensorPose | np.ndarray) -> np.ndarray:
    """Analytic (..., 4, 6) Jacobian of ``measure_state``.

    Raises ``GeometryError`` at the sensor and on the sensor's vertical axis,
    where the bearing derivative is unbounded.
    """
    x = np.asarray(state_mean, dtype=float)
    d = _sensor_offset(x[..., POS_IDX], sensor)
    v = x[..., VEL_IDX]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    rho2 = dx * dx + dy * dy + dz * dz
    rxy2 = dx * dx + dy * dy
    if np.any(rho2 == 0.0):
        raise GeometryError("target coincides with sensor; Jacobian undefined")
    if np.any(rxy2 == 0.0):
        raise GeometryError("target on sensor vertical axis; bearing Jacobian undefined")
    rho = np.sqrt(rho2)
    rxy = np.sqrt(rxy2)
    u = d / rho[..., None]
    rdot = np.einsum("...i,...i->...", d, v) / rho

    J = np.zeros(x.shape[:-1] + (4, 6))
    J[..., 0, POS_IDX] = u
    J[..., 1, 0] = -dy / rxy2
    J[..., 1, 2] = dx / rxy2
    J[..., 2, 0] = -dx * dz / (rho2 * rxy)
    J[..., 2, 2] = -dy * dz / (rho2 * rxy)
    J[..., 2, 4] = rxy / rho2
    J[..., 3, POS_IDX] = (v - rdot[..., None] * u) / rho[..., None]
    J[..., 3, VEL_IDX] = u
    return J


def _converted_moments(z3: np.ndarray, sig3: np.ndarray, sensor) -> tuple[np.ndarray, np.ndarray]:
    # Unscented transform over (range, bearing, elevation), kappa = 0 so n + kappa = 3.
    n = 3
    offsets = np.sqrt(n) * np.concatenate([np.eye(n), -np.eye(n)])  # (6, 3)
    pts = z3[..., None, :] + offsets * sig3[..., None, :]           # (..., 6, 3)
    y = polar_to_position(pts[..., 0], pts[..., 1], pts[..., 2], sensor)
    mean = y.mean(axis=-2)
    dev = y - mean[..., None, :]
    cov = np.einsum("...ki,...kj->...ij", dev, dev) / (2 * n)
    return mean, cov


def converted_position_measurement(meas: SphericalMeasurement, sigmas: NoiseSigmas,
                                   sensor: SensorPose) -> GaussianEstimate:
    """Cartesian position pseudo-measurement with unscented-propagated covariance."""
    z = meas.as_array()
    s = np.broadcast_to(sigmas.as_array(), z.shape)
    mean, cov = _converted_moments(z[..., :3], s[..., :3], sensor)
    return GaussianEstimate(mean, repair_psd(cov))
