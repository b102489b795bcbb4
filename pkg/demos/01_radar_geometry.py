"""
Radar geometry and converted measurements
=========================================

A sensor at the origin sees a target as (range, bearing, elevation, range-rate).
This walk-through measures one state, checks the Jacobian against finite
differences, and compares the converted Cartesian covariance with brute-force
Monte Carlo at each noise tier.
"""

import numpy as np

from bnkf.geom import (SensorPose, SphericalMeasurement, converted_position_measurement,
                       interleave, measure_state, measurement_jacobian, spherical_to_cart)
from bnkf.simkit import tier_sigmas

sensor = SensorPose([0.0, 0.0, 0.0])

# state layout is (x, vx, y, vy, z, vz)
x = interleave([800.0, 450.0, 120.0], [6.0, -3.0, 0.5])
z = measure_state(x, sensor)
print("measurement (range m, bearing rad, elevation rad, range-rate m/s):")
print("  ", np.round(z, 6))

# %% Jacobian vs central differences
J = measurement_jacobian(x, sensor)
h = 1e-5
Jn = np.column_stack([(measure_state(x + h * e, sensor) - measure_state(x - h * e, sensor)) / (2 * h)
                      for e in np.eye(6)])
print("max |J - J_fd| =", np.abs(J - Jn).max())

# %% Back to Cartesian
p = spherical_to_cart(SphericalMeasurement.from_array(z), sensor)
print("round trip position error (m):", np.abs(p - x[[0, 2, 4]]).max())

# %% Converted covariance per tier
rng = np.random.default_rng(0)
for tier in ("low", "medium", "high"):
    sig = tier_sigmas(tier)
    est = converted_position_measurement(SphericalMeasurement.from_array(z), sig, sensor)
    draws = z[:3] + rng.standard_normal((200_000, 3)) * sig.as_array()[:3]
    pts = spherical_to_cart(SphericalMeasurement(*draws.T, 0.0), sensor)
    C = np.cov(pts, rowvar=False)
    rel = np.linalg.norm(est.covariance - C) / np.linalg.norm(C)
    print(f"{tier:>6}: sqrt(diag R) = {np.sqrt(np.diag(est.covariance)).round(3)} m, "
          f"MC mismatch {rel:.3%}")

# %% Shape of the high-tier uncertainty
# Along the line of sight the 100 m range sigma dominates; across it the 0.1 degree
# angles give only about 1.6 m at this range, so the ellipsoid is a long thin needle.
R = converted_position_measurement(SphericalMeasurement.from_array(z), tier_sigmas("high"),
                                   sensor).covariance
print("high-tier principal sigmas (m):", np.sqrt(np.linalg.eigvalsh(R)).round(2))
