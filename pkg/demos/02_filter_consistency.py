"""
EKF and UKF on matched constant-velocity truth
==============================================

When the truth really is constant velocity with white acceleration of the same
intensity the filter assumes, the normalized errors should average to the
dimension: 6 for the full state, 3 for position.  A mismatched q shows up at once.
"""

import numpy as np

from bnkf.filters import ProcessModel, cv_process_noise, cv_transition, nees, run_filter
from bnkf.geom import POS_IDX, GaussianEstimate, NoiseSigmas, SensorPose, interleave, measure_state

rng = np.random.default_rng(1)
sensor = SensorPose([0.0, 0.0, 0.0])
sigmas = NoiseSigmas.from_degrees(10.0, 0.1, 0.05, 0.05)
B, T, dt, q = 200, 60, 1.0, 0.5

F, L = cv_transition(dt), np.linalg.cholesky(cv_process_noise(dt, q))
truth = np.zeros((B, T, 6))
truth[:, 0] = interleave(rng.uniform(4000, 6000, (B, 3)), rng.normal(0, 20, (B, 3)))
for k in range(1, T):
    truth[:, k] = truth[:, k - 1] @ F.T + (L @ rng.standard_normal((B, 6, 1)))[..., 0]
z = measure_state(truth, sensor) + rng.standard_normal((B, T, 4)) * sigmas.as_array()
t = np.broadcast_to(np.arange(T) * dt, (B, T))

for q_assumed in (q, 20 * q, q / 20):
    print(f"filter q = {q_assumed:g} (truth {q:g})")
    for method in ("ekf", "ukf"):
        m, c = run_filter(method, z, t, sigmas, sensor, ProcessModel(q_assumed))
        est = GaussianEstimate(m[:, 2:], c[:, 2:])
        pos = GaussianEstimate(est.mean[..., POS_IDX], est.covariance[..., POS_IDX[:, None], POS_IDX])
        err = np.linalg.norm(est.mean[..., POS_IDX] - truth[:, 2:, POS_IDX], axis=-1)
        print(f"  {method.upper()}: NEES {nees(truth[:, 2:], est).mean():6.2f}   "
              f"position D2 {nees(truth[:, 2:, POS_IDX], pos).mean():6.2f}   "
              f"mean error {err.mean():6.2f} m")
