import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad_vec

from bnkf.filters import (
    ProcessModel,
    TrackState,
    cv_predict,
    cv_process_noise,
    cv_transition,
    ekf_update,
    initialize_track,
    make_sigma_points,
    nees,
    position_correct,
    run_filter,
    ukf_predict,
    ukf_update,
)
from bnkf.geom import (
    POS_IDX,
    CovarianceError,
    GaussianEstimate,
    NoiseSigmas,
    SensorPose,
    SphericalMeasurement,
    interleave,
    measure_state,
    polar_to_position,
)

ORIGIN = SensorPose([0.0, 0.0, 0.0])


def random_spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T + 0.1 * np.eye(n))


def track(mean, cov, t=0.0):
    return TrackState(GaussianEstimate(np.asarray(mean, float), np.asarray(cov, float)), t)


def kf_oracle(x, P, z, H, R):
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    return x + K @ (z - H @ x), (np.eye(len(x)) - K @ H) @ P


# --------------------------------------------------------------------------- prediction


def test_cv_predict_kinematics():
    x = interleave([0, 0, 0], [1, 2, 3])
    out = cv_predict(track(x, np.eye(6)), 2.0, ProcessModel(0.5))
    np.testing.assert_allclose(out.mean[POS_IDX], [2, 4, 6])
    np.testing.assert_allclose(out.mean[POS_IDX + 1], [1, 2, 3])
    assert out.timestamp == 2.0


def test_zero_process_noise_is_pure_propagation():
    rng = np.random.default_rng(0)
    P = random_spd(rng, 6)
    F = cv_transition(0.7)
    out = cv_predict(track(np.zeros(6), P), 0.7, ProcessModel(0.0))
    np.testing.assert_allclose(out.covariance, 0.5 * (F @ P @ F.T + (F @ P @ F.T).T), rtol=0, atol=0)


@pytest.mark.parametrize("dt", [0.05, 0.3, 2.0])
def test_process_noise_matches_numerical_integration(dt):
    q = 1.7
    G = np.zeros((6, 3))
    G[[1, 3, 5], [0, 1, 2]] = 1.0

    def integrand(s):
        Fs = cv_transition(s)
        return Fs @ G @ (q * np.eye(3)) @ G.T @ Fs.T

    Q_num, _ = quad_vec(integrand, 0.0, dt, epsabs=1e-14, epsrel=1e-12)
    np.testing.assert_allclose(cv_process_noise(dt, q), Q_num, rtol=1e-9, atol=1e-15)


def test_process_model_invariants():
    m = ProcessModel(2.0)
    np.testing.assert_array_equal(m.transition(0.0), np.eye(6))
    for dt1, dt2 in [(0.1, 0.2), (0.5, 3.0)]:
        assert np.linalg.eigvalsh(m.noise(dt1)).min() >= -1e-15
        assert np.linalg.eigvalsh(m.noise(dt2) - m.noise(dt1)).min() >= -1e-12


@pytest.mark.parametrize("dt", [0.0, -1.0])
def test_nonpositive_dt_rejected(dt):
    with pytest.raises(ValueError):
        cv_predict(track(np.zeros(6), np.eye(6)), dt, ProcessModel(1.0))
    with pytest.raises(ValueError):
        ukf_predict(track(np.zeros(6), np.eye(6)), dt, ProcessModel(1.0))


# --------------------------------------------------------------------------- EKF


def test_ekf_uninformative_measurement_keeps_prior():
    rng = np.random.default_rng(1)
    x = interleave([800, 300, 120], [5, -3, 1])
    P = random_spd(rng, 6, 10.0)
    sig = NoiseSigmas.from_degrees(10, 0.1, 0.01, 0.01).scaled(1e6)
    z = SphericalMeasurement.from_array(measure_state(x, ORIGIN) + [50, 0.01, 0.01, 1])
    out = ekf_update(track(x, P), z, sig, ORIGIN)
    np.testing.assert_allclose(out.mean, x, rtol=1e-3)
    np.testing.assert_allclose(out.covariance, P, rtol=1e-3, atol=1e-3 * np.abs(P).max())


def test_ekf_zero_prior_covariance_keeps_mean():
    x = interleave([800, 300, 120], [5, -3, 1])
    z = SphericalMeasurement.from_array(measure_state(x, ORIGIN))
    out = ekf_update(track(x, np.zeros((6, 6))), z, NoiseSigmas(1, 1, 1, 1), ORIGIN)
    np.testing.assert_array_equal(out.mean, x)


def test_ekf_scalar_closed_form():
    # target on the +x axis at rest: range is x itself and all other channels decouple
    x = interleave([1000.0, 0, 0], [0, 0, 0])
    P = np.zeros((6, 6))
    P[0, 0] = 25.0
    sig = NoiseSigmas(10.0, 1.0, 1e-3, 1e-3)
    z = SphericalMeasurement(1010.0, 0.0, 0.0, 0.0)
    out = ekf_update(track(x, P), z, sig, ORIGIN)
    k = 25.0 / (25.0 + 100.0)
    assert out.mean[0] == pytest.approx(1000.0 + k * 10.0, rel=1e-12)
    assert out.covariance[0, 0] == pytest.approx((1 - k) * 25.0, rel=1e-12)


def test_singular_innovation_raises_with_condition():
    S_bad = GaussianEstimate(np.zeros(3), np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(CovarianceError) as err:
        position_correct(S_bad, GaussianEstimate(np.zeros(3), np.zeros((3, 3))))
    assert err.value.condition is not None


# --------------------------------------------------------------------------- sigma points


def test_sigma_points_identity():
    sp = make_sigma_points(GaussianEstimate(np.zeros(6), np.eye(6)), 0.0)
    assert sp.points.shape == (13, 6)
    np.testing.assert_allclose(sp.points[1:7], np.sqrt(6) * np.eye(6))
    np.testing.assert_allclose(sp.points[7:], -np.sqrt(6) * np.eye(6))
    assert sp.mean_weights[0] == 0.0
    np.testing.assert_allclose(sp.mean_weights[1:], 1 / 12)
    np.testing.assert_array_equal(sp.mean_weights, sp.cov_weights)


def test_sigma_points_scalar_julier():
    sp = make_sigma_points(GaussianEstimate(np.zeros(1), np.eye(1)), 2.0)
    assert sp.mean_weights[0] == pytest.approx(2 / 3)
    np.testing.assert_allclose(np.sort(sp.points[:, 0]), [-np.sqrt(3), 0, np.sqrt(3)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 2.5]))
def test_sigma_point_moment_reconstruction(seed, kappa):
    rng = np.random.default_rng(seed)
    mean = rng.normal(0, 100, 6)
    P = random_spd(rng, 6, rng.uniform(0.01, 100))
    sp = make_sigma_points(GaussianEstimate(mean, P), kappa)
    assert sp.mean_weights.sum() == pytest.approx(1.0, abs=1e-15)
    m = sp.mean_weights @ sp.points
    np.testing.assert_allclose(m, mean, rtol=0, atol=1e-12 * max(1.0, np.abs(mean).max()))
    dev = sp.points - mean
    C = np.einsum("k,ki,kj->ij", sp.cov_weights, dev, dev)
    np.testing.assert_allclose(C, P, rtol=0, atol=1e-9 * np.abs(P).max())


def test_sigma_points_singular_covariance():
    P = np.zeros((6, 6))
    P[0, 0] = 4.0
    sp = make_sigma_points(GaussianEstimate(np.ones(6), P), 0.0)
    dev = sp.points - 1.0
    # rank-deficient factors pick up a tiny relative jitter
    np.testing.assert_allclose(np.einsum("k,ki,kj->ij", sp.cov_weights, dev, dev), P, atol=1e-8)


def test_sigma_points_reject_non_psd():
    with pytest.raises(CovarianceError):
        make_sigma_points(GaussianEstimate(np.zeros(2), np.diag([1.0, -1.0])), 0.0)


# --------------------------------------------------------------------------- UKF


def test_ukf_predict_equals_cv_predict():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.normal(0, 100, 6)
        P = random_spd(rng, 6, 5.0)
        a = cv_predict(track(x, P), 0.4, ProcessModel(2.0))
        b = ukf_predict(track(x, P), 0.4, ProcessModel(2.0), 0.0)
        np.testing.assert_allclose(b.mean, a.mean, rtol=0, atol=1e-9 * np.abs(a.mean).max())
        np.testing.assert_allclose(b.covariance, a.covariance, rtol=0,
                                   atol=1e-9 * np.abs(a.covariance).max())


def test_ukf_zero_covariance_is_deterministic():
    x = interleave([10, 20, 30], [1, -1, 2])
    out = ukf_predict(track(x, np.zeros((6, 6))), 1.5, ProcessModel(0.0))
    np.testing.assert_allclose(out.mean, cv_transition(1.5) @ x)
    np.testing.assert_allclose(out.covariance, 0.0, atol=1e-12)


def linear_h(x):
    return x[..., POS_IDX]


def test_ukf_linear_update_equals_kf():
    rng = np.random.default_rng(5)
    H = np.zeros((3, 6))
    H[[0, 1, 2], POS_IDX] = 1.0
    for _ in range(20):
        x = rng.normal(0, 50, 6)
        P = random_spd(rng, 6, 3.0)
        R = random_spd(rng, 3, 2.0)
        z = rng.normal(0, 50, 3)
        out = ukf_update(track(x, P), z, None, None, 0.0, linear_h, (), R)
        xm, Pm = kf_oracle(x, P, z, H, R)
        np.testing.assert_allclose(out.mean, xm, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(out.covariance, Pm, rtol=1e-9, atol=1e-9)


def test_linear_sequence_ekf_ukf_and_kf_agree():
    # whole predict/update recursion on a linear problem, 1e-8 relative
    from bnkf.filters import kalman_update

    rng = np.random.default_rng(6)
    H = np.zeros((3, 6))
    H[[0, 1, 2], POS_IDX] = 1.0
    R = np.diag([4.0, 9.0, 1.0])
    m = ProcessModel(0.8)
    x0 = rng.normal(0, 10, 6)
    P0 = np.eye(6) * 10
    ekf = ukf = track(x0, P0)
    xo, Po = x0.copy(), P0.copy()
    for k in range(50):
        dt = rng.uniform(0.05, 0.5)
        z = rng.normal(0, 10, 3)
        F, Q = cv_transition(dt), cv_process_noise(dt, 0.8)
        xo, Po = F @ xo, F @ Po @ F.T + Q
        xo, Po = kf_oracle(xo, Po, z, H, R)
        e = cv_predict(ekf, dt, m)
        em, ec = kalman_update(e.mean, e.covariance, z - H @ e.mean, H, R)
        ekf = track(em, ec)
        u = ukf_predict(ukf, dt, m, 0.0)
        ukf = ukf_update(u, z, None, None, 0.0, linear_h, (), R)
    for est in (ekf, ukf):
        np.testing.assert_allclose(est.mean, xo, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(est.covariance, Po, rtol=1e-8, atol=1e-10)


def test_ukf_uninformative_measurement_keeps_prior():
    rng = np.random.default_rng(8)
    x = interleave([800, 300, 120], [5, -3, 1])
    P = random_spd(rng, 6, 10.0)
    sig = NoiseSigmas.from_degrees(10, 0.1, 0.01, 0.01).scaled(1e6)
    z = SphericalMeasurement.from_array(measure_state(x, ORIGIN) + [50, 0.01, 0.01, 1])
    out = ukf_update(track(x, P), z, sig, ORIGIN)
    np.testing.assert_allclose(out.mean, x, rtol=1e-3)
    np.testing.assert_allclose(out.covariance, P, rtol=1e-3, atol=1e-3 * np.abs(P).max())


@pytest.mark.parametrize("method", ["ekf", "ukf"])
def test_bearing_seam_innovation(method):
    p = polar_to_position(1000.0, 3.1, 0.05, ORIGIN)
    x = interleave(p, [0, 0, 0])
    P = np.diag([25.0, 1, 25.0, 1, 25.0, 1])
    z = SphericalMeasurement(1000.0, -3.1, 0.05, 0.0)
    sig = NoiseSigmas(5.0, 0.5, 0.01, 0.01)
    pred = track(x, P)
    out = ekf_update(pred, z, sig, ORIGIN) if method == "ekf" else ukf_update(pred, z, sig, ORIGIN)
    post_bearing = measure_state(out.mean, ORIGIN)[1]
    nu = np.pi - 3.1 + np.pi - 3.1
    assert nu == pytest.approx(0.083, abs=1e-3)
    step = np.mod(post_bearing - 3.1, 2 * np.pi)
    assert 0.0 < step <= nu + 1e-9


# --------------------------------------------------------------------------- position correction


def test_position_correct_infinite_r():
    prior = GaussianEstimate([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]))
    out = position_correct(prior, GaussianEstimate([9.0, 9.0, 9.0], np.eye(3) * 1e12))
    np.testing.assert_allclose(out.mean, prior.mean, rtol=1e-10)
    np.testing.assert_allclose(out.covariance, prior.covariance, rtol=1e-10)


def test_position_correct_symmetric_fusion():
    out = position_correct(GaussianEstimate([0.0, 0.0, 0.0], np.eye(3)),
                           GaussianEstimate([2.0, 4.0, -6.0], np.eye(3)))
    np.testing.assert_allclose(out.mean, [1.0, 2.0, -3.0])
    np.testing.assert_allclose(out.covariance, 0.5 * np.eye(3))


def information_fusion(m1, P1, m2, P2):
    I1, I2 = np.linalg.inv(P1), np.linalg.inv(P2)
    P = np.linalg.inv(I1 + I2)
    return P @ (I1 @ m1 + I2 @ m2), P


def test_position_correct_matches_information_form():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        P1, P2 = random_spd(rng, 3, rng.uniform(0.1, 10)), random_spd(rng, 3, rng.uniform(0.1, 10))
        m1, m2 = rng.normal(0, 10, 3), rng.normal(0, 10, 3)
        out = position_correct(GaussianEstimate(m1, P1), GaussianEstimate(m2, P2))
        mi, Pi = information_fusion(m1, P1, m2, P2)
        worst = max(worst, np.abs(out.mean - mi).max() / max(1.0, np.abs(mi).max()),
                    np.abs(out.covariance - Pi).max() / np.abs(Pi).max())
    assert worst <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_position_correct_never_inflates_volume(seed):
    rng = np.random.default_rng(seed)
    P = random_spd(rng, 3, rng.uniform(1e-3, 1e3))
    R = random_spd(rng, 3, rng.uniform(1e-3, 1e3))
    out = position_correct(GaussianEstimate(np.zeros(3), P), GaussianEstimate(np.ones(3), R))
    assert np.linalg.det(out.covariance) <= np.linalg.det(P) * (1 + 1e-9)
    out.check()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ekf", "ukf"]))
def test_update_never_inflates_position_volume(seed, method):
    rng = np.random.default_rng(seed)
    p = polar_to_position(rng.uniform(300, 5000), rng.uniform(-3, 3), rng.uniform(-0.5, 0.8), ORIGIN)
    x = interleave(p, rng.normal(0, 10, 3))
    P = random_spd(rng, 6, rng.uniform(1, 100))
    sig = NoiseSigmas.from_degrees(10, 0.1, 0.05, 0.05)
    z = SphericalMeasurement.from_array(measure_state(x, ORIGIN) + rng.normal(0, 1, 4) * sig.as_array())
    pred = track(x, P)
    out = ekf_update(pred, z, sig, ORIGIN) if method == "ekf" else ukf_update(pred, z, sig, ORIGIN)
    blk = POS_IDX[:, None], POS_IDX
    assert np.linalg.det(out.covariance[blk]) <= np.linalg.det(P[blk]) * (1 + 1e-9)
    C = out.covariance
    assert np.abs(C - C.T).max() <= 1e-9 * np.abs(C).max()
    assert np.linalg.eigvalsh(C).min() >= -1e-9 * np.trace(C)


# --------------------------------------------------------------------------- initialization


def test_initialize_noise_free_cv_recovers_state():
    p1, v = np.array([900.0, -400.0, 150.0]), np.array([7.0, 3.0, -1.0])
    p2 = p1 + 0.5 * v
    sig = NoiseSigmas(1e-9, 1e-9, 1e-12, 1e-12)
    m1 = SphericalMeasurement.from_array(measure_state(interleave(p1, v), ORIGIN), 0.0)
    m2 = SphericalMeasurement.from_array(measure_state(interleave(p2, v), ORIGIN), 0.5)
    tr = initialize_track(m1, m2, sig, ORIGIN)
    np.testing.assert_allclose(tr.mean, interleave(p2, v), atol=1e-6)
    assert tr.timestamp == 0.5


def test_initialize_velocity_covariance_differencing():
    sig = NoiseSigmas(1.0, 1.0, 1e-3, 1e-3)
    m1 = SphericalMeasurement(1000.0, 0.0, 0.0, 0.0, 0.0)
    m2 = SphericalMeasurement(1000.0, 0.0, 0.0, 0.0, 1.0)
    tr = initialize_track(m1, m2, sig, ORIGIN)
    V = POS_IDX[:, None] + 1, POS_IDX + 1
    np.testing.assert_allclose(tr.covariance[V], 2 * np.eye(3), rtol=1e-5, atol=1e-9)


def test_initialize_rejects_non_increasing_time():
    m = SphericalMeasurement(1000.0, 0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        initialize_track(m, m, NoiseSigmas(1, 1, 1, 1), ORIGIN)


def test_initialize_nees_monte_carlo():
    rng = np.random.default_rng(10)
    n = 10**4
    sig = NoiseSigmas.from_degrees(10.0, 0.1, 0.05, 0.05)
    p1 = polar_to_position(rng.uniform(500, 3000, n), rng.uniform(-3, 3, n),
                           rng.uniform(0.0, 0.6, n), ORIGIN)
    v = rng.normal(0, 10, (n, 3))
    dt = 0.1
    p2 = p1 + v * dt
    s = sig.as_array()
    z1 = measure_state(interleave(p1, v), ORIGIN) + rng.standard_normal((n, 4)) * s
    z2 = measure_state(interleave(p2, v), ORIGIN) + rng.standard_normal((n, 4)) * s
    tr = initialize_track(SphericalMeasurement.from_array(z1, 0.0),
                          SphericalMeasurement.from_array(z2, dt), sig, ORIGIN)
    assert abs(nees(interleave(p2, v), tr.estimate).mean() - 6.0) <= 0.3


# --------------------------------------------------------------------------- recursion


def simulate_cv(rng, B, T, dt, q, sig, sensor):
    F, L = cv_transition(dt), np.linalg.cholesky(cv_process_noise(dt, q))
    x = np.zeros((B, T, 6))
    x[:, 0] = interleave(rng.uniform(-1, 1, (B, 3)) * 1000 + [5000, 3000, 1000],
                         rng.standard_normal((B, 3)) * 20)
    for k in range(1, T):
        x[:, k] = x[:, k - 1] @ F.T + (L @ rng.standard_normal((B, 6, 1)))[..., 0]
    z = measure_state(x, sensor) + rng.standard_normal((B, T, 4)) * sig.as_array()
    return x, z, np.broadcast_to(np.arange(T) * dt, (B, T))


@pytest.mark.parametrize("method", ["ekf", "ukf"])
def test_matched_cv_truth_is_consistent(method):
    rng = np.random.default_rng(12)
    sig = NoiseSigmas.from_degrees(10, 0.1, 0.05, 0.05)
    q = 0.5
    x, z, t = simulate_cv(rng, 200, 60, 1.0, q, sig, ORIGIN)
    m, c = run_filter(method, z, t, sig, ORIGIN, ProcessModel(q))
    est = GaussianEstimate(m[:, 2:], c[:, 2:])
    assert est.mean.shape[0] * est.mean.shape[1] >= 10**4
    assert 5.5 <= nees(x[:, 2:], est).mean() <= 6.5
    pos = GaussianEstimate(est.mean[..., POS_IDX], est.covariance[..., POS_IDX[:, None], POS_IDX])
    assert 2.7 <= nees(x[:, 2:, POS_IDX], pos).mean() <= 3.3


def test_run_filter_batch_equals_loop():
    rng = np.random.default_rng(13)
    sig = NoiseSigmas.from_degrees(10, 0.1, 0.05, 0.05)
    x, z, t = simulate_cv(rng, 3, 12, 0.5, 1.0, sig, ORIGIN)
    lengths = np.array([12, 7, 4])
    for method in ("ekf", "ukf"):
        m, c = run_filter(method, z, t, sig, ORIGIN, ProcessModel(1.0), lengths=lengths)
        for b in range(3):
            L = lengths[b]
            mb, cb = run_filter(method, z[b:b + 1, :L], t[b:b + 1, :L], sig, ORIGIN,
                                ProcessModel(1.0))
            np.testing.assert_allclose(m[b, 1:L], mb[0, 1:], rtol=1e-12, atol=1e-9)
            np.testing.assert_allclose(c[b, 1:L], cb[0, 1:], rtol=1e-12, atol=1e-9)
            assert np.all(np.isnan(m[b, L:]))
        assert np.all(np.isnan(m[:, 0]))
