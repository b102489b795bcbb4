import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnkf.geom import (
    CovarianceError,
    GeometryError,
    KinematicState,
    NoiseSigmas,
    SensorPose,
    SphericalMeasurement,
    cart_to_spherical,
    check_psd,
    converted_position_measurement,
    interleave,
    measure,
    measure_state,
    measurement_jacobian,
    repair_psd,
    spherical_to_cart,
    wrap_angle,
)
from bnkf.simkit import tier_sigmas

ORIGIN = SensorPose([0.0, 0.0, 0.0])


def random_states(rng, n, lo=100.0, hi=5000.0):
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    pos = direction * rng.uniform(lo, hi, (n, 1))
    vel = rng.uniform(-30, 30, (n, 3))
    return interleave(pos, vel)


def fd_jacobian(x, sensor, h=1e-5):
    J = np.zeros((4, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        d = measure_state(x + e, sensor) - measure_state(x - e, sensor)
        d[1] = wrap_angle(d[1])
        J[:, j] = d / (2 * h)
    return J


def test_axis_aligned_measurements():
    z = cart_to_spherical(KinematicState(0.0, [100, 0, 0], [10, 0, 0]), ORIGIN)
    assert (z.range, z.bearing, z.elevation, z.range_rate) == (100, 0, 0, 10)
    z = cart_to_spherical(KinematicState(0.0, [0, 100, 0], [0, 0, 5]), ORIGIN)
    assert z.range == 100
    assert z.bearing == pytest.approx(np.pi / 2)
    assert z.elevation == 0
    assert z.range_rate == 0


def test_measure_matches_direct_formulas():
    rng = np.random.default_rng(3)
    sensor = SensorPose(rng.uniform(-50, 50, 3))
    for x in random_states(rng, 200):
        p, v = x[[0, 2, 4]], x[[1, 3, 5]]
        dx, dy, dz = p - sensor.position
        r = (dx * dx + dy * dy + dz * dz) ** 0.5
        expected = [r, np.arctan2(dy, dx), np.arctan2(dz, (dx * dx + dy * dy) ** 0.5),
                    (dx * v[0] + dy * v[1] + dz * v[2]) / r]
        np.testing.assert_allclose(measure(p, v, sensor), expected, rtol=1e-13, atol=1e-12)


def test_coincident_target_raises():
    with pytest.raises(GeometryError):
        measure([1.0, 2.0, 3.0], [0, 0, 0], SensorPose([1.0, 2.0, 3.0]))
    with pytest.raises(GeometryError):
        measurement_jacobian(np.zeros(6), ORIGIN)


def test_zenith_bearing_is_zero():
    z = measure([0.0, 0.0, 250.0], [1.0, 0.0, 0.0], ORIGIN)
    assert z[1] == 0.0
    assert z[2] == pytest.approx(np.pi / 2)
    assert measure([0.0, 0.0, -5.0], [0, 0, 0], ORIGIN)[2] == pytest.approx(-np.pi / 2)


def test_bearing_negative_pi_maps_to_pi():
    z = measure([-100.0, -0.0, 0.0], [0, 0, 0], ORIGIN)
    assert z[1] == np.pi


def test_spherical_to_cart_examples():
    np.testing.assert_allclose(
        spherical_to_cart(SphericalMeasurement(100.0, 0.0, 0.0, 0.0), ORIGIN), [100, 0, 0])
    np.testing.assert_allclose(
        spherical_to_cart(SphericalMeasurement(50.0, np.pi, 0.0, 0.0), SensorPose([10, 0, 0])),
        [-40, 0, 0], atol=1e-12)


def test_round_trip_random_states():
    rng = np.random.default_rng(7)
    sensor = SensorPose([12.0, -4.0, 3.0])
    x = random_states(rng, 1000, 1.0, 1e5)
    p = x[:, [0, 2, 4]] + sensor.position
    z = measure(p, x[:, [1, 3, 5]], sensor)
    back = spherical_to_cart(SphericalMeasurement.from_array(z), sensor)
    assert np.abs(back - p).max() <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 1e5), st.floats(-np.pi, np.pi), st.floats(-1.5, 1.5))
def test_round_trip_property(r, th, ph):
    p = spherical_to_cart(SphericalMeasurement(r, th, ph, 0.0), ORIGIN)
    again = spherical_to_cart(SphericalMeasurement.from_array(measure(p, np.zeros(3), ORIGIN)),
                              ORIGIN)
    assert np.abs(again - p).max() <= 1e-9


def test_jacobian_unit_line_of_sight():
    J = measurement_jacobian(np.array([100.0, 0, 0, 0, 0, 0]), ORIGIN)
    assert J[0, 0] == 1.0
    assert J[0, 2] == 0.0


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(11)
    sensor = SensorPose([5.0, -7.0, 1.0])
    worst = 0.0
    for x in random_states(rng, 100):
        J = measurement_jacobian(x, sensor)
        Jn = fd_jacobian(x, sensor)
        row_scale = np.abs(J).max(axis=1, keepdims=True)
        worst = max(worst, float((np.abs(J - Jn) / row_scale).max()))
    assert worst <= 1e-5


def test_jacobian_batch_matches_single():
    x = random_states(np.random.default_rng(2), 5)
    Jb = measurement_jacobian(x, ORIGIN)
    for k in range(5):
        np.testing.assert_allclose(Jb[k], measurement_jacobian(x[k], ORIGIN), rtol=1e-14, atol=1e-18)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=6, max_size=6))
def test_bearing_ignores_velocity(xs):
    x = np.array(xs)
    if np.hypot(x[0], x[2]) < 1e-3:
        return
    J = measurement_jacobian(x, ORIGIN)
    assert np.all(J[1, [1, 3, 5]] == 0.0)
    assert np.all(J[2, [1, 3, 5]] == 0.0)


def test_wrap_angle_examples():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)
    assert wrap_angle(-np.pi) == np.pi
    assert wrap_angle(np.pi) == np.pi


@given(st.floats(-1e6, 1e6))
def test_wrap_angle_interval_and_congruence(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    k = (a - w) / (2 * np.pi)
    assert abs(k - round(k)) < 1e-6


def test_converted_range_only_limit():
    sig = NoiseSigmas(5.0, 0.1, 1e-12, 1e-12)
    R = converted_position_measurement(SphericalMeasurement(1000.0, 0.0, 0.0, 0.0), sig,
                                       ORIGIN).covariance
    assert R[0, 0] == pytest.approx(25.0, rel=0.01)
    assert abs(R[1, 1]) < 1e-6 and abs(R[2, 2]) < 1e-6


def test_converted_low_tier_cross_range():
    sig = tier_sigmas("low")
    R = converted_position_measurement(SphericalMeasurement(1000.0, 0.0, 0.0, 0.0), sig,
                                       ORIGIN).covariance
    expected = 1000.0 * np.deg2rad(0.001)
    assert np.sqrt(R[1, 1]) == pytest.approx(expected, rel=1e-3)
    assert np.sqrt(R[2, 2]) == pytest.approx(expected, rel=1e-3)
    assert expected == pytest.approx(0.0175, abs=5e-5)


@pytest.mark.parametrize("tier", ["low", "medium", "high"])
def test_converted_covariance_monte_carlo(tier):
    rng = np.random.default_rng(17)
    sig = tier_sigmas(tier)
    z = np.array([1000.0, 0.6, 0.2, 0.0])
    R = converted_position_measurement(SphericalMeasurement.from_array(z), sig, ORIGIN).covariance
    s = sig.as_array()
    draws = z[:3] + rng.standard_normal((10**6, 3)) * s[:3]
    pts = spherical_to_cart(SphericalMeasurement(draws[:, 0], draws[:, 1], draws[:, 2], 0.0),
                            ORIGIN)
    C = np.cov(pts, rowvar=False)
    assert np.linalg.norm(R - C) / np.linalg.norm(C) <= 0.05


@settings(max_examples=100, deadline=None)
@given(st.floats(10.0, 1e5), st.floats(-np.pi, np.pi), st.floats(-1.4, 1.4),
       st.sampled_from(["low", "medium", "high"]))
def test_converted_covariance_is_psd(r, th, ph, tier):
    est = converted_position_measurement(SphericalMeasurement(r, th, ph, 0.0), tier_sigmas(tier),
                                         ORIGIN)
    est.check()


def test_repair_psd_jitters_once_then_raises():
    near = np.diag([1.0, 1.0, -1e-10])
    fixed = repair_psd(near)
    check_psd(fixed)
    with pytest.raises(CovarianceError):
        repair_psd(np.diag([1.0, 1.0, -0.5]))


def test_noise_sigmas_reject_nonpositive():
    with pytest.raises(ValueError):
        NoiseSigmas(0.0, 1.0, 1.0, 1.0)
