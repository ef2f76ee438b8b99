import numpy as np
import pytest

from viinit.errors import ImuGapError, InconsistentIntervalError, InsufficientDataError, InvalidMeasurementError
from viinit.geometry import so3_exp, so3_log
from viinit.imu import (
    ImuBias,
    ImuMeasurement,
    ImuNoiseSpec,
    ImuSeries,
    KeyframeState,
    PreintegratedImu,
    correct_first_order,
    inertial_residual,
    integrate,
    predict,
    preintegrate,
)

NOISE = ImuNoiseSpec()
G = np.array([0.0, 0.0, -9.81])


def constant_series(gyro, accel, duration=1.0, rate=200.0):
    n = int(round(duration * rate)) + 1
    return ImuSeries([ImuMeasurement(i / rate, gyro, accel) for i in range(n)])


def excited_series(rng, duration=1.0, rate=200.0):
    n = int(round(duration * rate)) + 1
    t = np.arange(n) / rate
    return ImuSeries([
        ImuMeasurement(ti, [0.3 * np.sin(2 * ti), -0.2 + 0.5 * np.cos(3 * ti), 0.4],
                       [1.0 + np.sin(ti), 0.5 * np.cos(2 * ti), 9.7 + 0.3 * np.sin(5 * ti)])
        for ti in t
    ])


def test_constant_rate_closed_form():
    w = np.array([0.1, -0.4, 0.7])
    pre = preintegrate(constant_series(w, [0, 0, 0]), 0.0, 1.0, ImuBias(), NOISE)
    assert np.allclose(pre.delta_R, so3_exp(w), atol=1e-12)
    assert pre.delta_t == pytest.approx(1.0)


def test_constant_force_closed_form():
    a = np.array([0.5, -1.0, 9.0])
    pre = preintegrate(constant_series([0, 0, 0], a, 0.5), 0.0, 0.5, ImuBias(), NOISE)
    assert np.allclose(pre.delta_V, a * 0.5, atol=1e-12)
    assert np.allclose(pre.delta_p, 0.5 * a * 0.25, atol=1e-12)


def test_force_parallel_to_spin_axis():
    # rotation about z leaves a z-aligned specific force unchanged
    pre = preintegrate(constant_series([0, 0, 1.3], [0, 0, 2.0], 1.0), 0.0, 1.0, ImuBias(), NOISE)
    assert np.allclose(pre.delta_V, [0, 0, 2.0], atol=1e-12)
    assert np.allclose(pre.delta_p, [0, 0, 1.0], atol=1e-12)


def test_bias_is_subtracted():
    b = ImuBias([0.01, 0.02, -0.03], [0.1, -0.2, 0.3])
    pre = preintegrate(constant_series(b.gyro_bias, b.accel_bias, 0.5), 0.0, 0.5, b, NOISE)
    assert np.allclose(pre.delta_R, np.eye(3), atol=1e-14)
    assert np.allclose(pre.delta_V, 0, atol=1e-14)


def test_delta_t_is_sum_of_steps(rng):
    s = excited_series(rng)
    pre = preintegrate(s, 0.0123, 0.8765, ImuBias(), NOISE)
    assert pre.delta_t == pytest.approx(0.8765 - 0.0123, abs=1e-12)
    assert sum(dt for _, _, dt in s.segments(0.0123, 0.8765)) == pytest.approx(0.8642, abs=1e-12)


def test_covariance_is_symmetric_psd(rng):
    pre = preintegrate(excited_series(rng), 0.0, 1.0, ImuBias(), NOISE)
    C = pre.covariance
    assert np.allclose(C, C.T)
    assert np.all(np.linalg.eigvalsh(C) > 0)


def _rederive(series, bias, t0=0.0, t1=0.5):
    return preintegrate(series, t0, t1, bias, NOISE)


@pytest.mark.parametrize("which", ["gyro", "accel"])
def test_bias_jacobians_match_reintegration(rng, which):
    s = excited_series(rng)
    b0 = ImuBias([0.01, -0.02, 0.005], [0.05, 0.1, -0.1])
    pre = _rederive(s, b0)
    J = pre.jacobian_wrt_gyro_bias if which == "gyro" else pre.jacobian_wrt_accel_bias
    h = 1e-6
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        bp = ImuBias(b0.gyro_bias + d, b0.accel_bias) if which == "gyro" else ImuBias(b0.gyro_bias, b0.accel_bias + d)
        bm = ImuBias(b0.gyro_bias - d, b0.accel_bias) if which == "gyro" else ImuBias(b0.gyro_bias, b0.accel_bias - d)
        p, m = _rederive(s, bp), _rederive(s, bm)
        num = np.concatenate([
            (so3_log(pre.delta_R.T @ p.delta_R) - so3_log(pre.delta_R.T @ m.delta_R)) / (2 * h),
            (p.delta_V - m.delta_V) / (2 * h),
            (p.delta_p - m.delta_p) / (2 * h),
        ])
        assert np.max(np.abs(num - J[:, k])) < 1e-5


def test_first_order_correction_is_second_order_accurate(rng):
    s = excited_series(rng)
    pre = _rederive(s, ImuBias())
    errs = []
    for eps in (1e-3, 1e-4):
        nb = ImuBias([eps, -eps, eps], [eps, eps, -eps])
        exact = _rederive(s, nb)
        dR, dV, dp = correct_first_order(pre, nb)
        errs.append(max(np.linalg.norm(so3_log(exact.delta_R.T @ dR)), np.linalg.norm(exact.delta_V - dV),
                        np.linalg.norm(exact.delta_p - dp)))
    # error shrinks quadratically with the bias step
    assert errs[1] < errs[0] / 50


def test_correction_warns_on_large_step(rng, caplog):
    pre = _rederive(excited_series(rng), ImuBias())
    correct_first_order(pre, ImuBias([0.1, 0, 0], [0, 0, 0]))
    assert "first-order correction" in caplog.text


def test_concatenation(rng):
    s = excited_series(rng)
    b = ImuBias([0.01, 0.0, -0.01], [0.1, 0.0, 0.0])
    a, c, whole = _rederive(s, b, 0.0, 0.4), _rederive(s, b, 0.4, 1.0), _rederive(s, b, 0.0, 1.0)
    assert np.allclose(a.delta_R @ c.delta_R, whole.delta_R, atol=1e-9)
    assert np.allclose(a.delta_V + a.delta_R @ c.delta_V, whole.delta_V, atol=1e-9)
    assert np.allclose(a.delta_p + a.delta_V * c.delta_t + a.delta_R @ c.delta_p, whole.delta_p, atol=1e-9)
    assert a.delta_t + c.delta_t == pytest.approx(whole.delta_t, abs=1e-12)


def test_residual_zero_on_simulated_truth(noise_free_dataset):
    ds = noise_free_dataset
    series = ImuSeries(ds.imu)
    kf = ds.keyframes
    for i in range(len(kf) - 1):
        pre = preintegrate(series, kf[i].timestamp, kf[i + 1].timestamp, ds.true_bias, NOISE)
        r = inertial_residual(pre, kf[i], kf[i + 1], ds.gravity_world)
        assert np.max(np.abs(r[:6])) < 1e-10
        assert np.max(np.abs(r[6:])) < 1e-6


def test_predict_inverts_residual(rng):
    pre = _rederive(excited_series(rng), ImuBias([0.01, 0, 0], [0, 0.1, 0]))
    s0 = KeyframeState(so3_exp(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3), 0.0)
    nb = ImuBias([0.012, 0.001, 0], [0, 0.09, 0.01])
    for bias in (None, nb):
        s1 = predict(s0, pre, G, bias)
        assert np.allclose(inertial_residual(pre, s0, s1, G, bias), 0, atol=1e-12)


def test_interval_mismatch(rng):
    pre = _rederive(excited_series(rng), ImuBias())
    s0 = KeyframeState(np.eye(3), np.zeros(3), np.zeros(3), 0.0)
    s1 = KeyframeState(np.eye(3), np.zeros(3), np.zeros(3), 0.6)
    with pytest.raises(InconsistentIntervalError):
        inertial_residual(pre, s0, s1, G)


def test_measurement_errors():
    with pytest.raises(InvalidMeasurementError):
        integrate(PreintegratedImu.start(), ImuMeasurement(0.0, [0, 0, 0], [0, 0, 0]), 0.0, NOISE)
    with pytest.raises(InvalidMeasurementError):
        ImuSeries([ImuMeasurement(0.1, [0] * 3, [0] * 3), ImuMeasurement(0.1, [0] * 3, [0] * 3)])


def test_gap_and_coverage():
    ms = [ImuMeasurement(i * 0.005, [0] * 3, [0] * 3) for i in range(100)]
    del ms[40:43]
    s = ImuSeries(ms)
    with pytest.raises(ImuGapError):
        s.check_gaps(0.0, 0.4)
    s.check_gaps(0.0, 0.15)
    with pytest.raises(InsufficientDataError):
        list(s.segments(0.0, 1.0))


def test_straddling_start_is_interpolated():
    ms = [ImuMeasurement(0.0, [0, 0, 0], [0, 0, 0]), ImuMeasurement(0.01, [0, 0, 1.0], [0, 0, 0]),
          ImuMeasurement(0.02, [0, 0, 1.0], [0, 0, 0])]
    segs = list(ImuSeries(ms).segments(0.005, 0.02))
    assert segs[0][0][2] == pytest.approx(0.5)
    assert segs[0][2] == pytest.approx(0.005)
