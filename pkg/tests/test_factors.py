import numpy as np
import pytest

from viinit.camera import Landmark, Observation
from viinit.factors import (
    INERTIAL_COV_REGULARIZER,
    FACTOR_REGISTRY,
    BiasPriorFactor,
    BodyReprojectionFactor,
    CameraReprojectionFactor,
    InertialFactor,
    InertialParams,
    bias_prior_information,
    bias_prior_residual,
    reprojection_residual,
    reprojection_sqrt_info,
    sqrt_psd,
)
from viinit.geometry import PoseSE3, so3_exp
from viinit.imu import ImuBias, KeyframeState, inertial_residual
from viinit.pipeline import camera_from_body
from viinit.simulator import EUROC_LIKE_INTRINSICS as K
from viinit.solver import jacobian_errors


@pytest.mark.parametrize("name", sorted(FACTOR_REGISTRY))
def test_jacobians_match_central_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    factor, values = FACTOR_REGISTRY[name](rng, 25)
    errs = jacobian_errors(factor, values, factor.manifolds, step=1e-7)
    assert max(float(e.max()) for e in errs) < 1e-4


def test_camera_factor_zero_at_truth(rng):
    R = np.array([so3_exp(rng.normal(scale=0.1, size=3)) for _ in range(5)])
    t = rng.normal(scale=0.1, size=(5, 3))
    Pc = np.column_stack([rng.uniform(-1, 1, 5), rng.uniform(-1, 1, 5), rng.uniform(2, 6, 5)])
    X = np.einsum("nji,nj->ni", R, Pc - t)
    obs = np.column_stack([K.fx * Pc[:, 0] / Pc[:, 2] + K.cx, K.fy * Pc[:, 1] / Pc[:, 2] + K.cy,
                           K.fx * (Pc[:, 0] - K.baseline_b) / Pc[:, 2] + K.cx])
    r, _, valid = CameraReprojectionFactor(K, obs, True).evaluate(R, t, X)
    assert valid.all() and np.allclose(r, 0, atol=1e-9)


def test_behind_camera_rows_are_masked():
    f = CameraReprojectionFactor(K, np.zeros((2, 2)), False)
    R = np.array([np.eye(3)] * 2)
    r, Js, valid = f.evaluate(R, np.zeros((2, 3)), np.array([[0, 0, -1.0], [0, 0, 3.0]]))
    assert list(valid) == [False, True]
    assert np.all(r[0] == 0) and all(np.all(J[0] == 0) for J in Js)


def test_body_factor_equals_camera_factor(rng):
    R_bc, t_bc = so3_exp(rng.normal(size=3)), rng.normal(scale=0.1, size=3)
    R_wb, p_wb = so3_exp(rng.normal(size=3)), rng.normal(size=3)
    cam = camera_from_body(R_wb, p_wb, R_bc, t_bc)
    X = cam.inverse().act(np.array([[0.2, -0.1, 4.0], [1.0, 0.5, 7.0]]))
    obs = rng.normal(scale=50, size=(2, 3)) + 300
    rb, _, _ = BodyReprojectionFactor(K, R_bc, t_bc, obs, True).evaluate(np.array([R_wb] * 2), np.array([p_wb] * 2), X)
    rc, _, _ = CameraReprojectionFactor(K, obs, True).evaluate(np.array([cam.rotation] * 2),
                                                               np.array([cam.translation] * 2), X)
    assert np.allclose(rb, rc, atol=1e-9)


def test_reprojection_residual_single(rng):
    pose = PoseSE3(so3_exp([0.01, 0.02, 0.0]), np.array([0.1, 0.0, 0.0]))
    lm = Landmark(3, [0.5, 0.2, 5.0])
    obs = Observation(0, 3, (400.0, 260.0, 390.0), 1)
    r = reprojection_residual(pose, lm, obs, K)
    rv, _, _ = CameraReprojectionFactor(K, [obs.pixel], True).evaluate(
        pose.rotation[None], pose.translation[None], lm.position_world[None])
    assert np.allclose(r, rv[0])
    W = reprojection_sqrt_info([0, 2], 3)
    assert np.allclose(W[1], np.eye(3) / 1.44)


def test_inertial_factor_matches_imu_residual(noise_free_dataset):
    from viinit.imu import ImuSeries, preintegrate

    ds = noise_free_dataset
    kf = ds.keyframes[:4]
    pre = [preintegrate(ImuSeries(ds.imu), a.timestamp, b.timestamp, ImuBias(), ds.imu_noise) for a, b in zip(kf, kf[1:])]
    f = InertialFactor(pre)
    bias = ImuBias([0.001, 0.0, -0.002], [0.01, 0.0, 0.02])
    gdir = ds.gravity_world / np.linalg.norm(ds.gravity_world)
    n = len(pre)
    r, _, _ = f.evaluate(np.array([s.R_wb for s in kf[:-1]]), np.array([s.p_wb for s in kf[:-1]]),
                         np.array([s.v_w for s in kf[:-1]]), np.array([s.R_wb for s in kf[1:]]),
                         np.array([s.p_wb for s in kf[1:]]), np.array([s.v_w for s in kf[1:]]),
                         np.tile(bias.gyro_bias, (n, 1)), np.tile(bias.accel_bias, (n, 1)), np.tile(gdir, (n, 1)),
                         jacobians=False)
    for k in range(n):
        ref = inertial_residual(pre[k], kf[k], kf[k + 1], ds.gravity_world, bias)
        assert np.allclose(r[k], ref, atol=1e-12)


def test_inertial_whitening(rng):
    factor, _ = FACTOR_REGISTRY["inertial"](rng, 3)
    W = factor.sqrt_information()
    for w, pre in zip(W, factor.preints):
        C = pre.covariance + INERTIAL_COV_REGULARIZER * np.eye(9)
        assert np.allclose(w @ C @ w.T, np.eye(9), atol=1e-9)


def test_bias_prior():
    info = bias_prior_information(0.01, 0.1)
    assert np.allclose(np.diag(info), [1e4] * 3 + [100] * 3)
    b, mean = ImuBias([0.01, 0, 0], [0, 0.1, 0]), ImuBias()
    assert np.allclose(bias_prior_residual(b, mean, info), [1, 0, 0, 0, 1, 0])
    r, _, _ = BiasPriorFactor(mean, info).evaluate(b.gyro_bias[None], b.accel_bias[None])
    assert np.allclose(r[0], [1, 0, 0, 0, 1, 0])
    S = sqrt_psd(info)
    assert np.allclose(S @ S, info)
    with pytest.raises(ValueError):
        sqrt_psd(-np.eye(6))


def test_inertial_params_normalizes():
    p = InertialParams(ImuBias(), [0, 0, -2.0])
    assert np.allclose(p.gravity_dir, [0, 0, -1])
    assert np.allclose(p.gravity, [0, 0, -9.81])


def test_keyframe_state_type(rng):
    s = KeyframeState(np.eye(3), np.zeros(3), np.zeros(3), 1.5)
    assert s.timestamp == 1.5
