import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viinit.camera import (
    CameraIntrinsics,
    Landmark,
    Observation,
    level_sigma,
    project_batch,
    project_mono,
    project_stereo,
    projection_jacobian,
    triangulate_mono,
    triangulate_stereo,
    world_to_cam,
)
from viinit.errors import BehindCameraError, DegenerateDisparityError, InvalidArgumentError
from viinit.geometry import PoseSE3, so3_exp

K = CameraIntrinsics(500.0, 400.0, 320.0, 240.0, 0.1, 640, 480)


def test_projection_hand_values():
    # u = fx X/Z + cx, v = fy Y/Z + cy, uR = fx (X - b)/Z + cx at (1, 2, 4)
    assert np.allclose(project_mono([1.0, 2.0, 4.0], K), [445.0, 440.0])
    assert np.allclose(project_stereo([1.0, 2.0, 4.0], K), [445.0, 440.0, 432.5])


def test_behind_camera():
    for Z in (0.0, -1.0, 1e-7):
        with pytest.raises(BehindCameraError):
            project_mono([0.0, 0.0, Z], K)
        with pytest.raises(BehindCameraError):
            project_stereo([0.0, 0.0, Z], K)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 40.0))
def test_stereo_triangulation_roundtrip(X, Y, Z):
    P = np.array([X, Y, Z])
    assert np.allclose(triangulate_stereo(project_stereo(P, K), K), P, rtol=1e-9, atol=1e-9)


def test_degenerate_disparity():
    with pytest.raises(DegenerateDisparityError):
        triangulate_stereo([300.0, 200.0, 300.0], K)
    with pytest.raises(DegenerateDisparityError):
        triangulate_stereo([300.0, 200.0, 300.0005], K)


def test_mono_triangulation(rng):
    X = np.array([0.3, -0.2, 5.0])
    poses = [PoseSE3(so3_exp(rng.normal(scale=0.05, size=3)), rng.normal(scale=0.3, size=3)) for _ in range(4)]
    px = [project_mono(world_to_cam(p, X), K) for p in poses]
    assert np.allclose(triangulate_mono(px, poses, K), X, atol=1e-9)


def test_projection_jacobian_numeric(rng):
    pts = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(1, 8, 20)])
    for stereo in (False, True):
        J = projection_jacobian(pts, K, stereo)
        h = 1e-6
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            num = (project_batch(pts + d, K, stereo) - project_batch(pts - d, K, stereo)) / (2 * h)
            assert np.allclose(J[:, :, k], num, rtol=1e-6, atol=1e-6)


def test_level_sigma():
    assert level_sigma(0) == 1.0
    assert level_sigma(3) == pytest.approx(1.2**3)


def test_validation():
    with pytest.raises(InvalidArgumentError):
        CameraIntrinsics(0.0, 1.0, 0, 0, 0.1, 10, 10)
    with pytest.raises(InvalidArgumentError):
        CameraIntrinsics(1.0, 1.0, 0, 0, 0.0, 10, 10)
    with pytest.raises(InvalidArgumentError):
        Landmark(1, [np.inf, 0, 0])
    assert Observation(1, 2, (1.0, 2.0, 0.5)).is_stereo
    assert not Observation(1, 2, (1.0, 2.0)).is_stereo
