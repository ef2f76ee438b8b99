import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from viinit.errors import InvalidArgumentError
from viinit.geometry import (
    PoseSE3,
    check_rotation,
    geodesic_angle,
    matrix_to_quat_wxyz,
    project_to_so3,
    quat_wxyz_to_matrix,
    right_jacobian_inv_so3,
    right_jacobian_so3,
    skew,
    so3_exp,
    so3_log,
    vee,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
small_vec3 = st.tuples(*[st.floats(-3.0, 3.0)] * 3).map(np.array)


def test_skew_vee_inverse(rng):
    v = rng.normal(size=3)
    S = skew(v)
    assert np.allclose(S, -S.T)
    assert np.allclose(vee(S), v)
    w = rng.normal(size=3)
    assert np.allclose(S @ w, np.cross(v, w))


def test_exp_matches_scipy(rng):
    for _ in range(50):
        w = rng.normal(size=3) * 2
        assert np.allclose(so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-14)


def test_exp_zero_and_tiny():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))
    w = np.array([1e-10, -2e-10, 3e-10])
    assert np.allclose(so3_exp(w), np.eye(3) + skew(w), atol=1e-19)


def test_exp_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        so3_exp([np.nan, 0, 0])
    with pytest.raises(InvalidArgumentError):
        so3_exp([1.0, 2.0])


@settings(max_examples=300, deadline=None)
@given(small_vec3)
def test_log_exp_roundtrip(w):
    theta = np.linalg.norm(w)
    if theta >= np.pi - 1e-6:
        w = w / theta * (np.pi - 1e-3)
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(small_vec3)
def test_exp_is_orthonormal(w):
    R = so3_exp(w)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-12)


@pytest.mark.parametrize("axis", [np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([1.0, 1.0, -1.0]) / np.sqrt(3)])
def test_log_near_pi(axis):
    for theta in (np.pi, np.pi - 1e-7, np.pi - 1e-3):
        w = so3_log(so3_exp(axis * theta))
        assert np.isclose(np.linalg.norm(w), theta, atol=1e-8)
        assert np.allclose(so3_exp(w), so3_exp(axis * theta), atol=1e-9)


def test_log_at_pi_sign_convention():
    w = so3_log(so3_exp(np.array([0.0, -np.pi, 0.0])))
    assert np.allclose(w, [0.0, np.pi, 0.0])


def test_check_rotation_rejects():
    with pytest.raises(InvalidArgumentError):
        check_rotation(np.eye(3) * 1.01)
    with pytest.raises(InvalidArgumentError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidArgumentError):
        so3_log(np.full((3, 3), np.nan))


def _numeric_right_jacobian(w, h=1e-6):
    J = np.zeros((3, 3))
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        # Exp(w + d) = Exp(w) Exp(Jr d)
        J[:, k] = (so3_log(so3_exp(w).T @ so3_exp(w + d)) - so3_log(so3_exp(w).T @ so3_exp(w - d))) / (2 * h)
    return J


def test_right_jacobian_matches_numeric(rng):
    for _ in range(20):
        w = rng.normal(size=3)
        assert np.allclose(right_jacobian_so3(w), _numeric_right_jacobian(w), atol=1e-8)
        assert np.allclose(right_jacobian_inv_so3(w) @ right_jacobian_so3(w), np.eye(3), atol=1e-12)
    assert np.allclose(right_jacobian_so3(np.zeros(3)), np.eye(3))
    assert np.allclose(right_jacobian_inv_so3(np.full(3, 1e-10)), np.eye(3), atol=1e-9)


def test_geodesic_angle():
    Ra = so3_exp([0.1, 0.2, 0.3])
    Rb = Ra @ so3_exp([0, 0, 0.5])
    assert np.isclose(geodesic_angle(Ra, Rb), 0.5)
    assert geodesic_angle(Ra, Ra) == pytest.approx(0.0, abs=1e-12)


def test_project_to_so3(rng):
    R = so3_exp(rng.normal(size=3))
    M = R + 1e-4 * rng.normal(size=(3, 3))
    P = project_to_so3(M)
    assert np.allclose(P.T @ P, np.eye(3), atol=1e-12)
    assert np.linalg.norm(P - R) < 1e-3


def test_quaternion_conventions(rng):
    q = np.array([np.cos(0.25), 0, 0, np.sin(0.25)])
    assert np.allclose(quat_wxyz_to_matrix(q), so3_exp([0, 0, 0.5]))
    for _ in range(20):
        R = so3_exp(rng.normal(size=3))
        q = matrix_to_quat_wxyz(R)
        assert q[0] >= 0
        assert np.isclose(np.linalg.norm(q), 1.0)
        assert np.allclose(quat_wxyz_to_matrix(q), R, atol=1e-14)


def test_pose_algebra(rng):
    A = PoseSE3(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    B = PoseSE3(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    X = rng.normal(size=(5, 3))
    assert np.allclose((A @ B).act(X), A.act(B.act(X)))
    ident = A @ A.inverse()
    assert np.allclose(ident.rotation, np.eye(3)) and np.allclose(ident.translation, 0)
    assert np.allclose(PoseSE3.from_matrix(A.matrix()).matrix(), A.matrix())
    assert np.allclose(PoseSE3.identity().act(X), X)
    with pytest.raises(ValueError):
        A.rotation[0, 0] = 2.0
