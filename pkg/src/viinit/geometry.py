"""SO(3)/SE(3) primitives.

Rotations are plain 3x3 ``numpy`` arrays throughout the package; quaternions
only appear at file boundaries (:func:`quat_wxyz_to_matrix`,
:func:`matrix_to_quat_wxyz`). Tangent perturbations are applied on the right,
``R <- R @ so3_exp(delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from viinit.errors import InvalidArgumentError

TAYLOR_THRESHOLD = 1e-8
ORTHONORMAL_TOL = 1e-6


def skew(v):
    """Hat operator: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (3,) or not np.all(np.isfinite(omega)):
        raise InvalidArgumentError(f"so3_exp expects a finite 3-vector, got {omega!r}")
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < TAYLOR_THRESHOLD:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta**2) * (K @ K)
    )


def check_rotation(R, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidArgumentError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgumentError("matrix is not a proper rotation")
    return R


def so3_log(R, check: bool = True) -> np.ndarray:
    """Axis-angle vector of ``R`` with norm in [0, pi].

    At exactly pi the axis is ambiguous; the sign is chosen so that the
    largest-magnitude axis component is positive, so a half turn about +z
    maps to ``(0, 0, pi)``.
    """
    if check:
        R = check_rotation(R)
    w = 0.5 * vee(R - R.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < TAYLOR_THRESHOLD:
        return w * (1.0 + theta**2 / 6.0)
    if c > -0.9:
        return w * (theta / s)
    # near pi: axis from the symmetric part, largest diagonal element first
    S = 0.5 * (R + R.T) - c * np.eye(3)
    S /= 1.0 - c
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / np.sqrt(S[i, i])
    axis /= np.linalg.norm(axis)
    d = float(axis @ w)
    if abs(d) > 1e-12:
        axis = axis if d > 0 else -axis
    elif axis[int(np.argmax(np.abs(axis)))] < 0:
        axis = -axis
    return theta * axis


def right_jacobian_so3(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < TAYLOR_THRESHOLD:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    return (
        np.eye(3)
        - ((1.0 - np.cos(theta)) / theta**2) * K
        + ((theta - np.sin(theta)) / theta**3) * (K @ K)
    )


def right_jacobian_inv_so3(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < TAYLOR_THRESHOLD:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def geodesic_angle(Ra, Rb) -> float:
    """Angle in radians of ``Ra.T @ Rb``."""
    return float(np.linalg.norm(so3_log(Ra.T @ Rb, check=False)))


def project_to_so3(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def quat_wxyz_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat_wxyz(R) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def act(self, points):
        """Apply to a 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])
