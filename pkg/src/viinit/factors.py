"""Residual blocks with analytic Jacobians.

Every factor exposes ``dim``, ``manifolds`` (one per parameter slot) and
``evaluate(*slot_values, jacobians=True) -> (r, [J...], valid)`` over a
leading batch axis. Jacobians are taken with respect to the right-hand
tangent perturbation of each slot's manifold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from viinit.camera import (
    DEPTH_EPSILON,
    CameraIntrinsics,
    level_sigma,
    project_batch,
    projection_jacobian,
)
from viinit.geometry import right_jacobian_inv_so3, right_jacobian_so3, skew, so3_exp, so3_log
from viinit.imu import GRAVITY_MAGNITUDE, ImuBias, PreintegratedImu
from viinit.solver import EUCLIDEAN3, SO3, UNIT_VECTOR, UnitVectorManifold

INERTIAL_COV_REGULARIZER = 1e-12


@dataclass(frozen=True)
class InertialParams:
    bias: ImuBias
    gravity_dir: np.ndarray
    gravity_mag: float = GRAVITY_MAGNITUDE

    def __post_init__(self):
        d = np.array(self.gravity_dir, dtype=float).reshape(3)
        object.__setattr__(self, "gravity_dir", d / np.linalg.norm(d))

    @property
    def gravity(self) -> np.ndarray:
        return self.gravity_mag * self.gravity_dir


def _skew_batch(v):
    n = len(v)
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


class CameraReprojectionFactor:
    """``x - pi(R_cw X + t_cw)`` over slots (R_cw, t_cw, X)."""

    manifolds = (SO3, EUCLIDEAN3, EUCLIDEAN3)

    def __init__(self, K: CameraIntrinsics, observed, stereo: bool):
        self.K = K
        self.observed = np.asarray(observed, dtype=float)
        self.stereo = stereo
        self.dim = 3 if stereo else 2

    def evaluate(self, R_cw, t_cw, X, jacobians=True):
        Pc = np.einsum("nij,nj->ni", R_cw, X) + t_cw
        valid = Pc[:, 2] > DEPTH_EPSILON
        safe = np.where(valid[:, None], Pc, np.array([0.0, 0.0, 1.0]))
        r = self.observed - project_batch(safe, self.K, self.stereo)
        r[~valid] = 0.0
        if not jacobians:
            return r, None, valid
        Jp = projection_jacobian(safe, self.K, self.stereo)
        J_R = np.einsum("nij,njk,nkl->nil", Jp, R_cw, _skew_batch(X))
        J_t = -Jp
        J_X = -np.einsum("nij,njk->nik", Jp, R_cw)
        for J in (J_R, J_t, J_X):
            J[~valid] = 0.0
        return r, [J_R, J_t, J_X], valid


class BodyReprojectionFactor:
    """Reprojection through body pose and fixed extrinsics; slots (R_wb, p_wb, X).

    ``R_bc``/``t_bc`` map camera coordinates into the body frame.
    """

    manifolds = (SO3, EUCLIDEAN3, EUCLIDEAN3)

    def __init__(self, K: CameraIntrinsics, R_bc, t_bc, observed, stereo: bool):
        self.K = K
        self.R_bc = np.asarray(R_bc, dtype=float)
        self.t_bc = np.asarray(t_bc, dtype=float)
        self.observed = np.asarray(observed, dtype=float)
        self.stereo = stereo
        self.dim = 3 if stereo else 2

    def evaluate(self, R_wb, p_wb, X, jacobians=True):
        q = np.einsum("nji,nj->ni", R_wb, X - p_wb)
        Pc = (q - self.t_bc) @ self.R_bc
        valid = Pc[:, 2] > DEPTH_EPSILON
        safe = np.where(valid[:, None], Pc, np.array([0.0, 0.0, 1.0]))
        r = self.observed - project_batch(safe, self.K, self.stereo)
        r[~valid] = 0.0
        if not jacobians:
            return r, None, valid
        Jp = projection_jacobian(safe, self.K, self.stereo)
        JpRcb = Jp @ self.R_bc.T
        J_R = -np.einsum("nij,njk->nik", JpRcb, _skew_batch(q))
        J_X = -np.einsum("nij,nkj->nik", JpRcb, R_wb)
        J_p = -J_X
        for J in (J_R, J_p, J_X):
            J[~valid] = 0.0
        return r, [J_R, J_p, J_X], valid


class InertialFactor:
    """Preintegrated IMU residual between consecutive keyframes.

    Slots: (R_i, p_i, v_i, R_j, p_j, v_j, gyro_bias, accel_bias, gravity_dir).
    ``preints[n]`` describes residual row ``n``; deltas are corrected to the
    current bias estimate to first order.
    """

    manifolds = (SO3, EUCLIDEAN3, EUCLIDEAN3, SO3, EUCLIDEAN3, EUCLIDEAN3, EUCLIDEAN3, EUCLIDEAN3, UNIT_VECTOR)
    dim = 9

    def __init__(self, preints, gravity_mag: float = GRAVITY_MAGNITUDE):
        self.preints = list(preints)
        self.gravity_mag = gravity_mag

    def sqrt_information(self) -> np.ndarray:
        out = []
        for pre in self.preints:
            info = np.linalg.inv(pre.covariance + INERTIAL_COV_REGULARIZER * np.eye(9))
            info = 0.5 * (info + info.T)
            out.append(np.linalg.cholesky(info).T)
        return np.array(out)

    def evaluate(self, R_i, p_i, v_i, R_j, p_j, v_j, bg, ba, gdir, jacobians=True):
        n = len(self.preints)
        r = np.zeros((n, 9))
        Js = [np.zeros((n, 9, m.dim)) for m in self.manifolds] if jacobians else None
        for k, pre in enumerate(self.preints):
            lin = pre.bias_linearization_point
            dbg = bg[k] - lin.gyro_bias
            dba = ba[k] - lin.accel_bias
            phi = pre.J_R_bg @ dbg
            dR = pre.delta_R @ so3_exp(phi)
            dV = pre.delta_V + pre.J_V_bg @ dbg + pre.J_V_ba @ dba
            dP = pre.delta_p + pre.J_P_bg @ dbg + pre.J_P_ba @ dba
            dt = pre.delta_t
            g = self.gravity_mag * gdir[k]
            RiT = R_i[k].T
            E = dR.T @ RiT @ R_j[k]
            rR = so3_log(E, check=False)
            wv = v_j[k] - v_i[k] - g * dt
            wp = p_j[k] - p_i[k] - v_i[k] * dt - 0.5 * g * dt * dt
            r[k, 0:3] = rR
            r[k, 3:6] = RiT @ wv - dV
            r[k, 6:9] = RiT @ wp - dP
            if not jacobians:
                continue
            Jinv = right_jacobian_inv_so3(rR)
            J_Ri, J_pi, J_vi, J_Rj, J_pj, J_vj, J_bg, J_ba, J_g = (J[k] for J in Js)
            J_Ri[0:3] = -Jinv @ R_j[k].T @ R_i[k]
            J_Ri[3:6] = skew(RiT @ wv)
            J_Ri[6:9] = skew(RiT @ wp)
            J_Rj[0:3] = Jinv
            J_vi[3:6] = -RiT
            J_vi[6:9] = -RiT * dt
            J_vj[3:6] = RiT
            J_pi[6:9] = -RiT
            J_pj[6:9] = RiT
            J_bg[0:3] = -Jinv @ E.T @ right_jacobian_so3(phi) @ pre.J_R_bg
            J_bg[3:6] = -pre.J_V_bg
            J_bg[6:9] = -pre.J_P_bg
            J_ba[3:6] = -pre.J_V_ba
            J_ba[6:9] = -pre.J_P_ba
            dg = self.gravity_mag * UnitVectorManifold.jacobian(gdir[k])
            J_g[3:6] = -RiT @ dg * dt
            J_g[6:9] = -0.5 * RiT @ dg * dt * dt
        return r, Js, None


class BiasPriorFactor:
    """``info^(1/2) (b - mean)`` over slots (gyro_bias, accel_bias)."""

    manifolds = (EUCLIDEAN3, EUCLIDEAN3)
    dim = 6

    def __init__(self, prior_mean: ImuBias, prior_info):
        self.mean = prior_mean.vector()
        self.sqrt_info = sqrt_psd(prior_info)

    def evaluate(self, bg, ba, jacobians=True):
        b = np.concatenate([bg, ba], axis=1)
        r = (b - self.mean) @ self.sqrt_info.T
        if not jacobians:
            return r, None, None
        n = len(b)
        J_bg = np.broadcast_to(self.sqrt_info[:, :3], (n, 6, 3)).copy()
        J_ba = np.broadcast_to(self.sqrt_info[:, 3:], (n, 6, 3)).copy()
        return r, [J_bg, J_ba], None


def sqrt_psd(M) -> np.ndarray:
    """Symmetric square root of a PSD matrix."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise ValueError("prior information matrix is not positive semi-definite")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def bias_prior_residual(bias: ImuBias, prior_mean: ImuBias, prior_info) -> np.ndarray:
    return sqrt_psd(prior_info) @ (bias.vector() - prior_mean.vector())


def bias_prior_information(sigma_gyro: float = 0.01, sigma_accel: float = 0.1) -> np.ndarray:
    return np.diag([sigma_gyro**-2] * 3 + [sigma_accel**-2] * 3)


def reprojection_residual(pose_cw, landmark, obs, K: CameraIntrinsics) -> np.ndarray:
    """Unweighted ``observed - projected`` for one observation (2 or 3 rows)."""
    from viinit.camera import project_mono, project_stereo, world_to_cam

    Pc = world_to_cam(pose_cw, landmark.position_world)
    proj = project_stereo(Pc, K) if obs.is_stereo else project_mono(Pc, K)
    return np.asarray(obs.pixel, dtype=float) - proj


def reprojection_sqrt_info(levels, dim: int, scale_factor: float = 1.2) -> np.ndarray:
    s = 1.0 / np.array([level_sigma(lv, scale_factor) for lv in levels])
    return s[:, None, None] * np.eye(dim)[None]


# --------------------------------------------------------------------------- registry


def _random_rotations(rng, n):
    return np.array([so3_exp(rng.normal(size=3) * 1.0) for _ in range(n)])


def _sample_camera_reprojection(rng, n, stereo):
    K = CameraIntrinsics(450.0, 440.0, 370.0, 245.0, 0.11, 752, 480)
    R = _random_rotations(rng, n)
    Pc = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(1.5, 10, n)])
    t = rng.normal(size=(n, 3))
    X = np.einsum("nji,nj->ni", R, Pc - t)
    obs = project_batch(Pc, K, stereo) + rng.normal(scale=2.0, size=(n, 3 if stereo else 2))
    return CameraReprojectionFactor(K, obs, stereo), [R, t, X]


def _sample_body_reprojection(rng, n, stereo):
    K = CameraIntrinsics(450.0, 440.0, 370.0, 245.0, 0.11, 752, 480)
    R_bc = so3_exp(rng.normal(size=3))
    t_bc = rng.normal(scale=0.1, size=3)
    R = _random_rotations(rng, n)
    p = rng.normal(size=(n, 3))
    Pc = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(1.5, 10, n)])
    X = np.einsum("nij,nj->ni", R, Pc @ R_bc.T + t_bc) + p
    obs = project_batch(Pc, K, stereo) + rng.normal(scale=2.0, size=(n, 3 if stereo else 2))
    return BodyReprojectionFactor(K, R_bc, t_bc, obs, stereo), [R, p, X]


def _sample_inertial(rng, n):
    from viinit.imu import ImuMeasurement, ImuNoiseSpec, integrate

    noise = ImuNoiseSpec()
    preints = []
    for _ in range(n):
        lin = ImuBias(rng.normal(scale=0.01, size=3), rng.normal(scale=0.1, size=3))
        pre = PreintegratedImu.start(lin)
        w = rng.normal(scale=1.0, size=3)
        a = rng.normal(scale=2.0, size=3) + np.array([0, 0, 9.81])
        for _ in range(10):
            pre = integrate(pre, ImuMeasurement(0.0, w + rng.normal(scale=0.1, size=3), a), 0.01, noise)
        preints.append(pre)
    gdir = rng.normal(size=(n, 3))
    gdir /= np.linalg.norm(gdir, axis=1, keepdims=True)
    vals = [
        _random_rotations(rng, n), rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
        _random_rotations(rng, n), rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
        np.array([p.bias_linearization_point.gyro_bias for p in preints]) + rng.normal(scale=0.01, size=(n, 3)),
        np.array([p.bias_linearization_point.accel_bias for p in preints]) + rng.normal(scale=0.1, size=(n, 3)),
        gdir,
    ]
    # keep rotation residuals away from the log singularity at pi
    for k, pre in enumerate(preints):
        vals[3][k] = vals[0][k] @ pre.delta_R @ so3_exp(rng.normal(scale=0.3, size=3))
    return InertialFactor(preints), vals


def _sample_bias_prior(rng, n):
    A = rng.normal(size=(6, 6))
    info = A @ A.T + 0.1 * np.eye(6)
    mean = ImuBias(rng.normal(scale=0.01, size=3), rng.normal(scale=0.1, size=3))
    return BiasPriorFactor(mean, info), [rng.normal(scale=0.02, size=(n, 3)), rng.normal(scale=0.2, size=(n, 3))]


FACTOR_REGISTRY = {
    "camera_reprojection_mono": lambda rng, n: _sample_camera_reprojection(rng, n, False),
    "camera_reprojection_stereo": lambda rng, n: _sample_camera_reprojection(rng, n, True),
    "body_reprojection_mono": lambda rng, n: _sample_body_reprojection(rng, n, False),
    "body_reprojection_stereo": lambda rng, n: _sample_body_reprojection(rng, n, True),
    "inertial": _sample_inertial,
    "bias_prior": _sample_bias_prior,
}
