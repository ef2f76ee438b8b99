"""On-manifold IMU preintegration between keyframes.

Measurements are held constant over ``[t_i, t_{i+1})`` (zero-order hold).
The tangent ordering of every 9-vector and 9x9 matrix here is
(rotation, velocity, position).
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from viinit.errors import (
    ImuGapError,
    InconsistentIntervalError,
    InsufficientDataError,
    InvalidMeasurementError,
)
from viinit.geometry import right_jacobian_so3, skew, so3_exp, so3_log

log = logging.getLogger(__name__)

GRAVITY_MAGNITUDE = 9.81
TIME_EPS = 1e-9
INTERVAL_TOL = 1e-4


@dataclass(frozen=True)
class ImuMeasurement:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoiseSpec:
    gyro_noise_density: float = 1.6968e-4
    accel_noise_density: float = 2.0e-3
    gyro_bias_walk: float = 1.9393e-5
    accel_bias_walk: float = 3.0e-3

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def scaled(self, factor: float) -> "ImuNoiseSpec":
        return ImuNoiseSpec(
            self.gyro_noise_density * factor,
            self.accel_noise_density * factor,
            self.gyro_bias_walk * factor,
            self.accel_bias_walk * factor,
        )


@dataclass(frozen=True)
class ImuBias:
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "gyro_bias", np.array(self.gyro_bias, dtype=float).reshape(3))
        object.__setattr__(self, "accel_bias", np.array(self.accel_bias, dtype=float).reshape(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro_bias, self.accel_bias])


@dataclass(frozen=True)
class KeyframeState:
    """Body state at a keyframe: ``R_wb`` maps body to world."""

    R_wb: np.ndarray
    p_wb: np.ndarray
    v_w: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class PreintegratedImu:
    delta_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    delta_V: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_t: float = 0.0
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    jacobian_wrt_gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros((9, 3)))
    jacobian_wrt_accel_bias: np.ndarray = field(default_factory=lambda: np.zeros((9, 3)))
    bias_linearization_point: ImuBias = field(default_factory=ImuBias)

    @classmethod
    def start(cls, bias: ImuBias | None = None) -> "PreintegratedImu":
        return cls(bias_linearization_point=bias if bias is not None else ImuBias())

    # row slices of the 9x3 bias Jacobians
    @property
    def J_R_bg(self):
        return self.jacobian_wrt_gyro_bias[0:3]

    @property
    def J_V_bg(self):
        return self.jacobian_wrt_gyro_bias[3:6]

    @property
    def J_P_bg(self):
        return self.jacobian_wrt_gyro_bias[6:9]

    @property
    def J_V_ba(self):
        return self.jacobian_wrt_accel_bias[3:6]

    @property
    def J_P_ba(self):
        return self.jacobian_wrt_accel_bias[6:9]


def integrate(preint: PreintegratedImu, m: ImuMeasurement, dt: float, noise: ImuNoiseSpec) -> PreintegratedImu:
    """Fold one zero-order-hold measurement of duration ``dt`` into ``preint``."""
    if not dt > 0 or not np.isfinite(dt):
        raise InvalidMeasurementError(f"integration step must be positive, got {dt}")
    b = preint.bias_linearization_point
    w = np.asarray(m.gyro, dtype=float) - b.gyro_bias
    a = np.asarray(m.accel, dtype=float) - b.accel_bias
    dR = preint.delta_R
    step = so3_exp(w * dt)
    Jr = right_jacobian_so3(w * dt)
    a_hat = skew(a)
    dR_a_hat = dR @ a_hat

    A = np.eye(9)
    A[0:3, 0:3] = step.T
    A[3:6, 0:3] = -dR_a_hat * dt
    A[6:9, 0:3] = -0.5 * dR_a_hat * dt * dt
    A[6:9, 3:6] = np.eye(3) * dt
    Bg = np.zeros((9, 3))
    Bg[0:3] = Jr * dt
    Ba = np.zeros((9, 3))
    Ba[3:6] = dR * dt
    Ba[6:9] = 0.5 * dR * dt * dt
    cov = A @ preint.covariance @ A.T
    cov += (noise.gyro_noise_density**2 / dt) * (Bg @ Bg.T)
    cov += (noise.accel_noise_density**2 / dt) * (Ba @ Ba.T)
    cov = 0.5 * (cov + cov.T)

    Jg = preint.jacobian_wrt_gyro_bias
    Ja = preint.jacobian_wrt_accel_bias
    JR_bg, JV_bg, JP_bg = Jg[0:3], Jg[3:6], Jg[6:9]
    JV_ba, JP_ba = Ja[3:6], Ja[6:9]
    new_Jg = np.empty((9, 3))
    new_Ja = np.zeros((9, 3))
    new_Jg[6:9] = JP_bg + JV_bg * dt - 0.5 * dR_a_hat @ JR_bg * dt * dt
    new_Ja[6:9] = JP_ba + JV_ba * dt - 0.5 * dR * dt * dt
    new_Jg[3:6] = JV_bg - dR_a_hat @ JR_bg * dt
    new_Ja[3:6] = JV_ba - dR * dt
    new_Jg[0:3] = step.T @ JR_bg - Jr * dt

    return replace(
        preint,
        delta_p=preint.delta_p + preint.delta_V * dt + 0.5 * (dR @ a) * dt * dt,
        delta_V=preint.delta_V + (dR @ a) * dt,
        delta_R=dR @ step,
        delta_t=preint.delta_t + dt,
        covariance=cov,
        jacobian_wrt_gyro_bias=new_Jg,
        jacobian_wrt_accel_bias=new_Ja,
    )


def correct_first_order(preint: PreintegratedImu, new_bias: ImuBias, warn_threshold: float = 0.05):
    """Deltas re-expressed at ``new_bias`` through the stored bias Jacobians."""
    lin = preint.bias_linearization_point
    dbg = new_bias.gyro_bias - lin.gyro_bias
    dba = new_bias.accel_bias - lin.accel_bias
    if max(np.linalg.norm(dbg), np.linalg.norm(dba)) > warn_threshold:
        log.warning("bias moved %.3g from its linearization point; first-order correction is inaccurate",
                    max(np.linalg.norm(dbg), np.linalg.norm(dba)))
    dR = preint.delta_R @ so3_exp(preint.J_R_bg @ dbg)
    dV = preint.delta_V + preint.J_V_bg @ dbg + preint.J_V_ba @ dba
    dp = preint.delta_p + preint.J_P_bg @ dbg + preint.J_P_ba @ dba
    return dR, dV, dp


def _check_interval(preint, state_prev, state_next):
    span = state_next.timestamp - state_prev.timestamp
    if abs(span - preint.delta_t) > INTERVAL_TOL:
        raise InconsistentIntervalError(
            f"preintegration covers {preint.delta_t:.6f} s but states are {span:.6f} s apart"
        )


def inertial_residual(preint, state_prev: KeyframeState, state_next: KeyframeState, gravity, bias: ImuBias | None = None):
    """9-vector (rotation, velocity, position) residual between two keyframes."""
    _check_interval(preint, state_prev, state_next)
    if bias is None:
        dR, dV, dp = preint.delta_R, preint.delta_V, preint.delta_p
    else:
        dR, dV, dp = correct_first_order(preint, bias)
    g = np.asarray(gravity, dtype=float)
    dt = preint.delta_t
    Ri = state_prev.R_wb
    r_R = so3_log(dR.T @ Ri.T @ state_next.R_wb, check=False)
    r_V = Ri.T @ (state_next.v_w - state_prev.v_w - g * dt) - dV
    r_p = Ri.T @ (state_next.p_wb - state_prev.p_wb - state_prev.v_w * dt - 0.5 * g * dt * dt) - dp
    return np.concatenate([r_R, r_V, r_p])


def predict(state_prev: KeyframeState, preint: PreintegratedImu, gravity, bias: ImuBias | None = None) -> KeyframeState:
    """The unique next state whose inertial residual is zero."""
    if bias is None:
        dR, dV, dp = preint.delta_R, preint.delta_V, preint.delta_p
    else:
        dR, dV, dp = correct_first_order(preint, bias)
    g = np.asarray(gravity, dtype=float)
    dt = preint.delta_t
    Ri = state_prev.R_wb
    return KeyframeState(
        R_wb=Ri @ dR,
        p_wb=state_prev.p_wb + state_prev.v_w * dt + 0.5 * g * dt * dt + Ri @ dp,
        v_w=state_prev.v_w + g * dt + Ri @ dV,
        timestamp=state_prev.timestamp + dt,
    )


class ImuSeries:
    """Array view of a measurement list, for slicing by time."""

    def __init__(self, measurements):
        self.measurements = list(measurements)
        n = len(self.measurements)
        self.t = np.array([m.timestamp for m in self.measurements], dtype=float)
        self.gyro = np.array([m.gyro for m in self.measurements], dtype=float).reshape(n, 3)
        self.accel = np.array([m.accel for m in self.measurements], dtype=float).reshape(n, 3)
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise InvalidMeasurementError("IMU timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def nominal_period(self) -> float:
        return float(np.median(np.diff(self.t))) if len(self.t) > 1 else float("nan")

    def check_gaps(self, t0: float, t1: float, factor: float = 2.0):
        i0 = max(bisect.bisect_right(self.t, t0) - 1, 0)
        i1 = min(bisect.bisect_left(self.t, t1) + 1, len(self.t))
        gaps = np.diff(self.t[i0:i1])
        nominal = self.nominal_period()
        if len(gaps) and gaps.max() > factor * nominal + TIME_EPS:
            raise ImuGapError(f"IMU gap of {gaps.max():.4f} s inside [{t0:.3f}, {t1:.3f}]")

    def segments(self, t0: float, t1: float):
        """Yield ``(gyro, accel, dt)`` zero-order-hold pieces covering ``[t0, t1]``.

        A sample straddling ``t0`` contributes only the part after ``t0`` with
        its value linearly interpolated at ``t0``.
        """
        t = self.t
        if len(t) == 0 or t[0] > t0 + TIME_EPS or t[-1] < t1 - TIME_EPS:
            raise InsufficientDataError(f"IMU data does not cover [{t0}, {t1}]")
        i = bisect.bisect_right(t, t0 + TIME_EPS) - 1
        start = t0
        while start < t1 - TIME_EPS:
            end = min(t[i + 1], t1) if i + 1 < len(t) else t1
            if abs(start - t[i]) <= TIME_EPS or i + 1 >= len(t):
                g, a = self.gyro[i], self.accel[i]
            else:
                f = (start - t[i]) / (t[i + 1] - t[i])
                g = (1 - f) * self.gyro[i] + f * self.gyro[i + 1]
                a = (1 - f) * self.accel[i] + f * self.accel[i + 1]
            if end - start > TIME_EPS:
                yield g, a, end - start
            start = end
            i += 1


def preintegrate(series: ImuSeries, t0: float, t1: float, bias: ImuBias, noise: ImuNoiseSpec) -> PreintegratedImu:
    pre = PreintegratedImu.start(bias)
    for g, a, dt in series.segments(t0, t1):
        pre = integrate(pre, ImuMeasurement(0.0, g, a), dt, noise)
    return pre
