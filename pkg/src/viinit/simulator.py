"""Synthetic stereo-inertial scenes with exact ground truth.

Trajectories are closed-form: position and ZYX Euler angles are sums of
sinusoids, so velocity, acceleration and body angular rate are analytic.

IMU sampling has two modes. ``"instantaneous"`` evaluates the continuous
measurement model at each sample time. ``"interval"`` (default) emits, for
each sample, the constant rate and specific force that carry the exact state
at ``t_i`` to the exact rotation and velocity at ``t_{i+1}`` under
zero-order-hold integration; positions then agree to O(dt^3) per step. This
keeps noise-free preintegration consistent with ground truth at 200 Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from viinit.camera import (
    DEPTH_EPSILON,
    DISPARITY_EPSILON,
    CameraIntrinsics,
    Landmark,
    Observation,
    Track,
    level_sigma,
)
from viinit.errors import ConfigError
from viinit.geometry import so3_exp, so3_log
from viinit.imu import GRAVITY_MAGNITUDE, ImuBias, ImuMeasurement, ImuNoiseSpec, KeyframeState

TRAJECTORY_KINDS = ("sinusoid", "circle", "figure-eight", "stationary-rotation")

EUROC_LIKE_INTRINSICS = CameraIntrinsics(
    fx=458.654, fy=457.296, cx=367.215, cy=248.375, baseline_b=0.110078,
    image_width=752, image_height=480,
)
# camera z along body x, camera x along body -y, camera y along body -z
DEFAULT_R_BC = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]) @ so3_exp([0.01, -0.02, 0.015])
DEFAULT_T_BC = np.array([0.05, -0.02, 0.01])


@dataclass(frozen=True)
class RotationProfile:
    yaw_amplitude: float = 0.3
    pitch_amplitude: float = 0.15
    roll_amplitude: float = 0.2
    rate: float = 1.1


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "sinusoid"
    amplitude: float = 1.0
    angular_rate: float = 0.8
    duration: float = 2.0
    rotation_profile: RotationProfile = field(default_factory=RotationProfile)
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory kind {self.kind!r}; expected one of {TRAJECTORY_KINDS}")
        if not self.duration > 0:
            raise ConfigError("trajectory duration must be positive")
        if not np.isfinite([self.amplitude, self.angular_rate]).all():
            raise ConfigError("trajectory rates must be finite")


def _sines(t, terms):
    """Sum of ``a*sin(w*t + phi)`` and its first two derivatives."""
    x = dx = ddx = 0.0
    for a, w, phi in terms:
        s, c = np.sin(w * t + phi), np.cos(w * t + phi)
        x += a * s
        dx += a * w * c
        ddx -= a * w * w * s
    return x, dx, ddx


class Trajectory:
    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        A, w = spec.amplitude, spec.angular_rate
        half = np.pi / 2
        if spec.kind == "sinusoid":
            self.pos_terms = [
                [(A, w, 0.0)],
                [(0.6 * A, 1.7 * w, 0.4)],
                [(0.4 * A, 1.3 * w, 1.1)],
            ]
        elif spec.kind == "circle":
            self.pos_terms = [[(A, w, half)], [(A, w, 0.0)], []]
        elif spec.kind == "figure-eight":
            self.pos_terms = [[(0.5 * A, 2 * w, 0.0)], [(A, w, 0.0)], [(0.2 * A, w, 0.3)]]
        else:
            self.pos_terms = [[], [], []]
        rp = spec.rotation_profile
        self.euler_terms = [
            [(rp.yaw_amplitude, rp.rate, 0.2)],
            [(rp.pitch_amplitude, 1.3 * rp.rate, 0.7)],
            [(rp.roll_amplitude, 0.7 * rp.rate, 1.5)],
        ]
        self.center = np.asarray(spec.center, dtype=float)

    def position(self, t):
        p, v, a = np.zeros(3), np.zeros(3), np.zeros(3)
        for i, terms in enumerate(self.pos_terms):
            p[i], v[i], a[i] = _sines(t, terms)
        return p + self.center, v, a

    def rotation(self, t):
        """Body-to-world rotation and body-frame angular velocity."""
        (y, dy, _), (p, dp, _), (r, dr, _) = (_sines(t, terms) for terms in self.euler_terms)
        cy, sy, cp, sp, cr, sr = np.cos(y), np.sin(y), np.cos(p), np.sin(p), np.cos(r), np.sin(r)
        Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
        Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
        Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
        omega = np.array([
            dr - dy * sp,
            dp * cr + dy * sr * cp,
            -dp * sr + dy * cr * cp,
        ])
        return Rz @ Ry @ Rx, omega

    def state(self, t) -> KeyframeState:
        R, _ = self.rotation(t)
        p, v, _ = self.position(t)
        return KeyframeState(R_wb=R, p_wb=p, v_w=v, timestamp=t)


def sample_times(duration: float, rate: float):
    """Integer-nanosecond sample stamps ``k / rate`` in ``[0, duration]`` and their seconds."""
    if not rate > 0:
        raise ConfigError("rates must be positive")
    n = int(np.floor(duration * rate + 1e-9))
    ns = [int(round(k * 1e9 / rate)) for k in range(n + 1)]
    return ns, [x / 1e9 for x in ns]


def generate_trajectory(spec: TrajectorySpec, keyframe_rate: float) -> list:
    traj = Trajectory(spec)
    _, ts = sample_times(spec.duration, keyframe_rate)
    return [traj.state(t) for t in ts]


def sample_imu(spec: TrajectorySpec, imu_rate: float, bias: ImuBias, noise: ImuNoiseSpec,
               gravity=(0.0, 0.0, -GRAVITY_MAGNITUDE), seed: int = 0, mode: str = "interval") -> list:
    if mode not in ("interval", "instantaneous"):
        raise ConfigError(f"unknown IMU sampling mode {mode!r}")
    traj = Trajectory(spec)
    g = np.asarray(gravity, dtype=float)
    _, ts = sample_times(spec.duration, imu_rate)
    dt = 1.0 / imu_rate
    rng = np.random.default_rng(seed)
    sg = noise.gyro_noise_density / np.sqrt(dt)
    sa = noise.accel_noise_density / np.sqrt(dt)
    out = []
    for t in ts:
        R, omega = traj.rotation(t)
        if mode == "instantaneous":
            _, _, a_w = traj.position(t)
            gyro = omega
            accel = R.T @ (a_w - g)
        else:
            R1, _ = traj.rotation(t + dt)
            _, v0, _ = traj.position(t)
            _, v1, _ = traj.position(t + dt)
            gyro = so3_log(R.T @ R1, check=False) / dt
            accel = R.T @ ((v1 - v0) / dt - g)
        gyro = gyro + bias.gyro_bias + sg * rng.standard_normal(3)
        accel = accel + bias.accel_bias + sa * rng.standard_normal(3)
        out.append(ImuMeasurement(t, gyro, accel))
    return out


@dataclass
class SimulationConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    keyframe_rate: float = 10.0
    imu_rate: float = 200.0
    intrinsics: CameraIntrinsics = EUROC_LIKE_INTRINSICS
    R_bc: np.ndarray = field(default_factory=lambda: DEFAULT_R_BC.copy())
    t_bc: np.ndarray = field(default_factory=lambda: DEFAULT_T_BC.copy())
    gravity: tuple = (0.0, 0.0, -GRAVITY_MAGNITUDE)
    true_bias: ImuBias = field(default_factory=ImuBias)
    imu_noise: ImuNoiseSpec = field(default_factory=ImuNoiseSpec)
    imu_noise_scale: float = 1.0
    imu_sampling: str = "interval"
    landmarks_n: int = 300
    # box relative to the trajectory center, (min corner, max corner) in metres
    landmark_box: tuple = ((2.5, -4.0, -2.5), (7.0, 4.0, 2.5))
    pixel_noise_sigma: float = 1.0
    pyramid_levels: int = 4
    mono_fraction: float = 0.1
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.imu_rate < 10 * self.keyframe_rate:
            raise ConfigError("IMU rate must be at least 10x the keyframe rate")
        if self.landmarks_n <= 0:
            raise ConfigError("landmarks_n must be positive")

    def noise_free(self) -> "SimulationConfig":
        return replace(self, imu_noise_scale=0.0, pixel_noise_sigma=0.0, outlier_fraction=0.0)


@dataclass
class SimulatedDataset:
    keyframes: list
    keyframe_ids: list
    imu: list
    tracks: list
    landmarks: dict
    true_bias: ImuBias
    gravity_world: np.ndarray
    intrinsics: CameraIntrinsics
    extrinsic_R_bc: np.ndarray
    extrinsic_t_bc: np.ndarray
    imu_noise: ImuNoiseSpec
    config: SimulationConfig
    ground_truth: list = field(default_factory=list)

    def to_bundle(self):
        from viinit.euroc_io import Calibration, DatasetBundle, GroundTruthState

        calib = Calibration(self.intrinsics, self.extrinsic_R_bc, self.extrinsic_t_bc,
                            self.imu_noise, imu_rate=self.config.imu_rate)
        gt = [GroundTruthState(s.timestamp, s.R_wb, s.p_wb, s.v_w, self.true_bias) for s in self.ground_truth]
        return DatasetBundle(imu=list(self.imu), ground_truth=gt, calibration=calib,
                             tracks=list(self.tracks), keyframe_ids=list(self.keyframe_ids))


def camera_pose_from_body(R_wb, p_wb, R_bc, t_bc):
    """World-to-camera (R_cw, t_cw) for a body pose and body-camera extrinsics."""
    R_wc = R_wb @ R_bc
    p_wc = p_wb + R_wb @ t_bc
    return R_wc.T, -R_wc.T @ p_wc


def generate_landmarks(cfg: SimulationConfig, rng) -> dict:
    lo = np.asarray(cfg.landmark_box[0], dtype=float) + np.asarray(cfg.trajectory.center, dtype=float)
    hi = np.asarray(cfg.landmark_box[1], dtype=float) + np.asarray(cfg.trajectory.center, dtype=float)
    pts = rng.uniform(lo, hi, size=(cfg.landmarks_n, 3))
    return {i: pts[i] for i in range(cfg.landmarks_n)}


def generate_tracks(cfg: SimulationConfig, keyframes, keyframe_ids, landmarks: dict, seed: int) -> list:
    """Project every landmark into every keyframe; noisy, culled, >= 2 observations each."""
    rng = np.random.default_rng(seed)
    K = cfg.intrinsics
    ids = sorted(landmarks)
    X = np.array([landmarks[i] for i in ids]).reshape(-1, 3)
    per_landmark = {i: [] for i in ids}
    for kf, kf_id in zip(keyframes, keyframe_ids):
        R_cw, t_cw = camera_pose_from_body(kf.R_wb, kf.p_wb, cfg.R_bc, cfg.t_bc)
        Pc = X @ R_cw.T + t_cw
        n = len(ids)
        levels = rng.integers(0, max(cfg.pyramid_levels, 1), size=n)
        noise = rng.standard_normal((n, 3))
        mono_draw = rng.random(n)
        outlier_draw = rng.random(n)
        outlier_px = rng.uniform([0, 0, 0], [K.image_width, K.image_height, K.image_width], size=(n, 3))
        for j, lid in enumerate(ids):
            x, y, z = Pc[j]
            if z <= DEPTH_EPSILON:
                continue
            uL = K.fx * x / z + K.cx
            v = K.fy * y / z + K.cy
            uR = K.fx * (x - K.baseline_b) / z + K.cx
            if not (0 <= uL < K.image_width and 0 <= v < K.image_height):
                continue
            stereo = 0 <= uR < K.image_width and mono_draw[j] >= cfg.mono_fraction
            sigma = cfg.pixel_noise_sigma * level_sigma(int(levels[j]))
            px = np.array([uL, v, uR]) + sigma * noise[j]
            if outlier_draw[j] < cfg.outlier_fraction:
                px = outlier_px[j].copy()
                px[2] = px[0] - rng.uniform(1.0, 40.0)
            if stereo and px[0] - px[2] <= DISPARITY_EPSILON:
                stereo = False
            pixel = (float(px[0]), float(px[1]), float(px[2])) if stereo else (float(px[0]), float(px[1]))
            per_landmark[lid].append(Observation(kf_id, lid, pixel, int(levels[j])))
    return [
        Track(Landmark(lid, landmarks[lid]), obs)
        for lid, obs in per_landmark.items()
        if len(obs) >= 2
    ]


def simulate(cfg: SimulationConfig) -> SimulatedDataset:
    """Full dataset from one seed: trajectory, IMU stream, landmarks and tracks."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    imu_seed, lm_seed, track_seed = (int(s.generate_state(1)[0]) for s in seeds)
    traj = Trajectory(cfg.trajectory)
    kf_ns, kf_t = sample_times(cfg.trajectory.duration, cfg.keyframe_rate)
    keyframes = [traj.state(t) for t in kf_t]
    imu = sample_imu(cfg.trajectory, cfg.imu_rate, cfg.true_bias, cfg.imu_noise.scaled(cfg.imu_noise_scale),
                     cfg.gravity, seed=imu_seed, mode=cfg.imu_sampling)
    _, gt_t = sample_times(cfg.trajectory.duration, cfg.imu_rate)
    ground_truth = [traj.state(t) for t in gt_t]
    landmarks = generate_landmarks(cfg, np.random.default_rng(lm_seed))
    tracks = generate_tracks(cfg, keyframes, kf_ns, landmarks, track_seed)
    return SimulatedDataset(
        keyframes=keyframes,
        keyframe_ids=kf_ns,
        imu=imu,
        tracks=tracks,
        landmarks=landmarks,
        true_bias=cfg.true_bias,
        gravity_world=np.asarray(cfg.gravity, dtype=float),
        intrinsics=cfg.intrinsics,
        extrinsic_R_bc=np.asarray(cfg.R_bc, dtype=float),
        extrinsic_t_bc=np.asarray(cfg.t_bc, dtype=float),
        imu_noise=cfg.imu_noise,
        config=cfg,
        ground_truth=ground_truth,
    )


def config_from_kv(kv: dict) -> SimulationConfig:
    """Build a :class:`SimulationConfig` from a flat key-value mapping."""
    known_traj = {"kind", "amplitude", "angular_rate", "duration", "center"}
    known_rot = {"yaw_amplitude", "pitch_amplitude", "roll_amplitude", "rotation_rate"}
    traj_kw = {}
    rot_kw = {}
    cfg_kw = {}
    for key, value in kv.items():
        if key in known_traj:
            traj_kw[key] = tuple(value) if key == "center" else value
        elif key in known_rot:
            rot_kw["rate" if key == "rotation_rate" else key] = float(value)
        elif key in ("gyro_bias", "accel_bias"):
            continue
        elif key in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk"):
            continue
        elif key == "landmark_box":
            v = list(value)
            if len(v) != 6:
                raise ConfigError("landmark_box needs 6 numbers: min xyz then max xyz")
            cfg_kw[key] = (tuple(v[:3]), tuple(v[3:]))
        elif key in ("keyframe_rate", "imu_rate", "imu_noise_scale", "pixel_noise_sigma",
                     "mono_fraction", "outlier_fraction"):
            cfg_kw[key] = float(value)
        elif key in ("landmarks_n", "pyramid_levels", "seed"):
            cfg_kw[key] = int(value)
        elif key == "imu_sampling":
            cfg_kw[key] = str(value)
        else:
            raise ConfigError(f"unknown simulation key {key!r}")
    try:
        traj = TrajectorySpec(rotation_profile=RotationProfile(**rot_kw), **traj_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    bias = ImuBias(kv.get("gyro_bias", [0.0, 0.0, 0.0]), kv.get("accel_bias", [0.0, 0.0, 0.0]))
    noise_defaults = ImuNoiseSpec()
    noise = ImuNoiseSpec(**{
        k: float(kv.get(k, getattr(noise_defaults, k)))
        for k in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk")
    })
    return SimulationConfig(trajectory=traj, true_bias=bias, imu_noise=noise, **cfg_kw)
