"""Four-step stereo visual-inertial initializer.

1. stereo visual BA over camera poses and landmarks (6-DoF per keyframe);
2. inertial-only MAP over velocities, gravity direction and IMU biases with
   poses held fixed;
3. rotations replaced by gyro integration with the estimated bias removed,
   then translation-only (3-DoF) BA with every rotation fixed;
4. joint visual-inertial BA over everything.

Each step is callable on its own. :func:`run_initialization` chains them and
:func:`run_variants` shares steps 1-2 across the step-3/step-4 ablations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from viinit.camera import CameraIntrinsics, Landmark, Track, triangulate_mono, triangulate_stereo
from viinit.errors import (
    ConfigError,
    InsufficientDataError,
    NotEnoughVisualDataError,
    NumericalFailure,
    StageError,
    ViInitError,
)
from viinit.euroc_io import DatasetBundle, ns_to_s
from viinit.factors import (
    BiasPriorFactor,
    BodyReprojectionFactor,
    CameraReprojectionFactor,
    InertialFactor,
    InertialParams,
    bias_prior_information,
)
from viinit.geometry import PoseSE3, so3_exp
from viinit.imu import GRAVITY_MAGNITUDE, ImuBias, ImuSeries, KeyframeState, correct_first_order, preintegrate
from viinit.solver import (
    EUCLIDEAN3,
    HUBER_MONO,
    HUBER_STEREO,
    SO3,
    UNIT_VECTOR,
    LeastSquaresProblem,
    SolveReport,
    SolverOptions,
    solve,
)

log = logging.getLogger(__name__)

STAGES = ("step1", "step2", "step3", "step4")


@dataclass
class InitConfig:
    window_length: float = 2.0
    min_keyframes: int = 10
    min_tracks_per_keyframe: int = 10
    step1_solver: SolverOptions = field(default_factory=SolverOptions)
    step2_solver: SolverOptions = field(default_factory=SolverOptions)
    step3_solver: SolverOptions = field(default_factory=SolverOptions)
    step4_solver: SolverOptions = field(default_factory=SolverOptions)
    prior_sigma_gyro: float = 0.01
    prior_sigma_accel: float = 0.1
    # multiplies the bias prior information relative to the inertial residuals
    prior_weight: float = 1.0
    step2_relinearizations: int = 3
    enable_step3: bool = True
    enable_step4: bool = True
    step3_optimize_landmarks: bool = True
    seed_mode: str = "stereo"
    seed_translation_sigma: float = 0.01
    seed_rotation_sigma_deg: float = 1.0
    step1_rotation_noise_deg: float = 0.0
    pyramid_scale_factor: float = 1.2
    huber_mono: float = HUBER_MONO
    huber_stereo: float = HUBER_STEREO
    seed: int = 0

    def __post_init__(self):
        if not self.window_length > 0:
            raise ConfigError("window_length must be positive")
        if self.min_keyframes < 4:
            raise ConfigError("min_keyframes must be >= 4")
        if self.seed_mode not in ("stereo", "ground_truth"):
            raise ConfigError(f"seed_mode must be 'stereo' or 'ground_truth', got {self.seed_mode!r}")
        if self.huber_mono <= 0 or self.huber_stereo <= 0:
            raise ConfigError("Huber thresholds must be positive")
        if self.prior_sigma_gyro <= 0 or self.prior_sigma_accel <= 0 or self.prior_weight < 0:
            raise ConfigError("bias prior parameters must be positive")

    @property
    def prior_information(self) -> np.ndarray:
        return self.prior_weight * bias_prior_information(self.prior_sigma_gyro, self.prior_sigma_accel)


@dataclass
class Step1Output:
    poses_cw: list
    landmarks: dict
    report: SolveReport
    rms_reprojection_px: float


@dataclass
class Step2Output:
    velocities: list
    inertial: InertialParams
    preints: list
    report: SolveReport


@dataclass
class InitResult:
    keyframe_ids: list
    states: list
    inertial: InertialParams | None
    landmarks: dict
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    stage_states: dict = field(default_factory=dict)
    status: str = "ok"
    failed_stage: str | None = None
    notes: list = field(default_factory=list)


# --------------------------------------------------------------------------- helpers


def _nearest(times, t, gate):
    i = int(np.argmin(np.abs(times - t)))
    return i if abs(times[i] - t) <= gate else None


def body_from_camera(pose_cw: PoseSE3, R_bc, t_bc):
    R_wc = pose_cw.rotation.T
    p_wc = -R_wc @ pose_cw.translation
    R_wb = R_wc @ R_bc.T
    return R_wb, p_wc - R_wb @ t_bc


def camera_from_body(R_wb, p_wb, R_bc, t_bc) -> PoseSE3:
    R_wc = R_wb @ R_bc
    p_wc = p_wb + R_wb @ t_bc
    return PoseSE3(R_wc.T, -R_wc.T @ p_wc)


class VisualData:
    """Observation arrays for the keyframes of one window."""

    def __init__(self, tracks, keyframe_ids):
        self.keyframe_ids = list(keyframe_ids)
        index = {k: i for i, k in enumerate(self.keyframe_ids)}
        self.tracks = []
        for tr in tracks:
            obs = [o for o in tr.observations if o.keyframe_id in index]
            if len(obs) >= 2:
                self.tracks.append((tr.landmark.id, obs))
        self.landmark_ids = [lid for lid, _ in self.tracks]
        self.lm_index = {lid: j for j, lid in enumerate(self.landmark_ids)}
        mono, stereo = [], []
        for lid, obs in self.tracks:
            for o in obs:
                (stereo if o.is_stereo else mono).append((index[o.keyframe_id], self.lm_index[lid], o.pixel, o.pyramid_level))
        self.mono = self._arrays(mono, 2)
        self.stereo = self._arrays(stereo, 3)
        counts = np.zeros(len(self.keyframe_ids), dtype=int)
        for arr in (self.mono, self.stereo):
            np.add.at(counts, arr[0], 1)
        self.obs_per_keyframe = counts

    @staticmethod
    def _arrays(rows, d):
        if not rows:
            return (np.zeros(0, int), np.zeros(0, int), np.zeros((0, d)), np.zeros(0, int))
        kf, lm, px, lv = zip(*rows)
        return (np.array(kf), np.array(lm), np.array(px, dtype=float), np.array(lv))

    def restrict(self, keep_landmarks):
        """Drop landmarks that could not be seeded."""
        keep = set(keep_landmarks)
        tracks = [Track(Landmark(lid, np.zeros(3)), obs) for lid, obs in self.tracks if lid in keep]
        self.__init__(tracks, self.keyframe_ids)

    def add_reprojection(self, problem, factory, pose_groups, lm_group, config):
        for arr, stereo in ((self.mono, False), (self.stereo, True)):
            kf, lm, px, lv = arr
            if len(kf) == 0:
                continue
            d = 3 if stereo else 2
            sqrt_info = (1.0 / config.pyramid_scale_factor**lv)[:, None, None] * np.eye(d)[None]
            problem.add_residuals(
                factory(px, stereo),
                [(pose_groups[0], kf), (pose_groups[1], kf), (lm_group, lm)],
                sqrt_info=sqrt_info,
                huber=config.huber_stereo if stereo else config.huber_mono,
                name="stereo" if stereo else "mono",
            )

    def rms_reprojection(self, poses_cw, landmarks, K):
        errs = []
        for arr, stereo in ((self.mono, False), (self.stereo, True)):
            kf, lm, px, _ = arr
            if len(kf) == 0:
                continue
            R = np.array([poses_cw[i].rotation for i in kf])
            t = np.array([poses_cw[i].translation for i in kf])
            X = np.array([landmarks[self.landmark_ids[j]] for j in lm])
            r, _, valid = CameraReprojectionFactor(K, px, stereo).evaluate(R, t, X, jacobians=False)
            errs.append(np.sum(r[valid] ** 2, axis=1))
        e = np.concatenate(errs) if errs else np.zeros(0)
        return float(np.sqrt(np.mean(e))) if len(e) else float("nan")


def _check_visual(vd: VisualData, config: InitConfig):
    if len(vd.keyframe_ids) < config.min_keyframes:
        raise NotEnoughVisualDataError(
            f"{len(vd.keyframe_ids)} keyframes in window, need {config.min_keyframes}"
        )
    weak = np.nonzero(vd.obs_per_keyframe < config.min_tracks_per_keyframe)[0]
    if len(weak):
        raise NotEnoughVisualDataError(
            f"keyframe {vd.keyframe_ids[int(weak[0])]} observes {int(vd.obs_per_keyframe[weak[0]])} tracks, "
            f"need {config.min_tracks_per_keyframe}"
        )


# --------------------------------------------------------------------------- seeding


def seed_poses_from_ground_truth(bundle: DatasetBundle, keyframe_ids, config: InitConfig, rng):
    """Ground-truth camera poses; all but the first perturbed by the configured noise."""
    gt_t = np.array([s.timestamp for s in bundle.ground_truth])
    calib = bundle.calibration
    poses = []
    for k, kid in enumerate(keyframe_ids):
        i = _nearest(gt_t, ns_to_s(kid), 5e-3)
        if i is None:
            raise InsufficientDataError(f"no ground truth within 5 ms of keyframe {kid}")
        s = bundle.ground_truth[i]
        R_wb, p_wb = s.R_wb, s.p_wb
        if k > 0:
            R_wb = R_wb @ so3_exp(np.deg2rad(config.seed_rotation_sigma_deg) * rng.standard_normal(3))
            p_wb = p_wb + config.seed_translation_sigma * rng.standard_normal(3)
        poses.append(camera_from_body(R_wb, p_wb, calib.R_bc, calib.t_bc))
    return poses


def _kabsch(A, B):
    """Rigid (R, t) minimizing sum |R a + t - b|^2."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cb - R @ ca


def seed_poses_from_stereo(bundle: DatasetBundle, keyframe_ids, vd: VisualData):
    """Chain pairwise rigid alignments of stereo-triangulated point clouds.

    The first keyframe is anchored at its ground-truth body pose when ground
    truth is available, otherwise at the identity.
    """
    calib = bundle.calibration
    K = calib.intrinsics
    if bundle.ground_truth:
        gt_t = np.array([s.timestamp for s in bundle.ground_truth])
        i = _nearest(gt_t, ns_to_s(keyframe_ids[0]), 5e-3)
        s = bundle.ground_truth[i] if i is not None else None
    else:
        s = None
    first = camera_from_body(s.R_wb, s.p_wb, calib.R_bc, calib.t_bc) if s is not None else camera_from_body(
        np.eye(3), np.zeros(3), calib.R_bc, calib.t_bc)
    per_kf = [dict() for _ in keyframe_ids]
    index = {k: i for i, k in enumerate(keyframe_ids)}
    for lid, obs in vd.tracks:
        for o in obs:
            if o.is_stereo and o.pixel[0] - o.pixel[2] > 1.0:
                per_kf[index[o.keyframe_id]][lid] = triangulate_stereo(o.pixel, K)
    poses = [first]
    for k in range(1, len(keyframe_ids)):
        common = sorted(set(per_kf[k - 1]) & set(per_kf[k]))
        if len(common) < 3:
            raise NotEnoughVisualDataError(
                f"only {len(common)} stereo points shared by keyframes {keyframe_ids[k - 1]} and {keyframe_ids[k]}"
            )
        A = np.array([per_kf[k - 1][c] for c in common])
        B = np.array([per_kf[k][c] for c in common])
        # maps points of camera k-1 into camera k
        R, t = _kabsch(A, B)
        poses.append(PoseSE3(R, t) @ poses[-1])
    return poses


def seed_landmarks(vd: VisualData, poses_cw, K: CameraIntrinsics) -> dict:
    out = {}
    for lid, obs in vd.tracks:
        stereo = [o for o in obs if o.is_stereo and o.pixel[0] - o.pixel[2] > 1e-3]
        index = {k: i for i, k in enumerate(vd.keyframe_ids)}
        try:
            if stereo:
                o = max(stereo, key=lambda o: o.pixel[0] - o.pixel[2])
                pose = poses_cw[index[o.keyframe_id]]
                out[lid] = pose.inverse().act(triangulate_stereo(o.pixel, K))
            else:
                out[lid] = triangulate_mono(
                    [o.pixel[:2] for o in obs], [poses_cw[index[o.keyframe_id]] for o in obs], K
                )
        except ViInitError:
            continue
    return out


# --------------------------------------------------------------------------- step 1


def step1_visual_ba(tracks, K: CameraIntrinsics, keyframe_ids, initial_poses, config: InitConfig | None = None,
                    initial_landmarks: dict | None = None) -> Step1Output:
    """6-DoF BA over all window poses and landmarks; the first pose is the gauge."""
    config = config or InitConfig()
    vd = tracks if isinstance(tracks, VisualData) else VisualData(tracks, keyframe_ids)
    _check_visual(vd, config)
    landmarks = initial_landmarks if initial_landmarks is not None else seed_landmarks(vd, initial_poses, K)
    if len(landmarks) < len(vd.landmark_ids):
        vd.restrict(landmarks)
        _check_visual(vd, config)
    n = len(vd.keyframe_ids)
    problem = LeastSquaresProblem()
    problem.add_group("rot", [p.rotation for p in initial_poses], SO3, fixed=[0])
    problem.add_group("trans", [p.translation for p in initial_poses], EUCLIDEAN3, fixed=[0])
    problem.add_group("lm", [landmarks[lid] for lid in vd.landmark_ids], EUCLIDEAN3, eliminate=True)
    vd.add_reprojection(problem, lambda px, st: CameraReprojectionFactor(K, px, st), ("rot", "trans"), "lm", config)
    report = solve(problem, config.step1_solver)
    if report.termination_reason == "numerical-failure":
        raise NumericalFailure("step-1 bundle adjustment failed to factorize")
    R, t = problem.values("rot"), problem.values("trans")
    poses = [initial_poses[0]] + [PoseSE3(R[i], t[i]) for i in range(1, n)]
    lms = {lid: problem.values("lm")[j].copy() for j, lid in enumerate(vd.landmark_ids)}
    return Step1Output(poses, lms, report, vd.rms_reprojection(poses, lms, K))


def translation_ba(vd: VisualData, rotations_cw, translations, landmarks: dict, K, config: InitConfig,
                   optimize_landmarks: bool, options: SolverOptions | None = None):
    """Translation-only BA with every rotation held fixed; the first translation is the gauge."""
    n = len(rotations_cw)
    problem = LeastSquaresProblem()
    problem.add_group("rot", rotations_cw, SO3, fixed=range(n))
    problem.add_group("trans", translations, EUCLIDEAN3, fixed=[0])
    lm_fixed = None if optimize_landmarks else range(len(vd.landmark_ids))
    problem.add_group("lm", [landmarks[lid] for lid in vd.landmark_ids], EUCLIDEAN3, fixed=lm_fixed, eliminate=True)
    vd.add_reprojection(problem, lambda px, st: CameraReprojectionFactor(K, px, st), ("rot", "trans"), "lm", config)
    report = solve(problem, options or config.step3_solver)
    if report.termination_reason == "numerical-failure":
        raise NumericalFailure("3-DoF bundle adjustment failed to factorize")
    lms = {lid: problem.values("lm")[j].copy() for j, lid in enumerate(vd.landmark_ids)}
    return problem.values("trans").copy(), lms, report


def inject_rotation_noise(step1: Step1Output, vd: VisualData, K, config: InitConfig, rng) -> Step1Output:
    """Corrupt every rotation but the first by ``Exp(n)``, ``n ~ N(0, sigma^2 I)``.

    Translations are then refit against the fixed landmarks, so each pose
    stays as consistent with the images as its wrong rotation allows. This is
    the coupled rotation/translation error a 6-DoF BA settles into.
    """
    sigma = config.step1_rotation_noise_deg
    if sigma <= 0:
        return step1
    poses = step1.poses_cw
    R = [poses[0].rotation] + [so3_exp(np.deg2rad(sigma) * rng.standard_normal(3)) @ p.rotation for p in poses[1:]]
    T, _, _ = translation_ba(vd, R, [p.translation for p in poses], step1.landmarks, K, config, False,
                             config.step1_solver)
    new = [poses[0]] + [PoseSE3(R[k], T[k]) for k in range(1, len(poses))]
    return replace(step1, poses_cw=new, rms_reprojection_px=vd.rms_reprojection(new, step1.landmarks, K))


# --------------------------------------------------------------------------- step 2


def _preintegrate_all(series, times, bias, noise):
    return [preintegrate(series, times[k], times[k + 1], bias, noise) for k in range(len(times) - 1)]


def _inertial_refs(n_kf):
    i = np.arange(n_kf - 1)
    j = i + 1
    z = np.zeros(n_kf - 1, dtype=int)
    return [("rot", i), ("pos", i), ("vel", i), ("rot", j), ("pos", j), ("vel", j), ("bg", z), ("ba", z), ("gdir", z)]


def _add_inertial(problem, preints, n_kf, gravity_mag):
    f = InertialFactor(preints, gravity_mag)
    problem.add_residuals(f, _inertial_refs(n_kf), sqrt_info=f.sqrt_information(), name="inertial")


def _add_prior(problem, config):
    prior = BiasPriorFactor(ImuBias(), config.prior_information)
    problem.add_residuals(prior, [("bg", [0]), ("ba", [0])], name="bias_prior")


def step2_inertial_only(body_poses, times, imu, noise, config: InitConfig | None = None,
                        gravity_mag: float = GRAVITY_MAGNITUDE) -> Step2Output:
    """Velocities, gravity direction and biases with every pose held fixed.

    ``body_poses`` is a list of ``(R_wb, p_wb)``; ``imu`` a measurement list or
    :class:`ImuSeries`. Preintegration is redone at the new bias estimate up
    to ``config.step2_relinearizations`` times.
    """
    config = config or InitConfig()
    series = imu if isinstance(imu, ImuSeries) else ImuSeries(imu)
    times = [float(t) for t in times]
    n = len(times)
    series.check_gaps(times[0], times[-1])
    bias = ImuBias()
    preints = _preintegrate_all(series, times, bias, noise)

    R = np.array([p[0] for p in body_poses])
    P = np.array([p[1] for p in body_poses])
    V = np.zeros((n, 3))
    for k in range(n):
        a, b = max(k - 1, 0), min(k + 1, n - 1)
        V[k] = (P[b] - P[a]) / (times[b] - times[a])
    acc = sum(R[k] @ preints[k].delta_V for k in range(n - 1))
    gdir = -acc / np.linalg.norm(acc)
    bg, ba = bias.gyro_bias.copy(), bias.accel_bias.copy()

    report = None
    for it in range(max(config.step2_relinearizations, 0) + 1):
        problem = LeastSquaresProblem()
        problem.add_group("rot", R, SO3, fixed=range(n))
        problem.add_group("pos", P, EUCLIDEAN3, fixed=range(n))
        problem.add_group("vel", V, EUCLIDEAN3)
        problem.add_group("bg", [bg], EUCLIDEAN3)
        problem.add_group("ba", [ba], EUCLIDEAN3)
        problem.add_group("gdir", [gdir], UNIT_VECTOR)
        _add_inertial(problem, preints, n, gravity_mag)
        _add_prior(problem, config)
        rep = solve(problem, config.step2_solver)
        if rep.termination_reason == "numerical-failure":
            raise NumericalFailure("inertial-only optimization failed to factorize")
        if report is None:
            report = rep
        else:
            report = replace(rep, initial_cost=report.initial_cost, iterations=report.iterations + rep.iterations,
                             cost_history=report.cost_history + rep.cost_history)
        V = problem.values("vel").copy()
        bg, ba = problem.values("bg")[0].copy(), problem.values("ba")[0].copy()
        gdir = problem.values("gdir")[0].copy()
        new_bias = ImuBias(bg, ba)
        moved = np.linalg.norm(new_bias.vector() - preints[0].bias_linearization_point.vector())
        if it == config.step2_relinearizations or moved < 1e-9:
            break
        preints = _preintegrate_all(series, times, new_bias, noise)
    return Step2Output(list(V), InertialParams(ImuBias(bg, ba), gdir, gravity_mag), preints, report)


# --------------------------------------------------------------------------- step 3


def integrate_rotations(R_first, preints, bias: ImuBias):
    """Chain bias-corrected preintegrated rotations from the first keyframe."""
    out = [R_first]
    for pre in preints:
        dR, _, _ = correct_first_order(pre, bias)
        out.append(out[-1] @ dR)
    return out


def step3_decoupled_refine(states, preints, tracks, inertial: InertialParams, R_bc, t_bc, K: CameraIntrinsics,
                           landmarks: dict, config: InitConfig | None = None, keyframe_ids=None):
    """IMU-integrated rotations, then translation-only BA with rotations fixed.

    Returns ``(states, landmarks, report)``.
    """
    config = config or InitConfig()
    keyframe_ids = keyframe_ids if keyframe_ids is not None else tracks.keyframe_ids
    vd = tracks if isinstance(tracks, VisualData) else VisualData(tracks, keyframe_ids)
    n = len(states)
    rotations = integrate_rotations(states[0].R_wb, preints, inertial.bias)
    cams = [camera_from_body(rotations[k], states[k].p_wb, R_bc, t_bc) for k in range(n)]
    T, lms, report = translation_ba(vd, [c.rotation for c in cams], [c.translation for c in cams], landmarks, K,
                                    config, config.step3_optimize_landmarks)
    out = [states[0]]
    for k in range(1, n):
        _, p_wb = body_from_camera(PoseSE3(cams[k].rotation, T[k]), R_bc, t_bc)
        out.append(replace(states[k], R_wb=rotations[k], p_wb=p_wb))
    return out, lms, report


# --------------------------------------------------------------------------- step 4


def build_joint_problem(states, preints, vd: VisualData, inertial: InertialParams, R_bc, t_bc, K, landmarks, config):
    n = len(states)
    problem = LeastSquaresProblem()
    problem.add_group("rot", [s.R_wb for s in states], SO3, fixed=[0])
    problem.add_group("pos", [s.p_wb for s in states], EUCLIDEAN3, fixed=[0])
    problem.add_group("vel", [s.v_w for s in states], EUCLIDEAN3)
    problem.add_group("bg", [inertial.bias.gyro_bias], EUCLIDEAN3)
    problem.add_group("ba", [inertial.bias.accel_bias], EUCLIDEAN3)
    problem.add_group("gdir", [inertial.gravity_dir], UNIT_VECTOR)
    problem.add_group("lm", [landmarks[lid] for lid in vd.landmark_ids], EUCLIDEAN3, eliminate=True)
    vd.add_reprojection(problem, lambda px, st: BodyReprojectionFactor(K, R_bc, t_bc, px, st), ("rot", "pos"), "lm",
                        config)
    _add_inertial(problem, preints, n, inertial.gravity_mag)
    _add_prior(problem, config)
    return problem


def step4_joint_viba(states, preints, tracks, inertial: InertialParams, R_bc, t_bc, K, landmarks,
                     config: InitConfig | None = None, keyframe_ids=None):
    """Joint visual-inertial MAP; returns ``(states, inertial, landmarks, report)``."""
    config = config or InitConfig()
    keyframe_ids = keyframe_ids if keyframe_ids is not None else tracks.keyframe_ids
    vd = tracks if isinstance(tracks, VisualData) else VisualData(tracks, keyframe_ids)
    problem = build_joint_problem(states, preints, vd, inertial, R_bc, t_bc, K, landmarks, config)
    report = solve(problem, config.step4_solver)
    if report.termination_reason == "numerical-failure":
        raise NumericalFailure("joint visual-inertial BA failed to factorize")
    R, P, V = problem.values("rot"), problem.values("pos"), problem.values("vel")
    out = [replace(states[0], v_w=V[0].copy())]
    for k in range(1, len(states)):
        out.append(replace(states[k], R_wb=R[k].copy(), p_wb=P[k].copy(), v_w=V[k].copy()))
    new_inertial = InertialParams(
        ImuBias(problem.values("bg")[0], problem.values("ba")[0]),
        problem.values("gdir")[0],
        inertial.gravity_mag,
    )
    lms = {lid: problem.values("lm")[j].copy() for j, lid in enumerate(vd.landmark_ids)}
    return out, new_inertial, lms, report


# --------------------------------------------------------------------------- orchestration


def window_keyframes(bundle: DatasetBundle, config: InitConfig, t_start: float | None = None):
    ids = sorted(bundle.keyframe_ids)
    if not ids:
        raise InsufficientDataError("dataset has no keyframes")
    t0 = ns_to_s(ids[0]) if t_start is None else t_start
    window = [k for k in ids if t0 - 1e-9 <= ns_to_s(k) <= t0 + config.window_length + 1e-9]
    if len(window) < 2:
        raise InsufficientDataError(f"{len(window)} keyframes in window starting at {t0:.3f} s")
    # allow one keyframe period of slack at the far end of the window
    period = float(np.median(np.diff([ns_to_s(k) for k in ids])))
    span = ns_to_s(window[-1]) - ns_to_s(window[0])
    if span < config.window_length - period - 1e-9:
        raise InsufficientDataError(f"keyframes span {span:.3f} s, shorter than the {config.window_length} s window")
    return window


@dataclass
class _Prefix:
    keyframe_ids: list
    times: list
    vd: VisualData
    series: ImuSeries
    step1: Step1Output
    body1: list
    step2: Step2Output
    states2: list
    timings: dict


def _run_prefix(bundle: DatasetBundle, config: InitConfig, t_start=None, initial_poses=None) -> _Prefix:
    calib = bundle.calibration
    K = calib.intrinsics
    kf_ids = window_keyframes(bundle, config, t_start)
    times = [ns_to_s(k) for k in kf_ids]
    rng = np.random.default_rng(config.seed)
    timings = {}

    t = time.perf_counter()
    try:
        vd = VisualData(bundle.tracks, kf_ids)
        _check_visual(vd, config)
        if initial_poses is None:
            if config.seed_mode == "ground_truth":
                initial_poses = seed_poses_from_ground_truth(bundle, kf_ids, config, rng)
            else:
                initial_poses = seed_poses_from_stereo(bundle, kf_ids, vd)
        s1 = step1_visual_ba(vd, K, kf_ids, initial_poses, config)
        s1 = inject_rotation_noise(s1, vd, K, config, rng)
    except ViInitError as exc:
        raise StageError("step1", exc) from exc
    body1 = [body_from_camera(p, calib.R_bc, calib.t_bc) for p in s1.poses_cw]
    timings["step1"] = time.perf_counter() - t

    t = time.perf_counter()
    try:
        series = ImuSeries(bundle.imu)
        s2 = step2_inertial_only(body1, times, series, calib.noise, config)
    except ViInitError as exc:
        partial = InitResult(kf_ids, [KeyframeState(R, p, np.zeros(3), tt) for (R, p), tt in zip(body1, times)],
                             None, s1.landmarks, {"step1": s1.report})
        raise StageError("step2", exc, partial) from exc
    timings["step2"] = time.perf_counter() - t
    states2 = [KeyframeState(R, p, v, tt) for (R, p), v, tt in zip(body1, s2.velocities, times)]
    return _Prefix(kf_ids, times, vd, series, s1, body1, s2, states2, timings)


def _finish(prefix: _Prefix, bundle: DatasetBundle, config: InitConfig, enable_step3: bool, enable_step4: bool):
    calib = bundle.calibration
    K = calib.intrinsics
    s1, s2 = prefix.step1, prefix.step2
    result = InitResult(
        keyframe_ids=list(prefix.keyframe_ids),
        states=list(prefix.states2),
        inertial=s2.inertial,
        landmarks=dict(s1.landmarks),
        reports={"step1": s1.report, "step2": s2.report},
        timings=dict(prefix.timings),
        stage_states={"step1": list(prefix.states2), "step2": list(prefix.states2)},
    )
    if enable_step3:
        t = time.perf_counter()
        try:
            states, lms, rep = step3_decoupled_refine(prefix.states2, s2.preints, prefix.vd, s2.inertial,
                                                      calib.R_bc, calib.t_bc, K, s1.landmarks, config)
            result.states, result.landmarks = states, lms
            result.reports["step3"] = rep
            result.stage_states["step3"] = list(states)
        except ViInitError as exc:
            result.status = "degraded"
            result.notes.append(f"step3 failed ({exc}); kept step-1 poses")
        result.timings["step3"] = time.perf_counter() - t
    if enable_step4:
        t = time.perf_counter()
        try:
            states, inertial, lms, rep = step4_joint_viba(result.states, s2.preints, prefix.vd, result.inertial,
                                                          calib.R_bc, calib.t_bc, K, result.landmarks, config)
            result.states, result.inertial, result.landmarks = states, inertial, lms
            result.reports["step4"] = rep
            result.stage_states["step4"] = list(states)
        except ViInitError as exc:
            result.status = "degraded"
            result.notes.append(f"step4 failed ({exc}); kept pre-step-4 estimate")
        result.timings["step4"] = time.perf_counter() - t
    return result


def run_initialization(bundle: DatasetBundle, config: InitConfig | None = None, t_start: float | None = None,
                       initial_poses=None) -> InitResult:
    """Run steps 1 to 4 over the window starting at ``t_start`` (default: first keyframe)."""
    config = config or InitConfig()
    prefix = _run_prefix(bundle, config, t_start, initial_poses)
    return _finish(prefix, bundle, config, config.enable_step3, config.enable_step4)


def run_variants(bundle: DatasetBundle, config: InitConfig | None = None, t_start: float | None = None,
                 initial_poses=None, with_step4: bool = True) -> dict:
    """Step-3/step-4 combinations over one shared step-1/step-2 prefix.

    Keys are ``(enable_step3, enable_step4)``; the step-4 variants are skipped
    when ``with_step4`` is false.
    """
    config = config or InitConfig()
    prefix = _run_prefix(bundle, config, t_start, initial_poses)
    out = {}
    for s3 in (False, True):
        base = _finish(prefix, bundle, config, s3, False)
        out[(s3, False)] = base
        if with_step4:
            out[(s3, True)] = _finish_step4_from(base, prefix, bundle, config)
    return out


def _finish_step4_from(base: InitResult, prefix: _Prefix, bundle, config):
    calib = bundle.calibration
    result = replace(base, reports=dict(base.reports), timings=dict(base.timings),
                     stage_states=dict(base.stage_states), notes=list(base.notes))
    t = time.perf_counter()
    try:
        states, inertial, lms, rep = step4_joint_viba(base.states, prefix.step2.preints, prefix.vd, base.inertial,
                                                      calib.R_bc, calib.t_bc, calib.intrinsics, base.landmarks, config)
        result.states, result.inertial, result.landmarks = states, inertial, lms
        result.reports["step4"] = rep
        result.stage_states["step4"] = list(states)
    except ViInitError as exc:
        result.status = "degraded"
        result.notes.append(f"step4 failed ({exc}); kept pre-step-4 estimate")
    result.timings["step4"] = time.perf_counter() - t
    return result


def ground_truth_states(bundle: DatasetBundle, keyframe_ids):
    gt_t = np.array([s.timestamp for s in bundle.ground_truth])
    out = []
    for k in keyframe_ids:
        i = _nearest(gt_t, ns_to_s(k), 5e-3)
        if i is None:
            raise InsufficientDataError(f"no ground truth within 5 ms of keyframe {k}")
        s = bundle.ground_truth[i]
        out.append(KeyframeState(s.R_wb, s.p_wb, s.v_w, s.timestamp))
    return out


_SOLVER_KEYS = tuple(f.name for f in fields(SolverOptions))


def init_config_from_kv(kv: dict, base: InitConfig | None = None) -> InitConfig:
    """Build an :class:`InitConfig` from flat keys.

    Scalar fields use their own names. Solver options may be given bare
    (``max_iter = 50``, applied to every step) or per step
    (``step4_max_iter = 20``); per-step keys win.
    """
    base = base or InitConfig()
    scalar = {f.name: f for f in fields(InitConfig) if not f.name.endswith("_solver")}
    kw = {}
    solvers = {s: asdict(getattr(base, f"{s}_solver")) for s in STAGES}
    shared = {}
    for key, value in kv.items():
        if key in scalar:
            current = getattr(base, key)
            try:
                kw[key] = type(current)(value) if not isinstance(current, bool) else _as_bool(key, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        elif key in _SOLVER_KEYS:
            shared[key] = value
        elif key[:6] in {f"{s}_" for s in STAGES} and key[6:] in _SOLVER_KEYS:
            continue
        else:
            raise ConfigError(f"unknown init config key {key!r}")
    for stage in STAGES:
        opts = dict(solvers[stage], **shared)
        for key in _SOLVER_KEYS:
            if f"{stage}_{key}" in kv:
                opts[key] = kv[f"{stage}_{key}"]
        try:
            opts = {k: type(solvers[stage][k])(v) for k, v in opts.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solver option for {stage}: {exc}") from exc
        kw[f"{stage}_solver"] = SolverOptions(**opts)
    return replace(base, **kw)


def _as_bool(key, value):
    if isinstance(value, bool):
        return value
    raise ConfigError(f"{key!r} must be true or false")


def init_config_to_kv(config: InitConfig) -> dict:
    out = {}
    for f in fields(InitConfig):
        v = getattr(config, f.name)
        if isinstance(v, SolverOptions):
            out.update({f"{f.name[:5]}_{k}": x for k, x in asdict(v).items()})
        else:
            out[f.name] = v
    return out


__all__ = [
    "InitConfig",
    "InitResult",
    "STAGES",
    "run_initialization",
    "run_variants",
    "init_config_from_kv",
    "init_config_to_kv",
    "step1_visual_ba",
    "step2_inertial_only",
    "step3_decoupled_refine",
    "step4_joint_viba",
    "integrate_rotations",
    "inject_rotation_noise",
]
