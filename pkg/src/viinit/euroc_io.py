"""EuRoC-ASL dataset layout, calibration key-value files and feature tracks.

On-disk layout::

    <root>/mav0/imu0/data.csv                      IMU stream
    <root>/mav0/state_groundtruth_estimate0/data.csv   ground truth (optional)
    <root>/mav0/cam0/data.csv                      keyframe stamps
    <root>/calibration.txt                         key-value calibration
    <root>/tracks.txt                              feature tracks

Track file records::

    L <landmark_id>
    O <keyframe_timestamp_ns> <pyramid_level> <uL> <v> [<uR>]

An observation is stereo iff ``uR`` is present.
"""

from __future__ import annotations

import bisect
import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from viinit.camera import CameraIntrinsics, Landmark, Observation, Track
from viinit.errors import (
    ConfigError,
    InsufficientDataError,
    ParseError,
    ValidationError,
)
from viinit.geometry import matrix_to_quat_wxyz, quat_wxyz_to_matrix
from viinit.imu import ImuBias, ImuMeasurement, ImuNoiseSpec
from viinit.kvfile import atomic_write_text, format_kv, read_kv

log = logging.getLogger(__name__)

IMU_PATH = os.path.join("mav0", "imu0", "data.csv")
GT_PATH = os.path.join("mav0", "state_groundtruth_estimate0", "data.csv")
CAM_PATH = os.path.join("mav0", "cam0", "data.csv")
CALIB_PATH = "calibration.txt"
TRACKS_PATH = "tracks.txt"

IMU_HEADER = (
    "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
    "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]"
)
GT_HEADER = (
    "#timestamp, p_RS_R_x [m], p_RS_R_y [m], p_RS_R_z [m], q_RS_w [], q_RS_x [], q_RS_y [], "
    "q_RS_z [], v_RS_R_x [m s^-1], v_RS_R_y [m s^-1], v_RS_R_z [m s^-1], "
    "b_w_RS_S_x [rad s^-1], b_w_RS_S_y [rad s^-1], b_w_RS_S_z [rad s^-1], "
    "b_a_RS_S_x [m s^-2], b_a_RS_S_y [m s^-2], b_a_RS_S_z [m s^-2]"
)
CAM_HEADER = "#timestamp [ns],filename"
QUAT_NORM_TOL = 1e-3


@dataclass(frozen=True)
class GroundTruthState:
    timestamp: float
    R_wb: np.ndarray
    p_wb: np.ndarray
    v_w: np.ndarray
    bias: ImuBias = field(default_factory=ImuBias)


@dataclass(frozen=True)
class Calibration:
    intrinsics: CameraIntrinsics
    R_bc: np.ndarray
    t_bc: np.ndarray
    noise: ImuNoiseSpec
    imu_rate: float = 200.0


@dataclass
class DatasetBundle:
    imu: list
    ground_truth: list
    calibration: Calibration
    tracks: list = field(default_factory=list)
    keyframe_ids: list = field(default_factory=list)

    @property
    def time_range(self):
        if not self.imu:
            return (float("nan"), float("nan"))
        return (self.imu[0].timestamp, self.imu[-1].timestamp)

    @property
    def duration(self) -> float:
        t0, t1 = self.time_range
        return t1 - t0


def ns_to_s(ns: int) -> float:
    return ns / 1e9


def s_to_ns(t: float) -> int:
    return int(round(t * 1e9))


# --------------------------------------------------------------------------- CSV streams


def _rows(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for no, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            yield no, row


def _floats(path, no, row, n):
    if len(row) != n:
        raise ParseError(path, no, f"expected {n} columns, got {len(row)}")
    try:
        ns = int(row[0].strip())
        vals = [float(x) for x in row[1:]]
    except ValueError as exc:
        raise ParseError(path, no, str(exc)) from exc
    if not np.all(np.isfinite(vals)):
        raise ParseError(path, no, "non-finite value")
    return ns, vals


def _check_monotone(path, no, prev_ns, ns):
    if prev_ns is not None and ns <= prev_ns:
        raise ValidationError(f"{path}:{no}: timestamp {ns} is not strictly increasing")


def load_imu_csv(path) -> list:
    out = []
    prev = None
    for no, row in _rows(path):
        ns, v = _floats(path, no, row, 7)
        _check_monotone(path, no, prev, ns)
        prev = ns
        out.append(ImuMeasurement(ns_to_s(ns), np.array(v[0:3]), np.array(v[3:6])))
    return out


def load_ground_truth_csv(path) -> list:
    out = []
    prev = None
    for no, row in _rows(path):
        ns, v = _floats(path, no, row, 17)
        _check_monotone(path, no, prev, ns)
        prev = ns
        q = np.array(v[3:7])
        qn = np.linalg.norm(q)
        if abs(qn - 1.0) > QUAT_NORM_TOL:
            raise ValidationError(f"{path}:{no}: quaternion norm {qn:.6f} is not unit")
        out.append(GroundTruthState(
            timestamp=ns_to_s(ns),
            R_wb=quat_wxyz_to_matrix(q / qn),
            p_wb=np.array(v[0:3]),
            v_w=np.array(v[7:10]),
            bias=ImuBias(v[10:13], v[13:16]),
        ))
    return out


def load_keyframes_csv(path) -> list:
    out = []
    prev = None
    for no, row in _rows(path):
        try:
            ns = int(row[0].strip())
        except ValueError as exc:
            raise ParseError(path, no, str(exc)) from exc
        _check_monotone(path, no, prev, ns)
        prev = ns
        out.append(ns)
    return out


def _fmt(x) -> str:
    return repr(float(x))


def format_imu_csv(imu) -> str:
    lines = [IMU_HEADER]
    for m in imu:
        vals = list(m.gyro) + list(m.accel)
        lines.append(",".join([str(s_to_ns(m.timestamp))] + [_fmt(x) for x in vals]))
    return "\n".join(lines) + "\n"


def format_ground_truth_csv(gt) -> str:
    lines = [GT_HEADER]
    for s in gt:
        q = matrix_to_quat_wxyz(s.R_wb)
        vals = list(s.p_wb) + list(q) + list(s.v_w) + list(s.bias.gyro_bias) + list(s.bias.accel_bias)
        lines.append(",".join([str(s_to_ns(s.timestamp))] + [_fmt(x) for x in vals]))
    return "\n".join(lines) + "\n"


def format_keyframes_csv(ids) -> str:
    return "\n".join([CAM_HEADER] + [f"{ns},{ns}.png" for ns in ids]) + "\n"


# --------------------------------------------------------------------------- tracks


def format_tracks(tracks) -> str:
    lines = []
    for tr in tracks:
        lines.append(f"L {tr.landmark.id}")
        for o in tr.observations:
            lines.append(" ".join(["O", str(o.keyframe_id), str(o.pyramid_level)] + [_fmt(x) for x in o.pixel]))
    return "\n".join(lines) + ("\n" if lines else "")


def load_tracks(path, keyframe_ids=None) -> list:
    """Parse a track file. Tracks with fewer than two observations are dropped."""
    known = set(keyframe_ids) if keyframe_ids is not None else None
    tracks = []
    current = None
    seen_kf = set()
    dropped = 0

    def close():
        nonlocal dropped
        if current is not None:
            if len(current.observations) >= 2:
                tracks.append(current)
            else:
                dropped += 1

    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "L":
                close()
                if len(parts) != 2:
                    raise ParseError(path, no, "landmark record is 'L <id>'")
                try:
                    lid = int(parts[1])
                except ValueError as exc:
                    raise ParseError(path, no, str(exc)) from exc
                # position is unknown on load; the pipeline triangulates a seed
                current = Track(Landmark(lid, np.zeros(3)), [])
                seen_kf = set()
            elif parts[0] == "O":
                if current is None:
                    raise ParseError(path, no, "observation before any landmark record")
                if len(parts) not in (5, 6):
                    raise ParseError(path, no, "observation record is 'O <ns> <level> <uL> <v> [<uR>]'")
                try:
                    kf = int(parts[1])
                    level = int(parts[2])
                    pixel = tuple(float(x) for x in parts[3:])
                except ValueError as exc:
                    raise ParseError(path, no, str(exc)) from exc
                if level < 0:
                    raise ParseError(path, no, "pyramid level must be >= 0")
                if known is not None and kf not in known:
                    raise ValidationError(f"{path}:{no}: observation references unknown keyframe {kf}")
                if kf in seen_kf:
                    raise ValidationError(f"{path}:{no}: landmark {current.landmark.id} observed twice in keyframe {kf}")
                seen_kf.add(kf)
                current.observations.append(Observation(kf, current.landmark.id, pixel, level))
            else:
                raise ParseError(path, no, f"unknown record type {parts[0]!r}")
    close()
    if dropped:
        log.warning("%s: dropped %d track(s) with fewer than two observations", path, dropped)
    return tracks


# --------------------------------------------------------------------------- calibration


def format_calibration(calib: Calibration) -> str:
    K = calib.intrinsics
    T = np.eye(4)
    T[:3, :3] = calib.R_bc
    T[:3, 3] = calib.t_bc
    return format_kv({
        "fx": float(K.fx), "fy": float(K.fy), "cx": float(K.cx), "cy": float(K.cy),
        "baseline": float(K.baseline_b),
        "image_width": int(K.image_width), "image_height": int(K.image_height),
        "T_BC": T.ravel().tolist(),
        "gyro_noise_density": float(calib.noise.gyro_noise_density),
        "accel_noise_density": float(calib.noise.accel_noise_density),
        "gyro_bias_walk": float(calib.noise.gyro_bias_walk),
        "accel_bias_walk": float(calib.noise.accel_bias_walk),
        "imu_rate": float(calib.imu_rate),
    }, header="rectified stereo + IMU calibration; T_BC maps camera to body, row-major")


def load_calibration(path) -> Calibration:
    kv = read_kv(path)
    try:
        K = CameraIntrinsics(
            float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
            float(kv["baseline"]), int(kv["image_width"]), int(kv["image_height"]),
        )
        T = np.array(kv["T_BC"], dtype=float)
        noise = ImuNoiseSpec(
            float(kv["gyro_noise_density"]), float(kv["accel_noise_density"]),
            float(kv["gyro_bias_walk"]), float(kv["accel_bias_walk"]),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing calibration key {exc}") from exc
    if T.shape != (16,):
        raise ConfigError(f"{path}: T_BC needs 16 numbers")
    T = T.reshape(4, 4)
    return Calibration(K, T[:3, :3], T[:3, 3], noise, float(kv.get("imu_rate", 200.0)))


def calibration_from_euroc_yaml(cam0_yaml, cam1_yaml, imu_yaml) -> Calibration:
    """Flatten EuRoC ``sensor.yaml`` files. Intrinsics come from cam0; the
    baseline is the distance between the two camera centres."""
    import yaml

    def load(p):
        with open(p, "r", encoding="utf-8") as fh:
            return yaml.safe_load(fh)

    c0, c1, imu = load(cam0_yaml), load(cam1_yaml), load(imu_yaml)
    T0 = np.array(c0["T_BS"]["data"], dtype=float).reshape(4, 4)
    T1 = np.array(c1["T_BS"]["data"], dtype=float).reshape(4, 4)
    fu, fv, cu, cv = (float(x) for x in c0["intrinsics"])
    w, h = (int(x) for x in c0["resolution"])
    baseline = float(np.linalg.norm(T0[:3, 3] - T1[:3, 3]))
    noise = ImuNoiseSpec(
        float(imu["gyroscope_noise_density"]), float(imu["accelerometer_noise_density"]),
        float(imu["gyroscope_random_walk"]), float(imu["accelerometer_random_walk"]),
    )
    rate = float(imu.get("rate_hz", 200.0))
    return Calibration(CameraIntrinsics(fu, fv, cu, cv, baseline, w, h), T0[:3, :3], T0[:3, 3], noise, rate)


# --------------------------------------------------------------------------- dataset


def write_dataset(bundle: DatasetBundle, root):
    files = {
        IMU_PATH: format_imu_csv(bundle.imu),
        CAM_PATH: format_keyframes_csv(bundle.keyframe_ids),
        CALIB_PATH: format_calibration(bundle.calibration),
        TRACKS_PATH: format_tracks(bundle.tracks),
    }
    if bundle.ground_truth:
        files[GT_PATH] = format_ground_truth_csv(bundle.ground_truth)
    written = []
    for rel, text in files.items():
        path = os.path.join(root, rel)
        atomic_write_text(path, text)
        written.append(path)
    return written


def load_dataset(root) -> DatasetBundle:
    imu_path = os.path.join(root, IMU_PATH)
    calib_path = os.path.join(root, CALIB_PATH)
    for p in (imu_path, calib_path):
        if not os.path.exists(p):
            raise InsufficientDataError(f"missing dataset file {p}")
    imu = load_imu_csv(imu_path)
    gt_path = os.path.join(root, GT_PATH)
    gt = load_ground_truth_csv(gt_path) if os.path.exists(gt_path) else []
    cam_path = os.path.join(root, CAM_PATH)
    kf_ids = load_keyframes_csv(cam_path) if os.path.exists(cam_path) else []
    tr_path = os.path.join(root, TRACKS_PATH)
    tracks = load_tracks(tr_path, kf_ids if kf_ids else None) if os.path.exists(tr_path) else []
    if not kf_ids:
        kf_ids = sorted({o.keyframe_id for t in tracks for o in t.observations})
    return DatasetBundle(imu, gt, load_calibration(calib_path), tracks, kf_ids)


def slice(bundle: DatasetBundle, t_start: float, t_end: float) -> DatasetBundle:  # noqa: A001
    """Restrict every stream to ``[t_start, t_end]``, keeping one IMU sample before ``t_start``."""
    if not t_start < t_end:
        raise InsufficientDataError("slice needs t_start < t_end")
    eps = 1e-9
    ts = [m.timestamp for m in bundle.imu]
    i0 = bisect.bisect_left(ts, t_start - eps)
    i1 = bisect.bisect_right(ts, t_end + eps)
    if i1 <= i0:
        raise InsufficientDataError(f"no IMU samples in [{t_start}, {t_end}]")
    imu = bundle.imu[max(i0 - 1, 0):i1]
    gt = [s for s in bundle.ground_truth if t_start - eps <= s.timestamp <= t_end + eps]
    kf = [k for k in bundle.keyframe_ids if t_start - eps <= ns_to_s(k) <= t_end + eps]
    kf_set = set(kf)
    tracks = []
    for tr in bundle.tracks:
        obs = [o for o in tr.observations if o.keyframe_id in kf_set]
        if len(obs) == len(tr.observations):
            tracks.append(tr)
        elif len(obs) >= 2:
            tracks.append(Track(tr.landmark, obs))
    return replace(bundle, imu=imu, ground_truth=gt, tracks=tracks, keyframe_ids=kf)
