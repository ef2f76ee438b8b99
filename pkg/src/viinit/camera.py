"""Rectified pinhole stereo camera: projection, triangulation, observation types."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from viinit.errors import (
    BehindCameraError,
    DegenerateDisparityError,
    InvalidArgumentError,
)
from viinit.geometry import PoseSE3

DEPTH_EPSILON = 1e-6
DISPARITY_EPSILON = 1e-3
PYRAMID_SCALE_FACTOR = 1.2


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline_b: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if not self.baseline_b > 0:
            raise InvalidArgumentError("stereo baseline must be positive")
        if not (self.image_width > 0 and self.image_height > 0):
            raise InvalidArgumentError("image dimensions must be positive")

    def in_image(self, u, v):
        return (u >= 0) & (u < self.image_width) & (v >= 0) & (v < self.image_height)


@dataclass(frozen=True)
class Landmark:
    id: int
    position_world: np.ndarray

    def __post_init__(self):
        p = np.array(self.position_world, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError(f"landmark {self.id} has non-finite coordinates")
        object.__setattr__(self, "position_world", p)


@dataclass(frozen=True)
class Observation:
    """A keypoint of ``landmark_id`` seen in keyframe ``keyframe_id``.

    ``pixel`` is ``(uL, v)`` for a mono keypoint and ``(uL, v, uR)`` for a
    rectified stereo match. Keyframe ids are integer nanosecond timestamps.
    """

    keyframe_id: int
    landmark_id: int
    pixel: tuple
    pyramid_level: int = 0

    @property
    def kind(self) -> str:
        return "stereo" if len(self.pixel) == 3 else "mono"

    @property
    def is_stereo(self) -> bool:
        return len(self.pixel) == 3


@dataclass
class Track:
    landmark: Landmark
    observations: list = field(default_factory=list)


def level_sigma(level: int, scale_factor: float = PYRAMID_SCALE_FACTOR) -> float:
    """Pixel standard deviation of a keypoint detected at pyramid ``level``."""
    return scale_factor**level


def _depth(point_cam):
    Z = float(point_cam[2])
    if not Z > DEPTH_EPSILON:
        raise BehindCameraError(f"point depth {Z} is not in front of the camera")
    return Z


def project_mono(point_cam, K: CameraIntrinsics) -> np.ndarray:
    X, Y, _ = point_cam
    Z = _depth(point_cam)
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy])


def project_stereo(point_cam, K: CameraIntrinsics) -> np.ndarray:
    X, Y, _ = point_cam
    Z = _depth(point_cam)
    return np.array(
        [K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy, K.fx * (X - K.baseline_b) / Z + K.cx]
    )


def triangulate_stereo(obs, K: CameraIntrinsics) -> np.ndarray:
    uL, v, uR = obs
    disparity = uL - uR
    if not disparity > DISPARITY_EPSILON:
        raise DegenerateDisparityError(f"disparity {disparity} px is too small")
    Z = K.fx * K.baseline_b / disparity
    return np.array([(uL - K.cx) * Z / K.fx, (v - K.cy) * Z / K.fy, Z])


def triangulate_mono(pixels, poses_cw, K: CameraIntrinsics) -> np.ndarray:
    """Linear (DLT) triangulation of one point from >= 2 mono views."""
    rows = []
    for (u, v), pose in zip(pixels, poses_cw):
        P = np.hstack([pose.rotation, pose.translation[:, None]])
        x = (u - K.cx) / K.fx
        y = (v - K.cy) / K.fy
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.asarray(rows))
    h = Vt[-1]
    if abs(h[3]) < 1e-12:
        raise DegenerateDisparityError("point at infinity")
    return h[:3] / h[3]


def world_to_cam(pose_cw: PoseSE3, point_world) -> np.ndarray:
    return pose_cw.rotation @ np.asarray(point_world, dtype=float) + pose_cw.translation


def projection_jacobian(points_cam, K: CameraIntrinsics, stereo: bool):
    """d(pi)/d(point) for an (N, 3) batch; returns (N, 2|3, 3)."""
    X, Y, Z = points_cam[:, 0], points_cam[:, 1], points_cam[:, 2]
    iz = 1.0 / Z
    iz2 = iz * iz
    n = len(points_cam)
    J = np.zeros((n, 3 if stereo else 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * X * iz2
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * Y * iz2
    if stereo:
        J[:, 2, 0] = K.fx * iz
        J[:, 2, 2] = -K.fx * (X - K.baseline_b) * iz2
    return J


def project_batch(points_cam, K: CameraIntrinsics, stereo: bool):
    """Vectorized projection without depth checks; caller masks invalid rows."""
    X, Y, Z = points_cam[:, 0], points_cam[:, 1], points_cam[:, 2]
    cols = [K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy]
    if stereo:
        cols.append(K.fx * (X - K.baseline_b) / Z + K.cx)
    return np.stack(cols, axis=1)
