"""Rigid view pose and pinhole projection.

Conventions: R = Rz(roll) @ Ry(yaw) @ Rx(pitch); camera looks down +z; image
rows grow downward, so v = cy - focal * y / z.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidArgumentError


@dataclass(frozen=True)
class ViewPose:
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def as_vector(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll, self.tx, self.ty, self.tz])

    @classmethod
    def from_vector(cls, v) -> "ViewPose":
        return cls(*(float(x) for x in v))


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float = 1015.0
    cx: float = 112.0
    cy: float = 112.0
    width: int = 224
    height: int = 224
    near: float = 1.0

    def __post_init__(self):
        if not self.focal > 0:
            raise InvalidArgumentError("focal must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")
        if not self.near > 0:
            raise InvalidArgumentError("near plane must be positive")

    @classmethod
    def default(cls, size: int = 224) -> "CameraIntrinsics":
        """Conventional face camera (focal 1015 px at 224 px), rescaled to ``size``."""
        return cls(focal=1015.0 * size / 224.0, cx=size / 2, cy=size / 2, width=size, height=size)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def pose_to_matrix(pose: ViewPose) -> tuple[np.ndarray, np.ndarray]:
    R = _rz(pose.roll) @ _ry(pose.yaw) @ _rx(pose.pitch)
    return R, pose.translation


def rotation_derivatives(pose: ViewPose) -> np.ndarray:
    """dR/d(pitch, yaw, roll), stacked as 3 x 3 x 3."""
    rx, ry, rz = _rx(pose.pitch), _ry(pose.yaw), _rz(pose.roll)
    return np.stack([
        rz @ ry @ _drx(pose.pitch),
        rz @ _dry(pose.yaw) @ rx,
        _drz(pose.roll) @ ry @ rx,
    ])


def to_camera(points: np.ndarray, pose: ViewPose) -> np.ndarray:
    R, t = pose_to_matrix(pose)
    return points @ R.T + t


def project(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates (N x 2, columns u, v) of camera-space points."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    bad = np.flatnonzero(~(z > cam.near))
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(z[bad[0]]), cam.near)
    u = cam.focal * points[:, 0] / z + cam.cx
    v = cam.cy - cam.focal * points[:, 1] / z
    return np.stack([u, v], axis=1)


def project_backward(points: np.ndarray, cam: CameraIntrinsics, d_uv: np.ndarray) -> np.ndarray:
    """Chain ``d_uv`` (N x 2) through the projection to camera-space points."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    f = cam.focal
    du, dv = d_uv[:, 0], d_uv[:, 1]
    return np.stack([
        du * f / z,
        -dv * f / z,
        -du * f * x / z**2 + dv * f * y / z**2,
    ], axis=1)


def pose_backward(points: np.ndarray, pose: ViewPose, d_cam: np.ndarray):
    """Gradients w.r.t. model-space points and the 6 pose parameters.

    ``points`` are the model-space inputs of :func:`to_camera`, ``d_cam`` the
    gradient w.r.t. its outputs.
    """
    R, _ = pose_to_matrix(pose)
    d_points = d_cam @ R
    dR = rotation_derivatives(pose)
    # d/dangle_k of sum_i d_cam_i . (dR_k p_i)
    d_angles = np.einsum("ij,kjl,il->k", d_cam, dR, points)
    return d_points, np.concatenate([d_angles, d_cam.sum(axis=0)])
