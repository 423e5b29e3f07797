"""Rigid-body math, pinhole camera model and the derivative blocks used by
the renderer.

Quaternions are plain float64 arrays stored in (r, i, j, k) order. Poses are
camera-to-world: ``X_world = R @ X_cam + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera

ZNEAR = 0.01
_NORM_TOL = 1e-6


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a, b):
    """Hamilton product ``a * b`` for (r, i, j, k) quaternions."""
    ar, ai, aj, ak = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    br, bi, bj, bk = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            ar * br - ai * bi - aj * bj - ak * bk,
            ar * bi + ai * br + aj * bk - ak * bj,
            ar * bj - ai * bk + aj * br + ak * bi,
            ar * bk + ai * bj - aj * bi + ak * br,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotation(q, normalize=True):
    """Rotation matrix from a quaternion (works batched over leading axes).

    With ``normalize=True`` the quaternion is renormalized first when its norm
    deviates from 1 by more than 1e-6. ``normalize=False`` evaluates the
    polynomial as-is, which is what the renderer differentiates for the
    camera pose.
    """
    q = np.asarray(q, dtype=np.float64)
    if normalize:
        n = np.linalg.norm(q, axis=-1, keepdims=True)
        if np.any(np.abs(n - 1.0) > _NORM_TOL):
            q = q / n
    r, i, j, k = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (j * j + k * k)
    R[..., 0, 1] = 2.0 * (i * j - r * k)
    R[..., 0, 2] = 2.0 * (i * k + r * j)
    R[..., 1, 0] = 2.0 * (i * j + r * k)
    R[..., 1, 1] = 1.0 - 2.0 * (i * i + k * k)
    R[..., 1, 2] = 2.0 * (j * k - r * i)
    R[..., 2, 0] = 2.0 * (i * k - r * j)
    R[..., 2, 1] = 2.0 * (j * k + r * i)
    R[..., 2, 2] = 1.0 - 2.0 * (i * i + j * j)
    return R


def rotation_derivatives(q):
    """dR/dq_{r,i,j,k} of the (unnormalized) quaternion polynomial.

    Returns shape ``q.shape[:-1] + (4, 3, 3)``.
    """
    q = np.asarray(q, dtype=np.float64)
    r, i, j, k = np.moveaxis(q, -1, 0)
    z = np.zeros_like(r)
    rows = [
        # d/dr
        [[z, -k, j], [k, z, -i], [-j, i, z]],
        # d/di
        [[z, j, k], [j, -2 * i, -r], [k, r, -2 * i]],
        # d/dj
        [[-2 * j, i, r], [i, z, k], [-r, k, -2 * j]],
        # d/dk
        [[-2 * k, -r, i], [r, -2 * k, j], [i, j, z]],
    ]
    out = np.empty(q.shape[:-1] + (4, 3, 3))
    for a in range(4):
        for b in range(3):
            for c in range(3):
                out[..., a, b, c] = 2.0 * rows[a][b][c]
    return out


def quat_point_derivatives(q, X):
    """Derivatives of the rotated point ``R(q) @ X`` with respect to each
    quaternion component. Returns an array of shape (..., 4, 3)."""
    q = np.asarray(q, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    r, i, j, k = np.moveaxis(q, -1, 0)
    x, y, zc = np.moveaxis(X, -1, 0)
    out = np.empty(np.broadcast(r, x).shape + (4, 3))
    out[..., 0, 0] = -k * y + j * zc
    out[..., 0, 1] = k * x - i * zc
    out[..., 0, 2] = -j * x + i * y
    out[..., 1, 0] = j * y + k * zc
    out[..., 1, 1] = j * x - 2 * i * y - r * zc
    out[..., 1, 2] = k * x + r * y - 2 * i * zc
    out[..., 2, 0] = -2 * j * x + i * y + r * zc
    out[..., 2, 1] = i * x + k * zc
    out[..., 2, 2] = -r * x + k * y - 2 * j * zc
    out[..., 3, 0] = -2 * k * x - r * y + i * zc
    out[..., 3, 1] = r * x - 2 * k * y + j * zc
    out[..., 3, 2] = i * x + j * y
    return 2.0 * out


def rotation_to_quat(R):
    """Unit quaternion (r, i, j, k) with r >= 0 from a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(rotation_to_quat(T[:3, :3]), T[:3, 3].copy())

    @property
    def R(self):
        return quat_to_rotation(self.rotation)

    @property
    def t(self):
        return self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def normalized(self):
        return CameraPose(quat_normalize(self.rotation), self.translation)

    def inverse(self):
        qc = quat_conjugate(self.rotation)
        return CameraPose(qc, -(quat_to_rotation(qc) @ self.translation))

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        return CameraPose(q, self.R @ other.translation + self.translation)

    def __matmul__(self, other):
        return self.compose(other)

    def rotation_angle_to(self, other):
        """Angle in radians of the relative rotation between two poses."""
        d = abs(float(np.dot(quat_normalize(self.rotation), quat_normalize(other.rotation))))
        return 2.0 * np.arccos(min(1.0, d))

    def translation_distance_to(self, other):
        return float(np.linalg.norm(self.translation - other.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Pixel (u, v) has its center at coordinate (u, v)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def scaled(self, factor):
        """Intrinsics for an image subsampled by taking every 1/factor-th pixel."""
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            max(1, int(np.ceil(self.width * factor))),
            max(1, int(np.ceil(self.height * factor))),
        )

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def world_to_camera(pose: CameraPose, X):
    """Camera coordinates of world point(s) ``X`` (shape (3,) or (N, 3))."""
    X = np.asarray(X, dtype=np.float64)
    return (X - pose.translation) @ pose.R


def camera_to_world(pose: CameraPose, Xc):
    Xc = np.asarray(Xc, dtype=np.float64)
    return Xc @ pose.R.T + pose.translation


def project(K: CameraIntrinsics, Xc, znear=ZNEAR):
    """Pixel coordinates and depth of a camera-space point."""
    x, y, z = np.asarray(Xc, dtype=np.float64)
    if z <= znear:
        raise BehindCamera(f"point depth {z} <= znear {znear}")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy]), float(z)


def projection_jacobian(K: CameraIntrinsics, Xc, znear=ZNEAR):
    x, y, z = np.asarray(Xc, dtype=np.float64)
    if z <= znear:
        raise BehindCamera(f"point depth {z} <= znear {znear}")
    return np.array(
        [
            [K.fx / z, 0.0, -K.fx * x / (z * z)],
            [0.0, K.fy / z, -K.fy * y / (z * z)],
        ]
    )


def backproject(K: CameraIntrinsics, u, v, depth):
    """Camera-space points for pixel coordinates and metric depth (vectorized)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)


def constant_velocity_predict(prev: CameraPose, prev2: CameraPose) -> CameraPose:
    """Apply the last relative motion once more."""
    motion = prev2.inverse() @ prev
    return (prev @ motion).normalized()
