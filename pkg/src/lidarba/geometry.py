"""Rigid poses, right-perturbations and point transforms.

Rotations are kept as 3x3 matrices throughout; quaternions only appear at
the trajectory file boundary (see :mod:`lidarba.io`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stacked cross-product matrices for an ``(n, 3)`` array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(phi) -> np.ndarray:
    """Rodrigues' formula, with a Taylor branch near zero angle."""
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("non-finite rotation vector")
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(R) -> np.ndarray:
    """Rotation vector of ``R`` (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sign is arbitrary at pi
        B = (R + np.eye(3)) / 2.0
        axis = B[np.argmax(np.diag(B))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping local scan coordinates to the world frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose has non-finite entries")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rotvec(cls, phi, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(exp_so3(phi), np.asarray(t, dtype=float))

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.max(np.abs(R.T @ R - np.eye(3))) < tol and np.linalg.det(R) > 0)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or many ``(n, 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def orthonormalized(self) -> "Pose":
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            U[:, -1] *= -1
            R = U @ Vt
        return Pose(R, self.translation)


def boxplus(T: Pose, d) -> Pose:
    """Right perturbation ``(R exp(phi^), t + dt)`` with ``d = [phi, dt]``."""
    d = np.asarray(d, dtype=float).reshape(6)
    return Pose(T.rotation @ exp_so3(d[:3]), T.translation + d[3:])


def transform_point(T: Pose, pf) -> np.ndarray:
    return T.rotation @ np.asarray(pf, dtype=float) + T.translation


def point_pose_jacobian(T: Pose, pf) -> np.ndarray:
    """3x6 derivative of ``transform_point(T boxplus d, pf)`` at ``d = 0``."""
    J = np.empty((3, 6))
    J[:, :3] = -T.rotation @ skew(pf)
    J[:, 3:] = np.eye(3)
    return J


def relative_pose_errors(estimate, truth) -> tuple[np.ndarray, np.ndarray]:
    """Translation (m) and rotation (rad) errors of ``T0^-1 Tj`` against truth."""
    e0_inv = estimate[0].inverse()
    g0_inv = truth[0].inverse()
    dt, dr = [], []
    for e, g in zip(estimate, truth):
        re = e0_inv @ e
        rg = g0_inv @ g
        delta = rg.inverse() @ re
        dt.append(np.linalg.norm(delta.translation))
        dr.append(rotation_angle(delta.rotation))
    return np.array(dt), np.array(dr)
