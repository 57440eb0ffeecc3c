"""Camera geometry shared by every stage.

Conventions
-----------
* Poses map world coordinates to camera coordinates: ``X_c = R @ X_w + t``.
* Rotations are stored as unit quaternions ``[w, x, y, z]``; matrices are
  derived on demand.
* Lengths are millimeters, image coordinates are pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    pass


class InvalidDisparityError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    center_x: float
    center_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.center_x <= self.width and 0 <= self.center_y <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.focal_x, 0.0, self.center_x], [0.0, self.focal_y, self.center_y], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class StereoRig:
    intrinsics: CameraIntrinsics
    baseline: float  # mm

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")


# --------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps exports byte-stable
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def rotvec_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    if theta < 1e-12:
        # second-order expansion, exact to double precision at this size
        q = np.array([1.0 - theta * theta / 8.0, *(0.5 * v)])
        return q / np.linalg.norm(q)
    axis = v / theta
    return np.array([math.cos(theta / 2), *(math.sin(theta / 2) * axis)])


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(s, q[0])
    return q[1:] / s * angle


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# --------------------------------------------------------------------------
# rigid poses


@dataclass(frozen=True, eq=False)
class RigidPose:
    """World-to-camera rigid transform ``X_c = R X_w + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidPose:
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> RigidPose:
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> RigidPose:
        return cls(rotvec_to_quat(rotvec), np.asarray(t, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def apply(self, points) -> np.ndarray:
        """Map world points (3,) or (N, 3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.translation

    def inverse(self) -> RigidPose:
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidPose(q, -(quat_to_matrix(q) @ self.translation))

    def compose(self, other: RigidPose) -> RigidPose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        return RigidPose(q, self.R @ other.translation + self.translation)

    def __matmul__(self, other: RigidPose) -> RigidPose:
        return self.compose(other)

    def retract(self, delta) -> RigidPose:
        """Left perturbation: ``X_c' = Exp(dθ) X_c + dt`` with ``delta = [dt, dθ]``."""
        delta = np.asarray(delta, dtype=np.float64)
        dq = rotvec_to_quat(delta[3:])
        dR = quat_to_matrix(dq)
        return RigidPose(quat_multiply(dq, self.rotation), dR @ self.translation + delta[:3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def __repr__(self):
        return f"RigidPose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def pose_apply(pose: RigidPose, p) -> np.ndarray:
    return pose.apply(p)


def project_point(p, k: CameraIntrinsics) -> np.ndarray:
    """Pin-hole projection of a camera-frame point (3,) or points (N, 3)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    u = k.center_x + k.focal_x * p[..., 0] / z
    v = k.center_y + k.focal_y * p[..., 1] / z
    return np.stack([u, v], axis=-1)


def backproject(u, v, z, k: CameraIntrinsics) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.stack([z * (u - k.center_x) / k.focal_x, z * (v - k.center_y) / k.focal_y, z], axis=-1)


def disparity_to_depth(d, rig: StereoRig):
    """Rectified-stereo depth ``z = f b / d`` (mm)."""
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr <= 0):
        raise InvalidDisparityError("disparity must be positive")
    z = rig.intrinsics.focal_x * rig.baseline / d_arr
    return float(z) if z.ndim == 0 else z


def depth_to_disparity(z, rig: StereoRig):
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(z_arr <= 0):
        raise InvalidDisparityError("depth must be positive")
    d = rig.intrinsics.focal_x * rig.baseline / z_arr
    return float(d) if d.ndim == 0 else d


def euler_zyx(R) -> np.ndarray:
    """Intrinsic Z-Y-X (yaw, pitch, roll) angles of a rotation matrix."""
    R = np.asarray(R)
    yaw = math.atan2(R[1, 0], R[0, 0])
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    return np.array([yaw, pitch, roll])


def pose_difference(a: RigidPose, b: RigidPose, rotation_factor: float = 20.0) -> float:
    """Keyframe pose-difference metric.

    Uses the relative transform ``a ∘ b⁻¹``: its translation norm (the distance
    between the two camera centers, mm) plus ``rotation_factor`` times the
    wrapped norm of its Z-Y-X Euler angles.
    """
    rel = a.compose(b.inverse())
    t_norm = float(np.linalg.norm(rel.translation))
    e_norm = float(np.linalg.norm(euler_zyx(rel.R)))
    return t_norm + rotation_factor * min(e_norm, 2.0 * math.pi - e_norm)


def rotation_angle(a: RigidPose, b: RigidPose) -> float:
    """Geodesic angle (rad) between the rotations of two poses."""
    R = a.R @ b.R.T
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(max(-1.0, min(1.0, c)))


def align_rigid(source, target):
    """Least-squares rotation ``R`` and translation ``t`` with ``R @ source + t ≈ target`` (no scale)."""
    a = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    ma, mb = a.mean(0), b.mean(0)
    U, _, Vt = np.linalg.svd((b - mb).T @ (a - ma))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, mb - R @ ma


def absolute_trajectory_error(estimated, truth) -> float:
    """RMS distance between camera centers after the best rigid alignment of ``estimated`` onto ``truth``."""
    a = np.asarray(estimated, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if len(a) != len(b):
        raise ValueError("trajectories differ in length")
    if not len(a):
        return 0.0
    R, t = align_rigid(a, b)
    return float(np.sqrt(np.mean(np.sum((a @ R.T + t - b) ** 2, 1))))
