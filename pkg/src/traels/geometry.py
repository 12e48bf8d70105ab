"""Coordinate frames, rigid transforms and pose algebra.

Angles are radians everywhere, wrapped to (-pi, pi].  Orientation follows the
intrinsic Z-Y-X (yaw-pitch-roll) convention: R = Rz(yaw) @ Ry(pitch) @ Rx(roll).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateOrientationError, UninitializedAnchorError

# Pitch magnitude (rad) beyond which Euler extraction is refused.
GIMBAL_PITCH_LIMIT = np.deg2rad(89.9)


class FrameTag(enum.Enum):
    """Reference frame a stamped quantity is expressed in."""

    LOCAL = "L"
    GLOBAL = "G"
    UTM = "UTM"
    VEHICLE = "V"


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), 2.0 * np.pi)


def rotation_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X Euler angles (body -> world)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def euler_from_rotation(R: np.ndarray) -> np.ndarray:
    """Extract (roll, pitch, yaw) from a Z-Y-X rotation matrix.

    Raises DegenerateOrientationError near the gimbal singularity
    (|pitch| > 89.9 deg), where roll and yaw are no longer separable.
    """
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(pitch) > GIMBAL_PITCH_LIMIT:
        raise DegenerateOrientationError(
            f"pitch {np.rad2deg(pitch):.2f} deg is inside the gimbal guard band"
        )
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


@dataclass(frozen=True)
class Pose6D:
    """Rigid pose: position (m) and Z-Y-X Euler orientation (rad).

    Angles are wrapped at construction; poses inside the gimbal guard band
    (|pitch| > 89.9 deg) are rejected because downstream Euler algebra would
    silently lose precision there.
    """

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3).copy()
        ang = wrap_angle(np.asarray(self.orientation, dtype=float).reshape(3))
        if abs(ang[1]) > GIMBAL_PITCH_LIMIT:
            raise DegenerateOrientationError(
                f"pitch {np.rad2deg(ang[1]):.2f} deg is inside the gimbal guard band"
            )
        pos.setflags(write=False)
        ang.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", ang)

    @classmethod
    def from_xyzrpy(cls, x=0.0, y=0.0, z=0.0, roll=0.0, pitch=0.0, yaw=0.0) -> "Pose6D":
        return cls(np.array([x, y, z], dtype=float), np.array([roll, pitch, yaw], dtype=float))

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls()

    @property
    def roll(self) -> float:
        return float(self.orientation[0])

    @property
    def pitch(self) -> float:
        return float(self.orientation[1])

    @property
    def yaw(self) -> float:
        return float(self.orientation[2])

    def rotation(self) -> np.ndarray:
        return rotation_zyx(*self.orientation)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 transform."""
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.position
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose6D":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], euler_from_rotation(T[:3, :3]))

    def inverse(self) -> "Pose6D":
        R = self.rotation()
        return Pose6D(-R.T @ self.position, euler_from_rotation(R.T))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (..., 3) from this pose's body frame to its parent frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation().T + self.position

    def __matmul__(self, other: "Pose6D") -> "Pose6D":
        return compose(self, other)

    def almost_equal(self, other: "Pose6D", tol: float = 1e-9) -> bool:
        dpos = np.max(np.abs(self.position - other.position))
        dang = np.max(np.abs(wrap_angle(self.orientation - other.orientation)))
        return bool(dpos < tol and dang < tol)


def compose(a: Pose6D, b: Pose6D) -> Pose6D:
    """Compose two poses: the result applies ``b`` first, then ``a``."""
    Ra = a.rotation()
    return Pose6D(Ra @ b.position + a.position, euler_from_rotation(Ra @ b.rotation()))


@dataclass(frozen=True)
class GridAnchor:
    """Static tie between the global inertial frame and a UTM-like grid.

    A planar rigid transform plus an altitude shift: a global pose is rotated
    by ``heading`` about +z, then translated by (easting, northing, altitude).
    Fixed for the duration of a run.
    """

    easting: float = 0.0
    northing: float = 0.0
    altitude: float = 0.0
    heading: float = 0.0

    def to_utm(self, pose: Pose6D) -> Pose6D:
        c, s = np.cos(self.heading), np.sin(self.heading)
        x, y, z = pose.position
        pos = np.array(
            [c * x - s * y + self.easting, s * x + c * y + self.northing, z + self.altitude]
        )
        ang = pose.orientation.copy()
        ang[2] = wrap_angle(ang[2] + self.heading)
        return Pose6D(pos, ang)

    def from_utm(self, pose: Pose6D) -> Pose6D:
        c, s = np.cos(self.heading), np.sin(self.heading)
        x = pose.position[0] - self.easting
        y = pose.position[1] - self.northing
        pos = np.array([c * x + s * y, -s * x + c * y, pose.position[2] - self.altitude])
        ang = pose.orientation.copy()
        ang[2] = wrap_angle(ang[2] - self.heading)
        return Pose6D(pos, ang)


def anchor_to_utm(pose: Pose6D, anchor: GridAnchor | None) -> Pose6D:
    """Map a pose from the global frame onto the anchored UTM grid."""
    if anchor is None:
        raise UninitializedAnchorError("grid anchor has not been initialized")
    return anchor.to_utm(pose)


def utm_to_anchor(pose: Pose6D, anchor: GridAnchor | None) -> Pose6D:
    """Inverse of :func:`anchor_to_utm`."""
    if anchor is None:
        raise UninitializedAnchorError("grid anchor has not been initialized")
    return anchor.from_utm(pose)
