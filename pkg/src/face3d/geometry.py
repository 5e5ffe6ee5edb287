"""Core geometry: rotations, projected rigid poses, boxes and overlap.

Conventions used throughout the package:

* Points are column vectors; point sets are stacked as ``(2, n)`` or
  ``(3, n)`` arrays.
* A 3D rotation is composed from Euler angles as
  ``A = Rz(roll) @ Rx(pitch) @ Ry(yaw)``.  Yaw is the left-right head
  turn (0 = frontal), pitch the up-down nod, roll the in-plane tilt.
* A face pose is a projected rigid transform ``x -> u + s * project(A @ x)``
  with 2D translation ``u``, scale ``s > 0`` and rotation ``A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GimbalLockError

ROTATION_TOL = 1e-9
GIMBAL_LOCK_TOL = 1e-8

# Type aliases for documentation purposes; plain float arrays at runtime.
Point2 = np.ndarray  # shape (2,)
Point3 = np.ndarray  # shape (3,)
Rotation3 = np.ndarray  # shape (3, 3), orthonormal with det +1


def project(points: np.ndarray) -> np.ndarray:
    """Orthographic projection dropping the z coordinate.

    Accepts a single ``(3,)`` point or a ``(3, n)`` set and returns the
    matching ``(2,)`` or ``(2, n)`` array.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[0] != 3:
        raise ValueError(f"expected 3D points, got shape {points.shape}")
    return points[:2]


def is_rotation(A: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    A = np.asarray(A, dtype=float)
    if A.shape != (3, 3) or not np.all(np.isfinite(A)):
        return False
    if not np.allclose(A.T @ A, np.eye(3), atol=tol):
        return False
    return abs(np.linalg.det(A) - 1.0) <= 10 * tol


@dataclass(frozen=True)
class Rpy:
    """Euler angles in radians.  For face poses yaw stays in [-pi/2, pi/2]."""

    roll: float
    pitch: float
    yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw], dtype=float)


def rpy_to_rotation(rpy: Rpy) -> Rotation3:
    """Compose a rotation matrix as Rz(roll) @ Rx(pitch) @ Ry(yaw)."""
    cr, sr = math.cos(rpy.roll), math.sin(rpy.roll)
    cp, sp = math.cos(rpy.pitch), math.sin(rpy.pitch)
    cy, sy = math.cos(rpy.yaw), math.sin(rpy.yaw)
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return rz @ rx @ ry


def rotation_to_rpy(A: np.ndarray) -> Rpy:
    """Invert :func:`rpy_to_rotation`.

    Raises :class:`GimbalLockError` when ``|cos(pitch)| <= 1e-8``; there the
    roll/yaw split is not recoverable.
    """
    A = np.asarray(A, dtype=float)
    if not is_rotation(A, tol=1e-6):
        raise ValueError("input is not a proper rotation matrix")
    sp = float(np.clip(A[2, 1], -1.0, 1.0))
    cos2 = 1.0 - sp * sp
    if cos2 <= GIMBAL_LOCK_TOL**2:
        raise GimbalLockError("pitch at +-pi/2: roll/yaw decomposition degenerate")
    pitch = math.asin(sp)
    yaw = math.atan2(-A[2, 0], A[2, 2])
    roll = math.atan2(-A[0, 1], A[1, 1])
    return Rpy(roll=roll, pitch=pitch, yaw=yaw)


@dataclass(frozen=True)
class Pose6:
    """Projected rigid transform: 2D translation, scale, 3D rotation."""

    u: np.ndarray
    s: float
    A: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(2)
        A = np.asarray(self.A, dtype=float)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "s", float(self.s))
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite translation")
        if not self.s > 0:
            raise ValueError(f"pose scale must be positive, got {self.s}")
        if not is_rotation(A):
            raise ValueError("pose rotation must be orthonormal with det +1")

    @classmethod
    def identity(cls) -> "Pose6":
        return cls(u=np.zeros(2), s=1.0, A=np.eye(3))

    @classmethod
    def from_rpy(cls, u, s: float, rpy: Rpy) -> "Pose6":
        return cls(u=np.asarray(u, dtype=float), s=s, A=rpy_to_rotation(rpy))

    def rpy(self) -> Rpy:
        return rotation_to_rpy(self.A)

    def yaw(self) -> float:
        return self.rpy().yaw

    def to_dict(self) -> dict:
        r = self.rpy()
        return {
            "u": [float(self.u[0]), float(self.u[1])],
            "s": self.s,
            "rpy": [r.roll, r.pitch, r.yaw],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6":
        roll, pitch, yaw = (float(v) for v in d["rpy"])
        return cls.from_rpy(d["u"], float(d["s"]), Rpy(roll, pitch, yaw))


def apply_pose(pose: Pose6, points: np.ndarray) -> np.ndarray:
    """Map model points through the projected rigid transform.

    ``points`` is a ``(3, n)`` matrix (or anything with a ``.points``
    attribute of that shape); returns the ``(2, n)`` image locations
    ``u + s * project(A @ points)``.
    """
    pts = getattr(points, "points", points)
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[0] != 3:
        raise ValueError(f"expected a 3 x n point matrix, got shape {pts.shape}")
    return pose.u[:, None] + pose.s * project(pose.A @ pts)


@dataclass(frozen=True)
class Box2:
    """Axis-aligned box with componentwise hi >= lo."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(2)
        hi = np.asarray(self.hi, dtype=float).reshape(2)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("non-finite box corners")
        if np.any(hi < lo):
            raise ValueError("box max corner must dominate min corner")

    @property
    def area(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.lo, self.hi])

    @classmethod
    def from_array(cls, a) -> "Box2":
        a = np.asarray(a, dtype=float).reshape(4)
        return cls(lo=a[:2], hi=a[2:])


def bounding_box(points: np.ndarray) -> Box2:
    """Bounding box of a ``(2, n)`` point set."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] != 2 or pts.shape[1] == 0:
        raise ValueError(f"expected a nonempty 2 x n point matrix, got {pts.shape}")
    return Box2(lo=pts.min(axis=1), hi=pts.max(axis=1))


def iou(a: Box2, b: Box2) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    if np.any(hi < lo):
        return 0.0
    inter = float(np.prod(hi - lo))
    union = a.area + b.area - inter
    if union <= 0.0:
        # Two touching zero-area boxes count as fully overlapping.
        return 1.0
    return inter / union
