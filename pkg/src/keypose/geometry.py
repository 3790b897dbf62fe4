"""Rigid-body poses, rotations, and the pinhole camera model.

Conventions used throughout the toolkit:

- Quaternions are ``(w, x, y, z)``, Hamilton product, unit norm, and
  canonicalized so that ``w >= 0`` (ties broken by the first nonzero vector
  component being positive).
- The camera frame follows OpenCV: +X right, +Y down, +Z forward.  A
  ``CameraModel`` extrinsic is the world-to-camera transform, i.e.
  ``p_cam = R_ext @ p_world + t_ext``.
- Orientations expressed "in camera frame" compose as
  ``q_cam = q_ext * q_world`` (rotation part of the extrinsic applied on the
  left).
- Euler angles are intrinsic X-Y-Z in degrees; the first and third angles
  live in [-180, 180), the middle angle in [-90, 90].  This convention is
  fixed here and nowhere else.

All functions accept batched inputs (leading dimensions broadcast); all types
are immutable after construction and safe for concurrent use.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

_QUAT_NORM_TOL = 1e-9


# ---------------------------------------------------------------------------
# quaternion primitives
# ---------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for (..., 4) quaternion arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries heavy moveaxis overhead for small arrays
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * _cross3(qv, v)
    return v + w * t + _cross3(qv, t)


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Normalize and fix the sign: w >= 0, ties broken by first nonzero component.

    Idempotent; preserves the represented rotation exactly (q and -q are the
    same rotation).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        norm = float(np.sqrt(q @ q))
        if norm == 0.0:
            raise ValueError("zero quaternion cannot be normalized")
        if abs(norm - 1.0) > 1e-12:  # keep canonicalization bitwise idempotent
            q = q / norm
        for c in q:
            if c != 0.0:
                return -q if c < 0.0 else np.array(q)
        return np.array(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero quaternion cannot be normalized")
    q = q / np.where(np.abs(norm - 1.0) > 1e-12, norm, 1.0)
    # Sign of the first nonzero component decides; flip if it is negative.
    first_nonzero = np.where(np.abs(q) > 0.0, np.sign(q), 0.0)
    idx = np.argmax(np.abs(q) > 0.0, axis=-1)
    sign = np.take_along_axis(first_nonzero, idx[..., None], axis=-1)
    return q * np.where(sign < 0, -1.0, 1.0)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (..., 3, 3) of unit quaternions (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a single 3x3 rotation matrix (Shepperd)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("matrix_to_quat expects a single 3x3 matrix")
    trace = np.trace(m)
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return canonicalize_quat(q)


def quat_angle_deg(q: np.ndarray) -> np.ndarray:
    """Rotation angle in degrees, in [0, 180].

    Uses 2*atan2(|vec|, |w|), stable near zero rotation.
    """
    q = np.asarray(q, dtype=np.float64)
    vec_norm = np.linalg.norm(q[..., 1:], axis=-1)
    return np.degrees(2.0 * np.arctan2(vec_norm, np.abs(q[..., 0])))


def rotation_angle_deg(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Angle of the relative rotation between two orientations, degrees."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    if qa.shape == qb.shape and np.array_equal(qa, qb):
        # identical quaternions are exactly zero apart; skip the float noise
        return np.zeros(qa.shape[:-1])
    return quat_angle_deg(quat_multiply(quat_conjugate(qa), qb))


# ---------------------------------------------------------------------------
# Euler conversion (intrinsic X-Y-Z, degrees) -- the single conversion point
# ---------------------------------------------------------------------------

def _wrap_deg(a: np.ndarray) -> np.ndarray:
    """Wrap angles into [-180, 180)."""
    return np.mod(np.asarray(a, dtype=np.float64) + 180.0, 360.0) - 180.0


def euler_xyz_to_quat(angles_deg: np.ndarray) -> np.ndarray:
    """Quaternion of intrinsic X-Y-Z Euler angles (..., 3) in degrees."""
    angles = np.radians(np.asarray(angles_deg, dtype=np.float64))
    half = angles / 2.0
    c = np.cos(half)
    s = np.sin(half)
    zeros = np.zeros_like(c[..., 0])
    qx = np.stack([c[..., 0], s[..., 0], zeros, zeros], axis=-1)
    qy = np.stack([c[..., 1], zeros, s[..., 1], zeros], axis=-1)
    qz = np.stack([c[..., 2], zeros, zeros, s[..., 2]], axis=-1)
    return quat_multiply(qx, quat_multiply(qy, qz))


def quat_to_euler_xyz(q: np.ndarray) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (..., 3) in degrees of unit quaternions.

    Returns angles with the first/third in [-180, 180) and the middle in
    [-90, 90].  At the gimbal singularity (middle angle of +-90 deg) the
    third angle is set to zero.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    # Entries of R = Rx(a) @ Ry(b) @ Rz(g)
    r02 = 2.0 * (x * z + w * y)
    r12 = 2.0 * (y * z - w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    r01 = 2.0 * (x * y - w * z)
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r21 = 2.0 * (y * z + w * x)
    r11 = 1.0 - 2.0 * (x * x + z * z)

    sb = np.clip(r02, -1.0, 1.0)
    beta = np.arcsin(sb)
    gimbal = np.abs(sb) > 1.0 - 1e-12
    alpha = np.where(gimbal, np.arctan2(r21, r11), np.arctan2(-r12, r22))
    gamma = np.where(gimbal, 0.0, np.arctan2(-r01, r00))
    out = np.degrees(np.stack([alpha, beta, gamma], axis=-1))
    return _wrap_deg(out)


# ---------------------------------------------------------------------------
# pose and camera types
# ---------------------------------------------------------------------------

def _frozen_array(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose6D:
    """Rigid transform / 6-DoF pose: position in meters + unit quaternion.

    The quaternion is normalized and sign-canonicalized on construction.
    """

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = _frozen_array(self.position, (3,))
        q = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm} too far from 1")
        q = _frozen_array(canonicalize_quat(q), (4,))
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", q)

    @staticmethod
    def identity() -> "Pose6D":
        return Pose6D(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(rotation: np.ndarray, translation: np.ndarray) -> "Pose6D":
        return Pose6D(np.asarray(translation), matrix_to_quat(rotation))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        """Apply the transform: R @ p + t (batched over leading dims of p)."""
        return quat_rotate(self.orientation, p) + self.position

    def inverse(self) -> "Pose6D":
        q_inv = quat_conjugate(self.orientation)
        return Pose6D(-quat_rotate(q_inv, self.position), q_inv)

    def compose(self, other: "Pose6D") -> "Pose6D":
        """self after other: (self*other)(p) == self(other(p))."""
        return Pose6D(
            self.transform_point(other.position),
            quat_multiply(self.orientation, other.orientation),
        )

    def to_json(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "orientation": [float(v) for v in self.orientation],
        }

    @staticmethod
    def from_json(obj: dict) -> "Pose6D":
        return Pose6D(np.array(obj["position"]), np.array(obj["orientation"]))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera: intrinsics in pixels + world-to-camera extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose6D = field(default_factory=Pose6D.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsic": self.extrinsic.to_json(),
        }

    @staticmethod
    def from_json(obj: dict) -> "CameraModel":
        return CameraModel(
            fx=obj["fx"], fy=obj["fy"], cx=obj["cx"], cy=obj["cy"],
            width=obj["width"], height=obj["height"],
            extrinsic=Pose6D.from_json(obj["extrinsic"]),
        )


class Gripper(str, enum.Enum):
    GRASP = "grasp"
    RELEASE = "release"


@dataclass(frozen=True, eq=False)
class Keypose:
    """One predicted end-effector pose plus its gripper event."""

    pose: Pose6D
    gripper: Gripper


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A pick-and-place trajectory: exactly one grasp followed by one release."""

    keyposes: tuple

    def __post_init__(self):
        kps = tuple(self.keyposes)
        if len(kps) != 2:
            raise ValueError("trajectory must contain exactly two keyposes")
        if kps[0].gripper is not Gripper.GRASP or kps[1].gripper is not Gripper.RELEASE:
            raise ValueError("trajectory must be ordered grasp -> release")
        object.__setattr__(self, "keyposes", kps)

    @property
    def grasp(self) -> Keypose:
        return self.keyposes[0]

    @property
    def release(self) -> Keypose:
        return self.keyposes[1]

    def to_json(self) -> list:
        return [
            {**kp.pose.to_json(), "gripper": kp.gripper.value}
            for kp in self.keyposes
        ]

    @staticmethod
    def from_json(obj: list) -> "Trajectory":
        return Trajectory(
            tuple(
                Keypose(
                    Pose6D(np.array(e["position"]), np.array(e["orientation"])),
                    Gripper(e["gripper"]),
                )
                for e in obj
            )
        )


@dataclass(frozen=True, eq=False)
class ImageAction:
    """A pose expressed in image-frame coordinates.

    ``u``/``v`` are normalized pixel coordinates (x_pix/width, y_pix/height),
    ``depth`` is the camera-frame z in meters, and ``orientation`` is the
    camera-frame quaternion.
    """

    u: float
    v: float
    depth: float
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "orientation",
            _frozen_array(canonicalize_quat(self.orientation), (4,)),
        )

    @property
    def in_frame(self) -> bool:
        return 0.0 <= self.u <= 1.0 and 0.0 <= self.v <= 1.0


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

_MIN_DEPTH = 1e-6


def project(pose: Pose6D, cam: CameraModel) -> ImageAction:
    """Project a world pose into image-frame coordinates.

    Raises:
        BehindCamera: if the camera-frame z is <= 1e-6 m.  Points projecting
            outside [0, 1]^2 are NOT an error; check ``ImageAction.in_frame``.
    """
    p_cam = cam.extrinsic.transform_point(pose.position)
    z = float(p_cam[2])
    if z <= _MIN_DEPTH:
        raise BehindCamera(f"camera-frame z={z} <= {_MIN_DEPTH}")
    u = (cam.fx * p_cam[0] / z + cam.cx) / cam.width
    v = (cam.fy * p_cam[1] / z + cam.cy) / cam.height
    q_cam = quat_multiply(cam.extrinsic.orientation, pose.orientation)
    return ImageAction(u=float(u), v=float(v), depth=z, orientation=q_cam)


def unproject(action: ImageAction, cam: CameraModel) -> Pose6D:
    """Invert :func:`project`: image-frame action back to a world pose.

    Raises:
        NonPositiveDepth: if ``action.depth`` <= 0.
    """
    if action.depth <= 0.0:
        raise NonPositiveDepth(f"depth={action.depth} must be positive")
    x = (action.u * cam.width - cam.cx) * action.depth / cam.fx
    y = (action.v * cam.height - cam.cy) * action.depth / cam.fy
    p_cam = np.array([x, y, action.depth])
    inv = cam.extrinsic.inverse()
    return Pose6D(
        inv.transform_point(p_cam),
        quat_multiply(inv.orientation, action.orientation),
    )


# ---------------------------------------------------------------------------
# waypoint expansion
# ---------------------------------------------------------------------------

DEFAULT_LIFT_HEIGHT = 0.15


def expand_waypoints(traj: Trajectory, lift_height: float = DEFAULT_LIFT_HEIGHT) -> list:
    """Expand a two-keypose trajectory into the five executed waypoints.

    Emits [pre-grasp, grasp, lifted grasp, aligned-above-release, release],
    where the raised waypoints sit ``lift_height`` above their anchors.  The
    orientation switches from the grasp orientation to the release
    orientation across the alignment segment (waypoints 3 -> 4); a downstream
    planner interpolates in between.
    """
    if lift_height <= 0:
        raise ValueError("lift_height must be positive")
    lift = np.array([0.0, 0.0, lift_height])
    g = traj.grasp.pose
    r = traj.release.pose
    return [
        Pose6D(g.position + lift, g.orientation),
        g,
        Pose6D(g.position + lift, g.orientation),
        Pose6D(r.position + lift, r.orientation),
        r,
    ]
