"""Camera/pose types, projection, coordinate normalization and evaluation metrics.

All functions are pure and operate on float64 numpy arrays; rotations are
3x3 orthonormal matrices with determinant +1 and translations are plain
3-vectors in scene units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, InvalidInputError

DEPTH_EPS = 1e-9

PIXEL_FRAME = "pixel"
NORMALIZED_FRAME = "normalized"


def _as_float_array(x, shape=None, name="array") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise InvalidInputError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics without skew: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (np.isfinite([self.fx, self.fy, self.cx, self.cy]).all()):
            raise InvalidInputError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform (R, t) mapping scene points into the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_float_array(self.rotation, (3, 3), "rotation")
        t = _as_float_array(self.translation, (3,), "translation")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise InvalidInputError("pose must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise InvalidInputError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidInputError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (...,3) scene points into the camera frame."""
        return points @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PointSet3D:
    """M x 3 scene points."""

    points: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(_as_float_array(self.points))
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
            raise InvalidInputError(f"expected (M,3) points, got {p.shape}")
        if not np.isfinite(p).all():
            raise InvalidInputError("3D points must be finite")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PointSet2D:
    """N x 2 image points, tagged with the frame they live in."""

    points: np.ndarray
    frame: str = PIXEL_FRAME

    def __post_init__(self):
        p = np.atleast_2d(_as_float_array(self.points))
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
            raise InvalidInputError(f"expected (N,2) points, got {p.shape}")
        if not np.isfinite(p).all():
            raise InvalidInputError("2D points must be finite")
        if self.frame not in (PIXEL_FRAME, NORMALIZED_FRAME):
            raise InvalidInputError(f"unknown frame tag {self.frame!r}")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


def normalize_2d(points: PointSet2D, intrinsics: CameraIntrinsics) -> PointSet2D:
    """Map pixel coordinates to normalized image coordinates (K^-1 applied)."""
    if points.frame != PIXEL_FRAME:
        raise InvalidInputError("normalize_2d expects pixel-frame points")
    p = points.points
    out = np.empty_like(p)
    out[:, 0] = (p[:, 0] - intrinsics.cx) / intrinsics.fx
    out[:, 1] = (p[:, 1] - intrinsics.cy) / intrinsics.fy
    return PointSet2D(out, frame=NORMALIZED_FRAME)


def denormalize_2d(points: PointSet2D, intrinsics: CameraIntrinsics) -> PointSet2D:
    """Inverse of normalize_2d: normalized coordinates back to pixels."""
    if points.frame != NORMALIZED_FRAME:
        raise InvalidInputError("denormalize_2d expects normalized-frame points")
    p = points.points
    out = np.empty_like(p)
    out[:, 0] = p[:, 0] * intrinsics.fx + intrinsics.cx
    out[:, 1] = p[:, 1] * intrinsics.fy + intrinsics.cy
    return PointSet2D(out, frame=PIXEL_FRAME)


def project(pose: Pose, intrinsics: CameraIntrinsics, x: np.ndarray) -> np.ndarray:
    """Project one 3D point to pixel coordinates; raises if it is behind the camera."""
    x = _as_float_array(x, (3,), "x")
    v = pose.rotation @ x + pose.translation
    if v[2] <= DEPTH_EPS:
        raise BehindCameraError(f"depth {v[2]:.3e} <= {DEPTH_EPS}")
    return np.array(
        [
            intrinsics.fx * v[0] / v[2] + intrinsics.cx,
            intrinsics.fy * v[1] / v[2] + intrinsics.cy,
        ]
    )


def project_many(pose: Pose, intrinsics: CameraIntrinsics, points: np.ndarray):
    """Vectorized projection. Returns (pixels (M,2), depths (M,)); no depth check."""
    v = np.atleast_2d(points) @ pose.rotation.T + pose.translation
    depths = v[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack(
            [
                intrinsics.fx * v[:, 0] / depths + intrinsics.cx,
                intrinsics.fy * v[:, 1] / depths + intrinsics.cy,
            ],
            axis=1,
        )
    return px, depths


def bearing_vectors(y_norm: np.ndarray) -> np.ndarray:
    """Unit rays (N,3) for normalized image points (N,2)."""
    y = np.atleast_2d(y_norm)
    h = np.concatenate([y, np.ones((y.shape[0], 1))], axis=1)
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def angular_residual(pose: Pose, x: np.ndarray, y_norm: np.ndarray) -> float:
    """One minus the cosine between the transformed point ray and the image ray.

    Lies in [0, 2]: 0 for an exact correspondence, 2 for anti-parallel rays.
    """
    x = _as_float_array(x, (3,), "x")
    y = _as_float_array(y_norm, (2,), "y_norm")
    v = pose.rotation @ x + pose.translation
    nv = np.linalg.norm(v)
    if nv < 1e-300:
        raise DegenerateGeometryError("transformed point has zero length")
    b = np.array([y[0], y[1], 1.0])
    cosang = (v @ b) / (nv * np.linalg.norm(b))
    return float(np.clip(1.0 - cosang, 0.0, 2.0))


def angular_residuals_many(
    pose: Pose, x3d: np.ndarray, y_norm: np.ndarray
) -> np.ndarray:
    """Vectorized angular residuals for paired (K,3) points and (K,2) observations."""
    v = np.atleast_2d(x3d) @ pose.rotation.T + pose.translation
    nv = np.linalg.norm(v, axis=1)
    y = np.atleast_2d(y_norm)
    b = np.concatenate([y, np.ones((y.shape[0], 1))], axis=1)
    nb = np.linalg.norm(b, axis=1)
    cosang = np.einsum("ij,ij->i", v, b) / (nv * nb)
    return np.clip(1.0 - cosang, 0.0, 2.0)


def rotation_error_deg(r: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic rotation error arccos((trace(R_gt^T R) - 1) / 2) in degrees.

    The trace argument is clamped to [-1, 1]. Small angles are evaluated
    through the identity |R - R_gt|_F = 2 sqrt(2) sin(angle/2), because the
    direct arccos amplifies trace round-off (~1e-16) into ~1e-6 degrees.
    """
    r = _as_float_array(r, (3, 3), "r")
    r_gt = _as_float_array(r_gt, (3, 3), "r_gt")
    c = (np.trace(r_gt.T @ r) - 1.0) / 2.0
    if c > 1.0 - 1e-8:
        half_sin = np.linalg.norm(r - r_gt) / (2.0 * np.sqrt(2.0))
        return float(np.degrees(2.0 * np.arcsin(np.clip(half_sin, 0.0, 1.0))))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t: np.ndarray, t_gt: np.ndarray) -> float:
    """Euclidean distance between translation vectors."""
    return float(np.linalg.norm(np.asarray(t, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def recall_curve(errors, thresholds) -> np.ndarray:
    """Fraction of errors strictly below each threshold.

    Thresholds must be strictly increasing; the output is non-decreasing in [0, 1].
    """
    e = np.asarray(errors, dtype=np.float64)
    tau = np.asarray(thresholds, dtype=np.float64)
    if e.size == 0:
        raise InvalidInputError("empty error list")
    if tau.size == 0 or (tau.size > 1 and not (np.diff(tau) > 0).all()):
        raise InvalidInputError("thresholds must be non-empty and strictly increasing")
    return np.array([(e < t).mean() for t in tau])


# Rotation construction helpers -------------------------------------------------


def rot_x(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def euler_xyz(ax: float, ay: float, az: float) -> np.ndarray:
    """Intrinsic x-y-z Euler rotation (angles in radians)."""
    return rot_x(ax) @ rot_y(ay) @ rot_z(az)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0.0:
        return np.eye(3)
    a = a / n
    k = skew(a)
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def rotation_from_vector(w: np.ndarray) -> np.ndarray:
    """Exponential map: rotation for the axis-angle vector w (angle = |w|)."""
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    if angle < 1e-300:
        return np.eye(3)
    return axis_angle(w, angle)


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r
