"""Pinhole camera model, rigid poses, and se(3) helpers.

Conventions used throughout the package:
  * Poses are world-to-camera: p_cam = R @ p_world + t.
  * Pixel coordinates are (u, v) with u along image width (x) and v along
    height (y); integer coordinates sit at pixel centers.
  * Quaternions are (w, x, y, z) with unit norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import as_array, check_positive, check_rotation

# Points with camera-frame depth at or below this are behind the camera.
EPS_Z = 1e-6


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics with an integer pixel grid of width x height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        check_positive(self.fx, "fx")
        check_positive(self.fy, "fy")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: int) -> "Camera":
        """Intrinsics of the same view downsampled by an integer factor.

        A coarse cell center (i + 0.5) maps back to full resolution as
        (i + 0.5) * factor, which is what the shifted principal point encodes.
        """
        if self.width % factor or self.height % factor:
            raise ValueError("image dimensions must be divisible by the factor")
        f = float(factor)
        return Camera(
            fx=self.fx / f,
            fy=self.fy / f,
            cx=(self.cx + 0.5) / f - 0.5,
            cy=(self.cy + 0.5) / f - 0.5,
            width=self.width // factor,
            height=self.height // factor,
        )


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = as_array(self.R, "R", np.float64, (3, 3))
        t = as_array(self.t, "t", np.float64, (3,))
        check_rotation(R)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = as_array(T, "T", np.float64, (4, 4))
        return Pose(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self @ other)(p) = self(other(p))."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return points @ self.R.T + self.t

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.R.T @ self.t


def project_points(
    points: np.ndarray, camera: Camera, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (N, 3) to pixels.

    Returns (uv, z): pixel coordinates (N, 2) and camera-frame depths (N,).
    Pixels for points with z <= EPS_Z are NaN; callers treat them as behind
    the camera.
    """
    pc = pose.transform(np.asarray(points, dtype=np.float64))
    z = pc[..., 2]
    safe_z = np.where(z > EPS_Z, z, np.nan)
    u = camera.fx * pc[..., 0] / safe_z + camera.cx
    v = camera.fy * pc[..., 1] / safe_z + camera.cy
    return np.stack([u, v], axis=-1), z


def project(
    point: np.ndarray, camera: Camera, pose: Pose
) -> tuple[np.ndarray, float] | None:
    """Project one world point to (pixel, depth); None if behind the camera."""
    uv, z = project_points(np.asarray(point, dtype=np.float64)[None, :], camera, pose)
    if z[0] <= EPS_Z:
        return None
    return uv[0], float(z[0])


def backproject_pixels(
    pixels: np.ndarray, depths: np.ndarray, camera: Camera, pose: Pose
) -> np.ndarray:
    """Lift pixels (N, 2) with camera-frame depths (N,) to world points (N, 3)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    x = (pixels[..., 0] - camera.cx) / camera.fx * depths
    y = (pixels[..., 1] - camera.cy) / camera.fy * depths
    pc = np.stack([x, y, depths], axis=-1)
    return (pc - pose.t) @ pose.R


def backproject(
    pixel: np.ndarray, depth: float, camera: Camera, pose: Pose
) -> np.ndarray:
    """Lift one pixel with a positive depth to a world point."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return backproject_pixels(
        np.asarray(pixel, dtype=np.float64)[None, :], np.array([depth]), camera, pose
    )[0]


def pose_error(estimate: Pose, reference: Pose) -> tuple[float, float]:
    """(translation error, rotation error in degrees) between two poses.

    Translation error is the distance between camera centers, which is
    invariant to the world-to-camera vs camera-to-world choice. Rotation
    error is the geodesic angle arccos((trace(R_e^T R_r) - 1) / 2).
    """
    trans = float(np.linalg.norm(estimate.camera_center() - reference.camera_center()))
    cos_angle = (np.trace(estimate.R.T @ reference.R) - 1.0) / 2.0
    rot = float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))
    return trans, rot


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula, with a series fallback near zero."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    W = _skew(omega)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp for rotation angles in [0, pi)."""
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * s
    if theta < np.pi - 1e-6:
        return theta * s / (2.0 * np.sin(theta))
    # Near pi the antisymmetric part vanishes; recover the axis from the
    # symmetric part, where (R + R^T)/2 = cos(t) I + (1 - cos(t)) a a^T.
    outer = np.eye(3) + (0.5 * (R + R.T) - np.eye(3)) / (1.0 - cos_theta)
    k = int(np.argmax(np.diag(outer)))
    axis = outer[:, k] / np.sqrt(max(outer[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ s < 0:
        axis = -axis
    return theta * axis


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a twist xi = (v, omega) onto a Pose."""
    xi = as_array(xi, "xi", np.float64, (6,))
    v, omega = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    W = _skew(omega)
    R = so3_exp(omega)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        B = (1.0 - np.cos(theta)) / (theta * theta)
        C = (theta - np.sin(theta)) / (theta**3)
        V = np.eye(3) + B * W + C * (W @ W)
    return Pose(R, V @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of se3_exp for rotation angles below pi."""
    omega = so3_log(pose.R)
    theta = float(np.linalg.norm(omega))
    W = _skew(omega)
    if theta < 1e-8:
        V_inv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        half = theta / 2.0
        cot_term = (1.0 - half * np.cos(half) / np.sin(half)) / (theta * theta)
        V_inv = np.eye(3) - 0.5 * W + cot_term * (W @ W)
    return np.concatenate([V_inv @ pose.t, omega])


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) in (w, x, y, z) order to rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def look_at_pose(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> Pose:
    """World-to-camera pose of a camera at `eye` whose +z axis points at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, forward)
    if np.linalg.norm(right) < 1e-9:
        # Up is parallel to the view direction; pick any perpendicular axis.
        alt = np.array([1.0, 0.0, 0.0])
        if abs(forward[0]) > 0.9:
            alt = np.array([0.0, 1.0, 0.0])
        right = np.cross(alt, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    return Pose(R, -R @ eye)
