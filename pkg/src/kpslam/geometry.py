"""Rigid-body transforms, pinhole projection, and crop/grid coordinate maps.

Conventions used throughout the library:

* A pose is a rotation matrix plus translation vector, mapping points from
  the source frame into the target frame: ``x_tgt = R @ x_src + t``.
* Tangent vectors are 6-dim, ordered ``[omega(3), rho(3)]`` -- rotation
  first.  Updates are applied on the left: ``T <- exp(xi) @ T``.
* Pixel coordinates are ``(u, v)`` with ``u`` along image columns (x) and
  ``v`` along rows (y).  A point is in-image when ``0 <= u < width`` and
  ``0 <= v < height``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidIntrinsics, NonPositiveDepth

MIN_DEPTH = 1e-6


def skew(v):
    """3x3 cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega):
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    k = skew(omega)
    if theta < 1e-2:
        # Taylor series of sin(t)/t and (1-cos(t))/t^2; the closed forms
        # cancel catastrophically for small t.
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation):
    """Inverse of :func:`so3_exp`; returns the axis-angle vector.

    The angle is in [0, pi].  At exactly pi the axis sign is a branch
    choice; the first nonzero component is made positive.
    """
    r = np.asarray(rotation, dtype=float)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return _vee(r - r.T) / 2.0 * (1.0 + theta * theta / 6.0)
    if np.pi - theta < 1e-6:
        # Near pi, r - r.T is tiny; recover the axis from the symmetric
        # part instead:  (r + r.T)/2 = cos(t) I + (1 - cos(t)) a a^T.
        outer = ((r + r.T) / 2.0 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        i = int(np.argmax(np.diag(outer)))
        axis = outer[:, i] / np.sqrt(max(outer[i, i], 1e-15))
        sin_part = _vee(r - r.T) / 2.0
        if np.linalg.norm(sin_part) > 1e-12:
            if sin_part @ axis < 0.0:
                axis = -axis
        else:
            nz = np.nonzero(np.abs(axis) > 1e-12)[0]
            if nz.size and axis[nz[0]] < 0.0:
                axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * _vee(r - r.T)


def _left_jacobian(omega):
    """V(omega) such that exp([omega, rho]) has translation V @ rho."""
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    k = skew(omega)
    if theta < 1e-2:
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * k + c * (k @ k)


def _left_jacobian_inv(omega):
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    k = skew(omega)
    if theta < 1e-2:
        c = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    else:
        c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta2
    return np.eye(3) - 0.5 * k + c * (k @ k)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as a 3x3 rotation and a 3-vector translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Composite transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform one (3,) point or an (N, 3) stack of points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def orthonormalized(self) -> "RigidTransform":
        """Project the rotation back onto SO(3) (nearest in Frobenius norm)."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0.0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return RigidTransform(r, self.translation)

    def rotation_deviation(self) -> float:
        """Max-abs entry of R^T R - I; an orthonormality health check."""
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Functional alias for :meth:`RigidTransform.compose`."""
    return a.compose(b)


def transform_point(t: RigidTransform, point):
    return t.apply(point)


def exp_map(xi) -> RigidTransform:
    """Exponential map from a [omega, rho] tangent vector to SE(3)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, rho = xi[:3], xi[3:]
    return RigidTransform(so3_exp(omega), _left_jacobian(omega) @ rho)


def log_map(t: RigidTransform) -> np.ndarray:
    """Inverse of :func:`exp_map`; rotation angle falls in [0, pi]."""
    omega = so3_log(t.rotation)
    rho = _left_jacobian_inv(omega) @ t.translation
    return np.concatenate([omega, rho])


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a (not necessarily unit) axis and angle in rad."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-9:
        raise ValueError("rotation axis must have nonzero norm")
    return so3_exp(axis / n * angle)


def rotation_to_quat(rotation) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix; w >= 0."""
    omega = so3_log(rotation)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = omega / theta
    q = np.concatenate([[np.cos(theta / 2.0)], np.sin(theta / 2.0) * axis])
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_rotation(quat) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion (normalized first)."""
    q = np.asarray(quat, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# Pinhole camera


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if min(self.fx, self.fy) <= 0.0 or min(self.width, self.height) <= 0:
            raise InvalidIntrinsics(
                f"fx={self.fx}, fy={self.fy}, size={self.width}x{self.height}"
            )

    def contains(self, uv) -> bool:
        u, v = np.asarray(uv, dtype=float)
        return bool(0.0 <= u < self.width and 0.0 <= v < self.height)


def project(cam: CameraModel, point_cam) -> np.ndarray:
    """Project one camera-frame point to (u, v) pixels.

    Raises:
        NonPositiveDepth: when z <= 1e-6 m.
    """
    x, y, z = np.asarray(point_cam, dtype=float)
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"depth {z:.3g} <= {MIN_DEPTH}")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def project_points(cam: CameraModel, points_cam):
    """Vectorized projection of an (N, 3) stack.

    Returns (uv, valid) where valid marks positive-depth points; rows of uv
    for invalid points are NaN instead of raising.
    """
    p = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    valid = z > MIN_DEPTH
    uv = np.full((p.shape[0], 2), np.nan)
    zs = np.where(valid, z, 1.0)
    uv[:, 0] = np.where(valid, cam.fx * p[:, 0] / zs + cam.cx, np.nan)
    uv[:, 1] = np.where(valid, cam.fy * p[:, 1] / zs + cam.cy, np.nan)
    return uv, valid


def projection_jacobian(cam: CameraModel, point_cam) -> np.ndarray:
    """2x3 Jacobian of project() w.r.t. the camera-frame point."""
    x, y, z = np.asarray(point_cam, dtype=float)
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"depth {z:.3g} <= {MIN_DEPTH}")
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )


def pose_point_jacobians(cam: CameraModel, pose: RigidTransform, point):
    """Projection of ``pose.apply(point)`` and its derivatives.

    Returns (uv, j_pose, j_point): j_pose is the 2x6 Jacobian w.r.t. a left
    tangent perturbation exp(xi) @ pose with xi = [omega, rho]; j_point is
    the 2x3 Jacobian w.r.t. the source-frame point.
    """
    q = pose.apply(point)
    dpi = projection_jacobian(cam, q)
    j_pose = np.hstack([dpi @ -skew(q), dpi])
    return project(cam, q), j_pose, dpi @ pose.rotation


# ---------------------------------------------------------------------------
# Bounding boxes and crop-grid coordinate maps


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box; (x0, y0) is the top-left corner."""

    x0: float
    y0: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0.0 or self.h <= 0.0:
            raise ValueError(f"degenerate box {self.w}x{self.h}")

    @classmethod
    def from_points(cls, uv, dilate: float = 0.0, min_size: float = 8.0):
        """Tight box around (N, 2) pixels, dilated by a relative margin.

        Each side is grown by ``dilate`` times its length, then inflated
        about its center to at least ``min_size`` pixels per side.
        """
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        lo = uv.min(axis=0)
        hi = uv.max(axis=0)
        size = hi - lo
        lo = lo - dilate * size
        hi = hi + dilate * size
        center = (lo + hi) / 2.0
        size = np.maximum(hi - lo, min_size)
        lo = center - size / 2.0
        return cls(lo[0], lo[1], size[0], size[1])

    def contains(self, uv) -> bool:
        u, v = np.asarray(uv, dtype=float)
        return bool(self.x0 <= u <= self.x0 + self.w and self.y0 <= v <= self.y0 + self.h)

    def contains_many(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        return (
            (uv[:, 0] >= self.x0)
            & (uv[:, 0] <= self.x0 + self.w)
            & (uv[:, 1] >= self.y0)
            & (uv[:, 1] <= self.y0 + self.h)
        )

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x0 + self.w / 2.0, self.y0 + self.h / 2.0])


@dataclass(frozen=True)
class CropMapping:
    """Affine map between full-image pixels and a crop's grid cells.

    The box is resampled onto a (grid_h, grid_w) lattice; grid coordinates
    are continuous with cell centers at integers, so grid (0, 0) sits half
    a cell inside the box corner.
    """

    box: BoundingBox
    grid_w: int
    grid_h: int

    @property
    def scale(self) -> np.ndarray:
        """Pixels per grid cell along (x, y)."""
        return np.array([self.box.w / self.grid_w, self.box.h / self.grid_h])

    def pixel_to_grid(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        origin = np.array([self.box.x0, self.box.y0])
        return (uv - origin) / self.scale - 0.5

    def grid_to_pixel(self, gxy) -> np.ndarray:
        gxy = np.asarray(gxy, dtype=float)
        origin = np.array([self.box.x0, self.box.y0])
        return origin + (gxy + 0.5) * self.scale

    def cov_grid_to_pixel(self, cov) -> np.ndarray:
        s = np.diag(self.scale)
        return s @ np.asarray(cov, dtype=float) @ s

    def cov_pixel_to_grid(self, cov) -> np.ndarray:
        s = np.diag(1.0 / self.scale)
        return s @ np.asarray(cov, dtype=float) @ s


# ---------------------------------------------------------------------------
# Serialization: flat JSON with the rotation as 9 row-major floats


def pose_to_json(t: RigidTransform) -> dict:
    return {
        "rotation": [float(x) for x in t.rotation.reshape(9)],
        "translation": [float(x) for x in t.translation],
    }


def pose_from_json(obj: dict) -> RigidTransform:
    r = np.asarray(obj["rotation"], dtype=float).reshape(3, 3)
    t = np.asarray(obj["translation"], dtype=float).reshape(3)
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0.0:
        raise ValueError("rotation field is not a proper rotation matrix")
    return RigidTransform(r, t)


def pose_to_string(t: RigidTransform) -> str:
    return json.dumps(pose_to_json(t), sort_keys=True)


def pose_from_string(s: str) -> RigidTransform:
    return pose_from_json(json.loads(s))
