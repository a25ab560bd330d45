"""Rigid transforms, the pinhole camera, and point-cloud containers.

Conventions used everywhere in the package:

* right-handed camera frame, +Z forward, image ``u`` to the right and ``v`` down;
* a :class:`Pose` maps world to camera, ``x_cam = R @ x_world + t``;
* depth is the camera-frame ``z`` coordinate, not the ray length;
* pixel ``(row, col)`` has its centre at ``(u, v) = (col, row)``; the image
  domain is ``[-0.5, W - 0.5) x [-0.5, H - 0.5)``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import as_float_array, as_points, frozen
from .exceptions import (
    BehindCamera,
    DegenerateDirection,
    InvalidIntrinsics,
    InvalidPose,
    NonFinite,
    NonPositiveDepth,
    OutOfDomain,
    ShapeMismatch,
)

ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform ``[R | t]``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = as_float_array(self.rotation, (3, 3), "rotation")
        t = as_float_array(self.translation, (3,), "translation")
        err = np.max(np.abs(R.T @ R - np.eye(3)))
        det = np.linalg.det(R)
        if err >= ORTHO_TOL or abs(det - 1.0) >= ORTHO_TOL:
            raise InvalidPose(
                f"rotation not in SO(3): |R^T R - I|_inf={err:.3g}, det={det:.12g}"
            )
        object.__setattr__(self, "rotation", frozen(R))
        object.__setattr__(self, "translation", frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M, orthonormalize=False):
        """Build from a 3x4 or 4x4 matrix.

        With ``orthonormalize`` the rotation block is projected onto SO(3)
        first (useful for poses parsed from low-precision text).
        """
        M = as_float_array(M, name="pose matrix")
        if M.shape not in ((3, 4), (4, 4)):
            raise ShapeMismatch(f"pose matrix must be 3x4 or 4x4, got {M.shape}")
        R = M[:3, :3]
        if orthonormalize:
            U, _, Vt = np.linalg.svd(R)
            R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
        return cls(R, M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation):
        R = Rotation.from_rotvec(as_float_array(rotvec, (3,), "rotvec")).as_matrix()
        return cls(R, translation)

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def center(self):
        """Camera centre in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self):
        """Camera +Z axis expressed in world coordinates."""
        return self.rotation[2].copy()

    def apply(self, points):
        """Map world points (N, 3) into the camera frame."""
        return as_points(points) @ self.rotation.T + self.translation

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, rtol=0, atol=atol) and np.allclose(
            self.translation, other.translation, rtol=0, atol=atol
        )

    def to_dict(self):
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.reshape(d["rotation"], (3, 3)), d["translation"])

    def __repr__(self):
        return f"Pose(rotvec={Rotation.from_matrix(self.rotation).as_rotvec()}, t={self.translation})"


def compose(a, b):
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p):
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def relative_rotation_error(a, b):
    """Frobenius norm of the rotation difference."""
    return float(np.linalg.norm(a.rotation - b.rotation))


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Pose of a camera at ``eye`` whose optical axis points at ``target``.

    ``up`` fixes the roll: the camera +Y axis (image down) is the component of
    ``up`` orthogonal to the viewing direction. With ``eye=(0, 0, -1)``,
    ``target=0`` and ``up=+Y`` this yields the identity rotation.
    """
    eye = as_float_array(eye, (3,), "eye")
    target = as_float_array(target, (3,), "target")
    up = as_float_array(up, (3,), "up")
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise DegenerateDirection("eye and target coincide")
    z = fwd / n
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9 * max(1.0, np.linalg.norm(up)):
        raise DegenerateDirection("up is parallel to the viewing direction")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ eye)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise NonFinite("intrinsics contain NaN or Inf")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsics("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvalidIntrinsics("image size must be integral")
        if self.width <= 0 or self.height <= 0:
            raise InvalidIntrinsics("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsics("principal point outside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_fov(cls, width, height, fov_x):
        """Centred intrinsics with square pixels and horizontal FOV in radians."""
        f = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self):
        return (self.height, self.width)

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def in_domain(self, u, v):
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)

    def pixel_centers(self):
        """(H, W, 2) array of pixel-centre coordinates ``(u, v)``."""
        vv, uu = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([uu, vv], axis=-1).astype(np.float64)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _project_raw(points_world, pose, K):
    xc = points_world @ pose.rotation.T + pose.translation
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * xc[:, 0] / z + K.cx
        v = K.fy * xc[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def project_points(points_world, pose, K):
    """Project world points (N, 3). Returns ``(uv (N, 2), depth (N,))``.

    Raises:
        BehindCamera: if any point has camera-frame ``z <= 0``.
    """
    pts = as_points(points_world)
    uv, z = _project_raw(pts, pose, K)
    if np.any(z <= 0):
        raise BehindCamera(f"{int(np.sum(z <= 0))} point(s) at or behind the camera")
    return uv, z


def project(point_world, pose, K):
    """Project a single world point; returns ``(u, v, depth)``."""
    uv, z = project_points(as_float_array(point_world, (3,), "point"), pose, K)
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def backproject_pixels(uv, depth, pose, K, check_domain=True):
    """Lift pixels (N, 2) with metric z-depth (N,) to world points (N, 3)."""
    uv = as_float_array(uv, (None, 2), "uv")
    d = as_float_array(depth, (uv.shape[0],), "depth")
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be strictly positive")
    if check_domain and not np.all(K.in_domain(uv[:, 0], uv[:, 1])):
        raise OutOfDomain("pixel outside the image domain")
    xc = np.empty((len(d), 3))
    xc[:, 0] = (uv[:, 0] - K.cx) * d / K.fx
    xc[:, 1] = (uv[:, 1] - K.cy) * d / K.fy
    xc[:, 2] = d
    # world = R^T (x_cam - t)
    return (xc - pose.translation) @ pose.rotation


def backproject(u, v, d, pose, K):
    """Lift one pixel with depth ``d`` into the world frame."""
    return backproject_pixels([[u, v]], [d], pose, K)[0]


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric z-depth on the pixel grid.

    ``coords`` holds the sub-pixel image location each depth sample was taken
    at; it defaults to the pixel centres. Renderers that splat points record
    the exact projected location here so back-projection is lossless.
    """

    values: np.ndarray
    valid: np.ndarray
    coords: np.ndarray = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if vals.ndim != 2 or valid.shape != vals.shape:
            raise ShapeMismatch("depth values and validity mask must be matching 2-D grids")
        good = vals[valid]
        if not np.all(np.isfinite(good)) or np.any(good <= 0):
            raise NonPositiveDepth("valid depth samples must be finite and positive")
        if self.coords is None:
            H, W = vals.shape
            vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
            coords = np.stack([uu, vv], axis=-1).astype(np.float64)
        else:
            coords = np.asarray(self.coords, dtype=np.float64)
            if coords.shape != vals.shape + (2,):
                raise ShapeMismatch("coords must have shape (H, W, 2)")
        object.__setattr__(self, "values", frozen(np.where(valid, vals, 0.0)))
        object.__setattr__(self, "valid", frozen(valid))
        object.__setattr__(self, "coords", frozen(coords))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class PointCloud:
    """World-frame points with colour, frame of origin and a dynamic flag."""

    points: np.ndarray
    colors: np.ndarray = None
    source_frame: np.ndarray = None
    dynamic: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise NonFinite("point coordinates must be finite")
        n = len(pts)
        colors = np.full((n, 3), 0.5) if self.colors is None else np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        src = np.zeros(n, dtype=np.int64) if self.source_frame is None else np.asarray(self.source_frame, dtype=np.int64).reshape(-1)
        dyn = np.zeros(n, dtype=bool) if self.dynamic is None else np.asarray(self.dynamic, dtype=bool).reshape(-1)
        if not (len(colors) == len(src) == len(dyn) == n):
            raise ShapeMismatch("point-cloud attribute lengths differ")
        object.__setattr__(self, "points", frozen(pts))
        object.__setattr__(self, "colors", frozen(colors))
        object.__setattr__(self, "source_frame", frozen(src))
        object.__setattr__(self, "dynamic", frozen(dyn))

    def __len__(self):
        return len(self.points)

    def subset(self, mask):
        return PointCloud(self.points[mask], self.colors[mask], self.source_frame[mask], self.dynamic[mask])

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, clouds):
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.source_frame for c in clouds]),
            np.concatenate([c.dynamic for c in clouds]),
        )


def transform_cloud(cloud, pose):
    """Apply a rigid transform to every point; attributes are carried over."""
    return PointCloud(pose.apply(cloud.points) if len(cloud) else cloud.points, cloud.colors, cloud.source_frame, cloud.dynamic)


def rotation_about_axis(axis, angle):
    axis = as_float_array(axis, (3,), "axis")
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise DegenerateDirection("rotation axis has zero length")
    return Rotation.from_rotvec(axis / n * angle).as_matrix()
