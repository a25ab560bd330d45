"""Canonical camera paths and reprojection-based pose refinement."""

import enum
import json
import re
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import as_float_array
from .exceptions import (
    BehindCamera,
    DegenerateOrbit,
    InsufficientLandmarks,
    SingularNormalEquations,
    UnknownMotion,
)
from .geometry import Pose, compose, invert, rotation_about_axis


class MotionType(enum.IntEnum):
    """The closed vocabulary of camera motions. Values are class indices."""

    ZoomIn = 0
    ZoomOut = 1
    TurnLeft = 2
    TurnRight = 3
    Orbit = 4
    Stationary = 5
    LookUp = 6
    LookDown = 7

    @classmethod
    def parse(cls, label):
        """Accept ``"ZoomIn"``, ``"zoom-in"``, ``"zoom_in"``, ``"zoom in"`` or an index."""
        if isinstance(label, cls):
            return label
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            try:
                return cls(int(label))
            except ValueError:
                raise UnknownMotion(f"no motion with index {label}") from None
        key = re.sub(r"[\s_\-]", "", str(label)).lower()
        for m in cls:
            if m.name.lower() == key:
                return m
        raise UnknownMotion(f"unknown motion label {label!r}")

    @property
    def slug(self):
        return re.sub(r"(?<!^)(?=[A-Z])", "-", self.name).lower()


DEFAULT_MAGNITUDE = {
    MotionType.ZoomIn: 1.0,
    MotionType.ZoomOut: 1.0,
    MotionType.TurnLeft: 0.5,
    MotionType.TurnRight: 0.5,
    MotionType.LookUp: 0.5,
    MotionType.LookDown: 0.5,
    MotionType.Orbit: 2 * np.pi,
    MotionType.Stationary: 0.0,
}


@dataclass(frozen=True, eq=False)
class TrajectoryParams:
    """Inputs of :func:`generate_trajectory`.

    ``magnitude`` is metres for zooms and total sweep in radians for turns,
    looks and orbits; ``None`` selects the per-motion default.
    """

    frame_count: int
    initial_pose: Pose
    pivot: np.ndarray = (0.0, 0.0, 0.0)
    magnitude: float = None

    def __post_init__(self):
        if int(self.frame_count) != self.frame_count or self.frame_count < 1:
            raise ValueError("frame_count must be a positive integer")
        object.__setattr__(self, "frame_count", int(self.frame_count))
        object.__setattr__(self, "pivot", as_float_array(self.pivot, (3,), "pivot"))
        if self.magnitude is not None and not np.isfinite(self.magnitude):
            raise ValueError("magnitude must be finite")


def _fractions(T):
    if T == 1:
        return np.zeros(1)
    return np.arange(T) / (T - 1)


def _rotate_in_place(P0, R_rel):
    # camera centre unchanged, camera axes rotated by R_rel (expressed in the camera frame)
    R = R_rel @ P0.rotation
    return Pose(R, -R @ P0.center)


def generate_trajectory(motion, params):
    """Return the list of ``T`` poses for ``motion``; ``pose[0]`` is the initial pose.

    Kinematics: zooms translate along the initial optical axis, turns yaw about
    the camera Y axis in place, looks pitch about the camera X axis in place,
    and an orbit rigidly rotates the initial camera about the vertical axis
    (camera up) through ``pivot``.
    """
    motion = MotionType.parse(motion)
    P0 = params.initial_pose
    m = DEFAULT_MAGNITUDE[motion] if params.magnitude is None else float(params.magnitude)
    s = _fractions(params.frame_count)

    if motion is MotionType.Stationary:
        return [P0 for _ in s]

    if motion in (MotionType.ZoomIn, MotionType.ZoomOut):
        sign = 1.0 if motion is MotionType.ZoomIn else -1.0
        c0, axis = P0.center, P0.optical_axis
        return [Pose(P0.rotation, -P0.rotation @ (c0 + sign * si * m * axis)) for si in s]

    if motion in (MotionType.TurnLeft, MotionType.TurnRight):
        # positive yaw about camera +Y swings the optical axis toward -X (left)
        sign = 1.0 if motion is MotionType.TurnLeft else -1.0
        return [_rotate_in_place(P0, rotation_about_axis([0, 1, 0], sign * si * m)) for si in s]

    if motion in (MotionType.LookUp, MotionType.LookDown):
        # negative pitch about camera +X swings the optical axis toward -Y (up in the image)
        sign = -1.0 if motion is MotionType.LookUp else 1.0
        return [_rotate_in_place(P0, rotation_about_axis([1, 0, 0], sign * si * m)) for si in s]

    # Orbit
    pivot = params.pivot
    if np.linalg.norm(P0.center - pivot) < 1e-9:
        raise DegenerateOrbit("orbit pivot coincides with the camera centre")
    up = -P0.rotation[1]
    poses = []
    for si in s:
        Rw = rotation_about_axis(up, si * m)
        # world motion x -> Rw (x - pivot) + pivot; the camera follows it
        M = Pose(Rw, pivot - Rw @ pivot)
        poses.append(P0 if si == 0 else compose(P0, invert(M)))
    return poses


def trajectory_to_json(poses):
    return json.dumps(
        [{"t": i, **p.to_dict()} for i, p in enumerate(poses)], indent=2
    )


def trajectory_from_json(text):
    items = sorted(json.loads(text), key=lambda d: d["t"])
    return [Pose.from_dict(d) for d in items]


def reprojection_residuals(pose, world_points, pixels, K):
    xc = world_points @ pose.rotation.T + pose.translation
    uv = np.stack([K.fx * xc[:, 0] / xc[:, 2] + K.cx, K.fy * xc[:, 1] / xc[:, 2] + K.cy], axis=1)
    return (uv - pixels).ravel(), xc


def _rms(r):
    return float(np.sqrt(np.mean(r**2) * 2)) if r.size else 0.0


def _jacobian(xc, K):
    # d(u, v) / d(rho, phi) for the left perturbation x_c -> exp(phi) x_c + rho
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    n = len(z)
    J = np.zeros((n, 2, 6))
    iz, iz2 = 1.0 / z, 1.0 / z**2
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * x * iz2
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * y * iz2
    # d x_c / d phi = -[x_c]_x
    J[:, 0, 3] = -K.fx * x * y * iz2
    J[:, 0, 4] = K.fx * (1 + x**2 * iz2)
    J[:, 0, 5] = -K.fx * y * iz
    J[:, 1, 3] = -K.fy * (1 + y**2 * iz2)
    J[:, 1, 4] = K.fy * x * y * iz2
    J[:, 1, 5] = K.fy * x * iz
    return J.reshape(2 * n, 6)


def refine_pose(initial, world_points, pixels, K, max_iters=20, tol=1e-12, damping=1e-8, max_cond=1e12):
    """Gauss-Newton pose refinement on the se(3) tangent.

    Args:
        initial: starting :class:`Pose`.
        world_points: (N, 3) landmark positions.
        pixels: (N, 2) observed image locations.
        K: camera intrinsics.

    Returns:
        ``(pose, rms, iterations)`` where ``rms`` is the root-mean-square
        reprojection error in pixels (per 2-D residual).

    A step is only accepted if it does not increase the error (halving it up
    to ten times), so the returned error never exceeds the initial one.
    """
    X = as_float_array(world_points, (None, 3), "world_points")
    uv = as_float_array(pixels, (len(X), 2), "pixels")
    if len(X) < 3:
        raise InsufficientLandmarks(f"need at least 3 landmarks, got {len(X)}")

    pose = initial
    r, xc = reprojection_residuals(pose, X, uv, K)
    if np.any(xc[:, 2] <= 0):
        raise BehindCamera("landmark behind the initial camera")
    err = _rms(r)
    it = 0
    for it in range(1, max_iters + 1):
        J = _jacobian(xc, K)
        A = J.T @ J + damping * np.eye(6)
        if np.linalg.cond(A) > max_cond:
            raise SingularNormalEquations("landmark geometry does not constrain all six pose parameters")
        delta = -np.linalg.solve(A, J.T @ r)
        step = 1.0
        for _ in range(10):
            d = step * delta
            dR = Rotation.from_rotvec(d[3:]).as_matrix()
            cand = Pose(dR @ pose.rotation, dR @ pose.translation + d[:3])
            r_new, xc_new = reprojection_residuals(cand, X, uv, K)
            if np.all(xc_new[:, 2] > 0) and _rms(r_new) <= err:
                break
            step *= 0.5
        else:
            break
        pose, r, xc, err = cand, r_new, xc_new, _rms(r_new)
        if np.linalg.norm(d) < tol:
            break
    return pose, err, it
