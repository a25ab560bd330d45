"""Procedural dynamic scenes and an exact z-buffer renderer.

The renderer stands in for a generative video model: given a scene and a pose
sequence it produces RGB, metric depth, ground-truth flow and occlusion masks
that downstream reconstruction can be checked against.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, frozen
from .exceptions import ShapeMismatch
from .geometry import DepthMap, Intrinsics, Pose, _project_raw, rotation_about_axis

DELTA_OCC = 1e-3
NEAR = 1e-6
SPLAT_RADIUS = 1.0


# --------------------------------------------------------------------- motion


@dataclass(frozen=True, eq=False)
class ConstantVelocity:
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "velocity", frozen(as_float_array(self.velocity, (3,), "velocity")))

    def transform_at(self, tau):
        return Pose(np.eye(3), self.velocity * tau)

    def to_dict(self):
        return {"type": "constant_velocity", "velocity": self.velocity.tolist()}


@dataclass(frozen=True, eq=False)
class AxisRotation:
    axis: np.ndarray
    angular_speed: float
    center: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "axis", frozen(as_float_array(self.axis, (3,), "axis")))
        object.__setattr__(self, "center", frozen(as_float_array(self.center, (3,), "center")))
        if not np.isfinite(self.angular_speed):
            raise ValueError("angular_speed must be finite")

    def transform_at(self, tau):
        R = rotation_about_axis(self.axis, self.angular_speed * tau)
        return Pose(R, self.center - R @ self.center)

    def to_dict(self):
        return {
            "type": "axis_rotation",
            "axis": self.axis.tolist(),
            "angular_speed": float(self.angular_speed),
            "center": self.center.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Oscillation:
    direction: np.ndarray
    amplitude: float
    frequency: float

    def __post_init__(self):
        d = as_float_array(self.direction, (3,), "direction")
        if np.linalg.norm(d) == 0:
            raise ValueError("oscillation direction must be non-zero")
        object.__setattr__(self, "direction", frozen(d / np.linalg.norm(d)))
        if not (np.isfinite(self.amplitude) and np.isfinite(self.frequency)):
            raise ValueError("oscillation parameters must be finite")

    def transform_at(self, tau):
        return Pose(np.eye(3), self.amplitude * np.sin(2 * np.pi * self.frequency * tau) * self.direction)

    def to_dict(self):
        return {
            "type": "oscillation",
            "direction": self.direction.tolist(),
            "amplitude": float(self.amplitude),
            "frequency": float(self.frequency),
        }


_MOTIONS = {"constant_velocity": ConstantVelocity, "axis_rotation": AxisRotation, "oscillation": Oscillation}


def motion_from_dict(d):
    d = dict(d)
    return _MOTIONS[d.pop("type")](**d)


# ----------------------------------------------------------------- primitives


@dataclass(frozen=True, eq=False)
class PointCluster:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pts = as_float_array(self.points, (None, 3), "points")
        col = as_float_array(self.colors, (len(pts), 3), "colors")
        object.__setattr__(self, "points", frozen(pts))
        object.__setattr__(self, "colors", frozen(np.clip(col, 0.0, 1.0)))

    def vertices(self):
        return self.points

    def to_dict(self):
        return {"kind": "points", "points": self.points.tolist(), "colors": self.colors.tolist()}


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Flat-shaded triangles; ``colors`` has one RGB per face."""

    vertices_: np.ndarray
    faces: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        v = as_float_array(self.vertices_, (None, 3), "vertices")
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ShapeMismatch("face index out of range")
        col = as_float_array(self.colors, (len(f), 3), "colors")
        object.__setattr__(self, "vertices_", frozen(v))
        object.__setattr__(self, "faces", frozen(f))
        object.__setattr__(self, "colors", frozen(np.clip(col, 0.0, 1.0)))

    def vertices(self):
        return self.vertices_

    def to_dict(self):
        return {
            "kind": "mesh",
            "vertices": self.vertices_.tolist(),
            "faces": self.faces.tolist(),
            "colors": self.colors.tolist(),
        }


def quad(corners, color):
    """Two-triangle mesh for a planar quadrilateral given in order."""
    return TriangleMesh(np.asarray(corners, float), [[0, 1, 2], [0, 2, 3]], [color, color])


def geometry_from_dict(d):
    if d["kind"] == "points":
        return PointCluster(d["points"], d["colors"])
    return TriangleMesh(d["vertices"], d["faces"], d["colors"])


@dataclass(frozen=True, eq=False)
class DynamicPrimitive:
    geometry: object
    motion: object


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """A static background plus rigidly moving foreground primitives.

    Primitive ids number the static primitives first, then the dynamic ones.
    """

    static: tuple = ()
    dynamic: tuple = ()
    extent: np.ndarray = ((-10.0, -10.0, -10.0), (10.0, 10.0, 10.0))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "static", tuple(self.static))
        object.__setattr__(self, "dynamic", tuple(self.dynamic))
        ext = frozen(as_float_array(self.extent, (2, 3), "extent"))
        object.__setattr__(self, "extent", ext)
        for g in list(self.static) + [d.geometry for d in self.dynamic]:
            v = g.vertices()
            if len(v) and (np.any(v < ext[0]) or np.any(v > ext[1])):
                raise ValueError("scene geometry lies outside the declared extent")

    @property
    def n_primitives(self):
        return len(self.static) + len(self.dynamic)

    def motion_of(self, prim_id):
        k = prim_id - len(self.static)
        return self.dynamic[k].motion if k >= 0 else None

    def to_dict(self):
        return {
            "extent": self.extent.tolist(),
            "seed": int(self.seed),
            "static": [g.to_dict() for g in self.static],
            "dynamic": [{"geometry": d.geometry.to_dict(), "motion": d.motion.to_dict()} for d in self.dynamic],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            static=[geometry_from_dict(g) for g in d.get("static", [])],
            dynamic=[
                DynamicPrimitive(geometry_from_dict(x["geometry"]), motion_from_dict(x["motion"]))
                for x in d.get("dynamic", [])
            ],
            extent=d["extent"],
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True, eq=False)
class SceneState:
    """World-frame snapshot of a scene at one frame index, flattened to arrays."""

    time: int
    tau: float
    points: np.ndarray
    point_colors: np.ndarray
    point_prim: np.ndarray
    triangles: np.ndarray
    tri_colors: np.ndarray
    tri_prim: np.ndarray
    dynamic_prims: np.ndarray

    @property
    def point_dynamic(self):
        return self.dynamic_prims[self.point_prim] if len(self.point_prim) else np.zeros(0, bool)

    @property
    def tri_dynamic(self):
        return self.dynamic_prims[self.tri_prim] if len(self.tri_prim) else np.zeros(0, bool)


def _transform(pose, pts):
    return pts @ pose.rotation.T + pose.translation if len(pts) else pts


def scene_state_at(spec, t, fps=8.0):
    """Evaluate every motion model at time ``t / fps`` seconds."""
    if t < 0:
        raise ValueError("frame index must be non-negative")
    tau = t / fps
    pts, pcol, pprim, tris, tcol, tprim = [], [], [], [], [], []
    entries = [(g, None) for g in spec.static] + [(d.geometry, d.motion) for d in spec.dynamic]
    for pid, (g, motion) in enumerate(entries):
        M = motion.transform_at(tau) if motion is not None else None
        if isinstance(g, PointCluster):
            p = g.points if M is None else _transform(M, g.points)
            pts.append(p)
            pcol.append(g.colors)
            pprim.append(np.full(len(p), pid))
        else:
            v = g.vertices_ if M is None else _transform(M, g.vertices_)
            tris.append(v[g.faces])
            tcol.append(g.colors)
            tprim.append(np.full(len(g.faces), pid))
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    dyn = np.array([False] * len(spec.static) + [True] * len(spec.dynamic), dtype=bool)
    return SceneState(
        time=t,
        tau=tau,
        points=cat(pts, (0, 3)),
        point_colors=cat(pcol, (0, 3)),
        point_prim=cat(pprim, (0,)).astype(np.int64),
        triangles=cat(tris, (0, 3, 3)),
        tri_colors=cat(tcol, (0, 3)),
        tri_prim=cat(tprim, (0,)).astype(np.int64),
        dynamic_prims=dyn,
    )


def state_from_cloud(cloud, time=0):
    """Wrap a point cloud as a static scene state so it can be rendered."""
    n = len(cloud)
    return SceneState(
        time=time,
        tau=0.0,
        points=cloud.points,
        point_colors=cloud.colors,
        point_prim=np.zeros(n, np.int64),
        triangles=np.zeros((0, 3, 3)),
        tri_colors=np.zeros((0, 3)),
        tri_prim=np.zeros(0, np.int64),
        dynamic_prims=np.array([False]),
    )


# ------------------------------------------------------------------ rendering


@dataclass(frozen=True, eq=False)
class Frame:
    """One rendered observation.

    ``dynamic`` and ``primitive`` are oracle metadata: the ground-truth
    dynamic flag and primitive id of the surface seen at each pixel (-1 for
    background).
    """

    rgb: np.ndarray
    depth: DepthMap
    pose: Pose
    time: int
    intrinsics: Intrinsics
    dynamic: np.ndarray = None
    primitive: np.ndarray = None

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.shape != self.depth.shape + (3,):
            raise ShapeMismatch("rgb and depth grids differ")
        if not np.all(np.isfinite(rgb)):
            raise ValueError("rgb must be finite")
        object.__setattr__(self, "rgb", frozen(rgb))
        H, W = self.depth.shape
        dyn = np.zeros((H, W), bool) if self.dynamic is None else np.asarray(self.dynamic, bool)
        prim = np.full((H, W), -1, np.int64) if self.primitive is None else np.asarray(self.primitive, np.int64)
        object.__setattr__(self, "dynamic", frozen(dyn))
        object.__setattr__(self, "primitive", frozen(prim))


@dataclass
class _Buffers:
    depth: np.ndarray  # (H, W), inf where empty
    coords: np.ndarray  # (H, W, 2) sub-pixel sample location
    color: np.ndarray  # (H, W, 3)
    world: np.ndarray  # (H, W, 3) exact world point of the sample
    prim: np.ndarray  # (H, W) primitive id, -1 where empty
    element: np.ndarray  # (H, W) point index (>= 0) or -(triangle index) - 1

    @property
    def valid(self):
        return np.isfinite(self.depth)


def _point_candidates(state, pose, K):
    P = state.points
    if not len(P):
        return None
    uv, z = _project_raw(P, pose, K)
    keep = (z > NEAR) & K.in_domain(uv[:, 0], uv[:, 1])
    idx = np.nonzero(keep)[0]
    uv, z = uv[keep], z[keep]
    base = np.rint(uv).astype(np.int64)
    cands = []
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            pu = base[:, 0] + du
            pv = base[:, 1] + dv
            d2 = (pu - uv[:, 0]) ** 2 + (pv - uv[:, 1]) ** 2
            ok = (d2 < SPLAT_RADIUS**2) & (pu >= 0) & (pu < K.width) & (pv >= 0) & (pv < K.height)
            cands.append((pv[ok] * K.width + pu[ok], z[ok], uv[ok], idx[ok]))
    pix = np.concatenate([c[0] for c in cands])
    zz = np.concatenate([c[1] for c in cands])
    cc = np.concatenate([c[2] for c in cands])
    ii = np.concatenate([c[3] for c in cands])
    return pix, zz, cc, P[ii], state.point_colors[ii], state.point_prim[ii], ii


def _triangle_candidates(state, pose, K):
    if not len(state.triangles):
        return None
    out = []
    for k, tri in enumerate(state.triangles):
        Vc = tri @ pose.rotation.T + pose.translation
        if np.any(Vc[:, 2] <= NEAR):
            continue  # no near-plane clipping
        p2 = np.stack([K.fx * Vc[:, 0] / Vc[:, 2] + K.cx, K.fy * Vc[:, 1] / Vc[:, 2] + K.cy], axis=1)
        area = (p2[1, 0] - p2[0, 0]) * (p2[2, 1] - p2[0, 1]) - (p2[2, 0] - p2[0, 0]) * (p2[1, 1] - p2[0, 1])
        if abs(area) < 1e-12:
            continue
        u0 = max(int(np.ceil(p2[:, 0].min())), 0)
        u1 = min(int(np.floor(p2[:, 0].max())), K.width - 1)
        v0 = max(int(np.ceil(p2[:, 1].min())), 0)
        v1 = min(int(np.floor(p2[:, 1].max())), K.height - 1)
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.meshgrid(np.arange(v0, v1 + 1), np.arange(u0, u1 + 1), indexing="ij")
        uu = uu.ravel().astype(np.float64)
        vv = vv.ravel().astype(np.float64)
        s = np.sign(area)
        inside = np.ones(uu.shape, bool)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            e = (p2[b, 0] - p2[a, 0]) * (vv - p2[a, 1]) - (p2[b, 1] - p2[a, 1]) * (uu - p2[a, 0])
            inside &= s * e >= 0
        if not inside.any():
            continue
        uu, vv = uu[inside], vv[inside]
        rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=1)
        n = np.cross(Vc[1] - Vc[0], Vc[2] - Vc[0])
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (n @ Vc[0]) / denom
        ok = np.isfinite(z) & (z > NEAR)
        if not ok.any():
            continue
        uu, vv, z, rays = uu[ok], vv[ok], z[ok], rays[ok]
        cam = rays * z[:, None]
        world = (cam - pose.translation) @ pose.rotation
        m = len(z)
        out.append(
            (
                vv.astype(np.int64) * K.width + uu.astype(np.int64),
                z,
                np.stack([uu, vv], axis=1),
                world,
                np.repeat(state.tri_colors[k][None], m, 0),
                np.full(m, state.tri_prim[k]),
                np.full(m, -k - 1),
            )
        )
    if not out:
        return None
    return tuple(np.concatenate([o[i] for o in out]) for i in range(7))


def _rasterize(state, pose, K):
    H, W = K.height, K.width
    cands = [c for c in (_point_candidates(state, pose, K), _triangle_candidates(state, pose, K)) if c is not None]
    buf = _Buffers(
        depth=np.full(H * W, np.inf),
        coords=K.pixel_centers().reshape(-1, 2),
        color=np.zeros((H * W, 3)),
        world=np.zeros((H * W, 3)),
        prim=np.full(H * W, -1, np.int64),
        element=np.full(H * W, np.iinfo(np.int64).min, np.int64),
    )
    if cands:
        pix, z, uv, world, col, prim, elem = (np.concatenate([c[i] for c in cands]) for i in range(7))
        order = np.lexsort((np.arange(len(z)), z, pix))
        pix_s = pix[order]
        first = order[np.unique(pix_s, return_index=True)[1]]
        p = pix[first]
        buf.depth[p] = z[first]
        buf.coords[p] = uv[first]
        buf.color[p] = col[first]
        buf.world[p] = world[first]
        buf.prim[p] = prim[first]
        buf.element[p] = elem[first]
    return _Buffers(
        buf.depth.reshape(H, W),
        buf.coords.reshape(H, W, 2),
        buf.color.reshape(H, W, 3),
        buf.world.reshape(H, W, 3),
        buf.prim.reshape(H, W),
        buf.element.reshape(H, W),
    )


def render_frame(state, pose, K):
    """Z-buffered rendering of ``state`` from ``pose``.

    Points splat onto every pixel whose centre lies strictly within one pixel
    of their projection; triangles cover the pixel centres inside them. Empty
    pixels are black with invalid depth.
    """
    buf = _rasterize(state, pose, K)
    valid = buf.valid
    depth = DepthMap(np.where(valid, buf.depth, 0.0), valid, buf.coords)
    dyn = np.zeros(valid.shape, bool)
    dyn[valid] = state.dynamic_prims[buf.prim[valid]]
    return Frame(buf.color, depth, pose, state.time, K, dynamic=dyn, primitive=buf.prim)


def render_sequence(spec, poses, K, fps=8.0):
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    return [render_frame(scene_state_at(spec, t, fps), P, K) for t, P in enumerate(poses)]


def visible_elements(state, pose, K):
    """Indices of the scene points that win at least one pixel."""
    e = _rasterize(state, pose, K).element
    return np.unique(e[e >= 0])


# ----------------------------------------------------------- flow, occlusion


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement ``(du, dv)`` from frame t to t+1."""

    flow: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flow, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if f.shape != v.shape + (2,):
            raise ShapeMismatch("flow must be (H, W, 2) with an (H, W) mask")
        v = v & np.all(np.isfinite(f), axis=-1)
        object.__setattr__(self, "flow", frozen(np.where(v[..., None], f, 0.0)))
        object.__setattr__(self, "valid", frozen(v))

    @property
    def shape(self):
        return self.valid.shape


def _occluded(buf, elements, uv, z, K, delta):
    # Depth test against the z-buffer at the nearest pixel. The test is only
    # trusted when another element owns that pixel: a triangle that owns it is
    # visible however steep its slope, and a splatted point that wins any pixel
    # of the other view is visible even when a neighbour owns its nearest one.
    pu = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, K.width - 1)
    pv = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, K.height - 1)
    ref = buf.depth[pv, pu]
    hidden = np.isfinite(ref) & (z > ref + delta)
    hidden &= buf.element[pv, pu] != elements
    winners = buf.element[buf.valid]
    wins = (elements >= 0) & np.isin(elements, winners[winners >= 0])
    return hidden & ~wins


def flow_gt(spec, pose_t, pose_t1, K, t, fps=8.0, delta_occ=DELTA_OCC):
    """Ground-truth flow of the surface seen at each pixel of frame ``t``."""
    s0 = scene_state_at(spec, t, fps)
    s1 = scene_state_at(spec, t + 1, fps)
    b0 = _rasterize(s0, pose_t, K)
    b1 = _rasterize(s1, pose_t1, K)
    valid = b0.valid.copy()
    X = b0.world[valid]
    prim = b0.prim[valid]
    for pid in np.unique(prim):
        motion = spec.motion_of(int(pid))
        if motion is None:
            continue
        sel = prim == pid
        M0 = motion.transform_at(s0.tau)
        M1 = motion.transform_at(s1.tau)
        # X1 = M1 M0^{-1} X
        X0 = (X[sel] - M0.translation) @ M0.rotation
        X[sel] = X0 @ M1.rotation.T + M1.translation
    uv1, z1 = _project_raw(X, pose_t1, K)
    ok = (z1 > 0) & K.in_domain(uv1[:, 0], uv1[:, 1])
    ok &= ~_occluded(b1, b0.element[valid], np.where(ok[:, None], uv1, 0.0), z1, K, delta_occ)
    flow = np.zeros(valid.shape + (2,))
    flow[valid] = uv1 - b0.coords[valid]
    vmask = np.zeros(valid.shape, bool)
    vmask[valid] = ok
    return FlowField(flow, vmask)


def occlusion_mask(state, pose_a, pose_b, K, delta_occ=DELTA_OCC):
    """Pixels of view ``a`` whose surface is hidden or out of frame in view ``b``."""
    ba = _rasterize(state, pose_a, K)
    bb = _rasterize(state, pose_b, K)
    valid = ba.valid
    X = ba.world[valid]
    uv, z = _project_raw(X, pose_b, K)
    out = ~((z > 0) & K.in_domain(uv[:, 0], uv[:, 1]))
    occ = _occluded(bb, ba.element[valid], np.where(out[:, None], 0.0, uv), z, K, delta_occ) & ~out
    mask = np.zeros(valid.shape, bool)
    mask[valid] = out | occ
    return mask


# ------------------------------------------------------- procedural builders


def surface_texture(points, base, amplitude=0.15, wavelength=1.0, phase=0.0):
    """Spatially coherent albedo: ``base`` modulated by low-frequency sinusoids of position."""
    k = 2 * np.pi / wavelength
    p = np.asarray(points, dtype=np.float64)
    mod = np.stack(
        [
            np.sin(k * p[:, 0] + phase),
            np.sin(k * p[:, 1] + 2.0 * phase + 1.0),
            np.sin(k * (p[:, 0] + p[:, 2]) + 3.0 * phase + 2.0),
        ],
        axis=1,
    )
    return np.clip(np.asarray(base) + amplitude * mod, 0.05, 0.95)


def make_static_scene(n_points=500, seed=0):
    """Textured box and sphere side by side, about a metre across."""
    rng = np.random.default_rng(seed)
    n_box = n_points // 2
    face = rng.integers(0, 6, n_box)
    box = rng.uniform(-0.3, 0.3, (n_box, 3))
    box[np.arange(n_box), face // 2] = np.where(face % 2 == 0, -0.3, 0.3)
    box += np.array([-0.35, 0.0, 0.0])
    n_sph = n_points - n_box
    d = rng.standard_normal((n_sph, 3))
    sph = d / np.linalg.norm(d, axis=1, keepdims=True) * 0.25 + np.array([0.45, 0.05, 0.0])
    return SceneSpec(
        static=[
            PointCluster(box, surface_texture(box, [0.8, 0.3, 0.2])),
            PointCluster(sph, surface_texture(sph, [0.2, 0.5, 0.8], phase=0.7)),
        ],
        extent=[[-1.5] * 3, [1.5] * 3],
        seed=seed,
    )


def make_dynamic_scene(seed=0, n_background=1500, n_cluster=300, velocity=(0.5, 0.0, 0.0)):
    """Static back wall and floor with one moving sphere-shaped cluster."""
    rng = np.random.default_rng(seed)
    n_wall = n_background * 2 // 3
    wall = np.column_stack([rng.uniform(-1.2, 1.2, n_wall), rng.uniform(-1.0, 0.6, n_wall), np.full(n_wall, 1.0)])
    n_floor = n_background - n_wall
    floor = np.column_stack([rng.uniform(-1.2, 1.2, n_floor), np.full(n_floor, 0.6), rng.uniform(-0.8, 1.0, n_floor)])
    d = rng.standard_normal((n_cluster, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ball = d * 0.2 + np.array([-0.5, 0.1, -0.6])
    return SceneSpec(
        static=[
            PointCluster(wall, surface_texture(wall, [0.7, 0.7, 0.6])),
            PointCluster(floor, surface_texture(floor, [0.4, 0.3, 0.2], phase=1.3)),
        ],
        dynamic=[DynamicPrimitive(PointCluster(ball, surface_texture(ball, [0.9, 0.2, 0.2], phase=2.1)), ConstantVelocity(velocity))],
        extent=[[-2.0] * 3, [2.0] * 3],
        seed=seed,
    )
