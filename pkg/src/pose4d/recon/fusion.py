"""Back-projection of depth frames and fusion into a shared world frame."""

from dataclasses import dataclass

import numpy as np

from ..exceptions import EmptyDepth, EmptyInput
from ..geometry import PointCloud, backproject_pixels

VOXEL_SIZE = 1e-3


def back_project_frame(frame, dynamic_mask=None):
    """World-frame cloud with one point per valid depth pixel.

    ``dynamic_mask`` (H x W) sets the per-point dynamic flag; by default all
    points are static.
    """
    depth = frame.depth
    valid = depth.valid
    if not valid.any():
        raise EmptyDepth(f"frame {frame.time} has no valid depth")
    pts = backproject_pixels(depth.coords[valid], depth.values[valid], frame.pose, frame.intrinsics)
    dyn = np.zeros(int(valid.sum()), bool) if dynamic_mask is None else np.asarray(dynamic_mask, bool)[valid]
    return PointCloud(pts, frame.rgb[valid], np.full(len(pts), frame.time), dyn)


def voxel_dedup(cloud, voxel=VOXEL_SIZE):
    """Keep the first point (in input order) of every occupied voxel."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return cloud.subset(np.sort(first))


@dataclass(frozen=True, eq=False)
class FusedScene:
    """Per-frame clouds plus merged static and dynamic clouds.

    The dynamic cloud keeps every dynamic point with its frame index, since
    moving surfaces occupy different world positions over time.
    """

    frames: tuple
    static: PointCloud
    dynamic: PointCloud
    reference_pose: object

    @property
    def times(self):
        return [int(c.source_frame[0]) if len(c) else -1 for c in self.frames]


def fuse(frames, dynamic_masks=None, voxel=VOXEL_SIZE):
    """Back-project every frame and merge the static parts with voxel dedup."""
    frames = list(frames)
    if not frames:
        raise EmptyInput("no frames to fuse")
    masks = dynamic_masks if dynamic_masks is not None else [None] * len(frames)
    clouds = tuple(back_project_frame(f, m) for f, m in zip(frames, masks))
    merged = PointCloud.concatenate(clouds)
    static = voxel_dedup(merged.subset(~merged.dynamic), voxel)
    dynamic = merged.subset(merged.dynamic)
    return FusedScene(clouds, static, dynamic, frames[0].pose)
