"""Camera-induced flow and dynamic/static labelling from flow residuals."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..exceptions import ShapeMismatch
from ..geometry import _project_raw, backproject_pixels
from ..scenesim import FlowField

STATIC = 0
DYNAMIC = 1
UNKNOWN = 2
DEFAULT_TAU = 1.5


def ego_flow(depth, pose_t, pose_t1, K):
    """Flow each pixel would have if its surface were static.

    Valid where the depth is valid and the re-projected point lands in front
    of camera ``t+1`` inside the image. No visibility test is made.
    """
    valid = depth.valid.copy()
    coords = depth.coords[valid]
    X = backproject_pixels(coords, depth.values[valid], pose_t, K, check_domain=False)
    uv1, z1 = _project_raw(X, pose_t1, K)
    ok = (z1 > 0) & K.in_domain(uv1[:, 0], uv1[:, 1])
    flow = np.zeros(valid.shape + (2,))
    flow[valid] = np.where(ok[:, None], uv1 - coords, 0.0)
    mask = np.zeros(valid.shape, bool)
    mask[valid] = ok
    return FlowField(flow, mask)


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    labels: np.ndarray  # (H, W) of STATIC / DYNAMIC / UNKNOWN
    residual: np.ndarray  # (H, W) pixels, 0 where unknown

    @property
    def dynamic_mask(self):
        return self.labels == DYNAMIC

    @property
    def static_mask(self):
        return self.labels == STATIC


def segment_dynamic(observed, ego, tau=DEFAULT_TAU):
    """Label a pixel dynamic when ``|observed - ego| > tau`` (strict)."""
    if observed.shape != ego.shape:
        raise ShapeMismatch(f"flow fields differ in shape: {observed.shape} vs {ego.shape}")
    known = observed.valid & ego.valid
    residual = np.where(known, np.linalg.norm(observed.flow - ego.flow, axis=-1), 0.0)
    labels = np.full(known.shape, UNKNOWN, np.int8)
    labels[known] = np.where(residual[known] > tau, DYNAMIC, STATIC)
    return SegmentationResult(labels, residual)


def resolve_unknown(labels):
    """Boolean dynamic mask with every pixel assigned to one side.

    Unknown pixels connected (8-neighbourhood, through unknown or dynamic
    pixels) to a detected dynamic pixel become dynamic: they are usually the
    parts of a moving object that are hidden or leave the view in the next
    frame. Remaining unknown pixels count as static.
    """
    labels = np.asarray(labels)
    dyn = labels == DYNAMIC
    unk = labels == UNKNOWN
    comp, _ = ndimage.label(dyn | unk, structure=np.ones((3, 3), bool))
    seeds = np.unique(comp[dyn])
    return dyn | (unk & np.isin(comp, seeds[seeds > 0]))
