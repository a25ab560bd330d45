"""Reconstruction: back-projection and fusion, flow segmentation, feature field."""

from .field import (
    FeatureField,
    FieldConfig,
    field_forward,
    field_train,
    grad_check,
    positional_encode,
    temporal_embed,
)
from .fusion import FusedScene, back_project_frame, fuse, voxel_dedup
from .segmentation import (
    DYNAMIC,
    STATIC,
    UNKNOWN,
    SegmentationResult,
    ego_flow,
    resolve_unknown,
    segment_dynamic,
)
