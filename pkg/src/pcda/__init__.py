"""Cross-domain LiDAR segmentation adaptation guided by frozen image features.

The pipeline projects points into calibrated camera views, samples frozen
foundation-model feature maps as per-point guidance, trains a small point
encoder with a cosine alignment loss next to the usual segmentation loss,
and diversifies training data with scene- and instance-level cloud mixing.
"""

__version__ = "0.1.0"

from .core import IGNORE, SOURCE, TARGET, CameraCalibration, DomainSample, FeatureMap, MaskMap, PointCloud

__all__ = [
    "IGNORE",
    "SOURCE",
    "TARGET",
    "CameraCalibration",
    "DomainSample",
    "FeatureMap",
    "MaskMap",
    "PointCloud",
]
