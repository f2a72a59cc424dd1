"""Shared domain types and their invariant checks.

All types are plain frozen dataclasses around numpy arrays. Geometry is
float64 in memory; the on-disk formats (see dataio) store float32. Values
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Sentinel for unlabeled points inside labeled clouds. Points carrying it
# contribute to no loss and no metric.
IGNORE = -1

SOURCE = "SOURCE"
TARGET = "TARGET"

ROTATION_TOL = 1e-6


def _as_float64(a, shape_tail, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != len(shape_tail) or any(
        t is not None and arr.shape[i] != t for i, t in enumerate(shape_tail)
    ):
        raise ValueError(f"{name}: expected shape {shape_tail}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """A set of sensor-frame points with optional intensity and labels."""

    positions: np.ndarray  # (n, 3) float64, meters
    intensity: np.ndarray | None = None  # (n,) float64
    labels: np.ndarray | None = None  # (n,) int64, IGNORE allowed

    def __post_init__(self):
        object.__setattr__(self, "positions", _as_float64(self.positions, (None, 3), "positions"))
        if self.intensity is not None:
            object.__setattr__(self, "intensity", np.asarray(self.intensity, dtype=np.float64).reshape(-1))
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(-1))

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class CameraCalibration:
    """Pinhole intrinsics plus world-to-camera extrinsics."""

    intrinsic: np.ndarray  # (3, 3) K, pixels
    rotation: np.ndarray  # (3, 3) R_ext
    translation: np.ndarray  # (3,) T_ext, meters
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "intrinsic", _as_float64(self.intrinsic, (3, 3), "intrinsic"))
        object.__setattr__(self, "rotation", _as_float64(self.rotation, (3, 3), "rotation"))
        object.__setattr__(self, "translation", _as_float64(self.translation, (3,), "translation"))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))


@dataclass(frozen=True)
class FeatureMap:
    """Dense h x w x c feature grid from a frozen image encoder.

    Values are held in float32, matching the on-disk precision; sampling
    promotes to float64.
    """

    data: np.ndarray  # (h, w, c) float32

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"FeatureMap.data: expected (h, w, c), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MaskMap:
    """Per-pixel instance ids; 0 marks background."""

    ids: np.ndarray  # (h, w) uint16

    def __post_init__(self):
        arr = np.asarray(self.ids, dtype=np.uint16)
        if arr.ndim != 2:
            raise ValueError(f"MaskMap.ids: expected (h, w), got {arr.shape}")
        object.__setattr__(self, "ids", arr)

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def instance_ids(self) -> np.ndarray:
        """Sorted array of the nonzero ids present in the map."""
        ids = np.unique(self.ids)
        return ids[ids != 0]


@dataclass(frozen=True)
class DomainSample:
    """One scene: a point cloud plus zero or more camera views."""

    cloud: PointCloud
    views: tuple  # of (CameraCalibration, FeatureMap, MaskMap | None) triples
    domain: str  # SOURCE or TARGET
    sample_id: int

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(tuple(v) for v in self.views))
        object.__setattr__(self, "sample_id", int(self.sample_id))


def _check_rotation(r: np.ndarray) -> str | None:
    rtr = r.T @ r
    if not np.allclose(rtr, np.eye(3), atol=ROTATION_TOL):
        return "not orthonormal"
    det = float(np.linalg.det(r))
    if abs(det - 1.0) > ROTATION_TOL:
        return f"determinant {det:.6f} != +1"
    return None


def validate_calibration(calib: CameraCalibration, view: str = "") -> list:
    """Invariant violations for one calibration; empty list when valid."""
    out = []
    k = calib.intrinsic
    if not (k[2, 0] == 0.0 and k[2, 1] == 0.0 and k[2, 2] == 1.0):
        out.append(f"CameraCalibration.intrinsic: bottom row must be (0, 0, 1){view}")
    if not np.all(np.isfinite(k)) or not np.all(np.isfinite(calib.rotation)) or not np.all(
        np.isfinite(calib.translation)
    ):
        out.append(f"CameraCalibration: non-finite entry{view}")
    else:
        bad = _check_rotation(calib.rotation)
        if bad is not None:
            out.append(f"CameraCalibration.rotation: {bad}{view}")
    if calib.width < 1 or calib.height < 1:
        out.append(f"CameraCalibration.width/height: must be >= 1{view}")
    return out


def validate(sample: DomainSample, num_classes: int | None = None) -> list:
    """Check every structural invariant of a sample.

    Returns an empty list iff the sample is well formed; otherwise one
    human-readable string per violation, each naming the offending type,
    field, and failed condition. Never raises. When num_classes is given,
    label values are additionally range-checked against it.
    """
    out = []
    cloud = sample.cloud
    if not np.all(np.isfinite(cloud.positions)):
        out.append("PointCloud.positions: non-finite coordinate")
    n = cloud.n
    if cloud.intensity is not None:
        if cloud.intensity.shape[0] != n:
            out.append(f"PointCloud.intensity: length {cloud.intensity.shape[0]} != point count {n}")
        elif not np.all(np.isfinite(cloud.intensity)):
            out.append("PointCloud.intensity: non-finite value")
    if cloud.labels is not None:
        if cloud.labels.shape[0] != n:
            out.append(f"PointCloud.labels: length {cloud.labels.shape[0]} != point count {n}")
        else:
            if np.any(cloud.labels < IGNORE):
                out.append("PointCloud.labels: id below IGNORE sentinel")
            if num_classes is not None and np.any(cloud.labels >= num_classes):
                out.append(f"PointCloud.labels: id >= num_classes ({num_classes})")

    for i, (calib, fmap, mask) in enumerate(sample.views):
        out.extend(validate_calibration(calib, view=f" (view {i})"))
        if fmap.height < 1 or fmap.width < 1 or fmap.channels < 1:
            out.append(f"FeatureMap: non-positive dimension (view {i})")
        if not np.all(np.isfinite(fmap.data)):
            out.append(f"FeatureMap.data: non-finite entry (view {i})")
        if mask is not None and (mask.height, mask.width) != (fmap.height, fmap.width):
            out.append(
                f"MaskMap: dimensions {(mask.height, mask.width)} != paired FeatureMap "
                f"{(fmap.height, fmap.width)} (view {i})"
            )

    if sample.domain not in (SOURCE, TARGET):
        out.append(f"DomainSample.domain: unknown tag {sample.domain!r}")
    if sample.domain == SOURCE and cloud.labels is None:
        out.append("DomainSample: SOURCE sample must carry labels")
    return out
