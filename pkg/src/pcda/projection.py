"""LiDAR-to-image projection, guided-feature sampling, and mask lookup.

The pixel convention throughout is uv = (u, v) with u the continuous column
coordinate and v the continuous row coordinate. The rotation/translation
arithmetic is written as explicit component expressions (not matmul) so a
straight-line re-evaluation of the same formula reproduces it bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraCalibration, DomainSample, FeatureMap, MaskMap, PointCloud

# Points at or behind the image plane are never projected.
EPS_DEPTH = 1e-6

UNCOVERED = -1


class OutOfBounds(Exception):
    def __init__(self, index, u, v):
        super().__init__(f"uv index {index}: ({u}, {v}) outside the pixel grid")
        self.index = index


@dataclass(frozen=True)
class ProjectedPoints:
    """Continuous pixel coordinates, depths, and visibility per point.

    Where visible[i] is False, uv[i] and depth[i] are unspecified and must
    not be read; view_index[i] is UNCOVERED there.
    """

    uv: np.ndarray  # (n, 2) float64
    depth: np.ndarray  # (n,) float64
    visible: np.ndarray  # (n,) bool
    view_index: np.ndarray  # (n,) int32, UNCOVERED where invisible


def project_points(cloud: PointCloud, calib: CameraCalibration, view_index: int = 0) -> ProjectedPoints:
    """Project points through one calibrated camera.

    Per point x: q = R x + T; points with q_z <= EPS_DEPTH are invisible;
    otherwise p = K q, uv = (p_x / p_z, p_y / p_z), depth = p_z. Visibility
    additionally requires uv inside [0, width-1] x [0, height-1].
    """
    x = cloud.positions[:, 0]
    y = cloud.positions[:, 1]
    z = cloud.positions[:, 2]
    r = calib.rotation
    t = calib.translation
    qx = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    qy = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    qz = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]

    in_front = qz > EPS_DEPTH
    safe_qz = np.where(in_front, qz, 1.0)
    k = calib.intrinsic
    px = k[0, 0] * qx + k[0, 1] * qy + k[0, 2] * qz
    py = k[1, 0] * qx + k[1, 1] * qy + k[1, 2] * qz
    u = px / safe_qz
    v = py / safe_qz

    visible = in_front & (u >= 0.0) & (u <= calib.width - 1.0) & (v >= 0.0) & (v <= calib.height - 1.0)
    uv = np.stack([u, v], axis=1)
    view = np.where(visible, np.int32(view_index), np.int32(UNCOVERED))
    return ProjectedPoints(uv=uv, depth=qz, visible=visible, view_index=view.astype(np.int32))


def project_to_views(cloud: PointCloud, views) -> ProjectedPoints:
    """Assign each point to the first view (in order) where it is visible.

    Points visible in no view keep view_index UNCOVERED and visible False.
    """
    if not views:
        raise ValueError("views must be nonempty")
    n = cloud.n
    uv = np.zeros((n, 2))
    depth = np.zeros(n)
    visible = np.zeros(n, dtype=bool)
    view_index = np.full(n, UNCOVERED, dtype=np.int32)
    for i, view in enumerate(views):
        calib = view[0]
        proj = project_points(cloud, calib, view_index=i)
        take = proj.visible & ~visible
        uv[take] = proj.uv[take]
        depth[take] = proj.depth[take]
        view_index[take] = i
        visible |= proj.visible
    return ProjectedPoints(uv=uv, depth=depth, visible=visible, view_index=view_index)


def _split_uv(uv) -> tuple:
    uv = np.asarray(uv, dtype=np.float64)
    if uv.ndim == 1:
        uv = uv.reshape(1, 2)
    return uv[:, 0], uv[:, 1]


def _check_bounds(u, v, width, height):
    bad = (u < 0.0) | (u > width - 1.0) | (v < 0.0) | (v > height - 1.0) | ~np.isfinite(u) | ~np.isfinite(v)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise OutOfBounds(i, float(u[i]), float(v[i]))


def sample_features(fm: FeatureMap, uv) -> np.ndarray:
    """Bilinearly interpolate the feature map at k continuous uv positions.

    Returns a (k, c) float64 matrix: row i is the 4-tap weighted sum
    (1-a)(1-b) f00 + a(1-b) f10 + (1-a)b f01 + ab f11 where a, b are the
    fractional offsets of uv[i] inside its pixel cell. Coordinates exactly
    on the far border clamp to valid neighbor indices, so grid nodes
    reproduce the stored vectors exactly.
    """
    u, v = _split_uv(uv)
    h, w = fm.height, fm.width
    _check_bounds(u, v, w, h)
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    a = (u - x0)[:, None]
    b = (v - y0)[:, None]
    data = fm.data.astype(np.float64, copy=False)
    f00 = data[y0, x0]
    f10 = data[y0, x1]
    f01 = data[y1, x0]
    f11 = data[y1, x1]
    return (1.0 - a) * (1.0 - b) * f00 + a * (1.0 - b) * f10 + (1.0 - a) * b * f01 + a * b * f11


def point_mask_ids(mm: MaskMap, uv) -> np.ndarray:
    """Instance id under each uv position, by nearest pixel.

    Ids are categorical so they are never blended: each point reads the
    pixel at (round(v), round(u)), with ties rounding to even.
    """
    u, v = _split_uv(uv)
    _check_bounds(u, v, mm.width, mm.height)
    cols = np.rint(u).astype(np.intp)
    rows = np.rint(v).astype(np.intp)
    return mm.ids[rows, cols].astype(np.int64)


def guided_features(sample: DomainSample) -> tuple:
    """Per-point guided embeddings sampled from the sample's own views.

    Projects the cloud into the sample's views (first visible view wins),
    then bilinearly samples that view's feature map. Returns (features,
    covered): an (n, c) float64 matrix with zero rows for uncovered points,
    and the boolean coverage mask.
    """
    if not sample.views:
        n = sample.cloud.n
        return np.zeros((n, 0)), np.zeros(n, dtype=bool)
    proj = project_to_views(sample.cloud, sample.views)
    c = sample.views[0][1].channels
    feats = np.zeros((sample.cloud.n, c))
    for i, (_, fmap, _) in enumerate(sample.views):
        take = proj.view_index == i
        if np.any(take):
            feats[take] = sample_features(fmap, proj.uv[take])
    return feats, proj.visible.copy()


def sample_mask_ids(sample: DomainSample) -> np.ndarray:
    """Per-point instance ids from the sample's own mask maps.

    Points that are uncovered, fall on background, or land in a view
    without a mask map get id 0.
    """
    proj = project_to_views(sample.cloud, sample.views) if sample.views else None
    ids = np.zeros(sample.cloud.n, dtype=np.int64)
    if proj is None:
        return ids
    for i, (_, _, mask) in enumerate(sample.views):
        if mask is None:
            continue
        take = proj.view_index == i
        if np.any(take):
            ids[take] = point_mask_ids(mask, proj.uv[take])
    return ids
