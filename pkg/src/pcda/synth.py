"""Synthetic paired-domain scene generation.

Scenes are a ground plane plus axis-aligned boxes and vertical cylinders,
each carrying a semantic class. The cloud comes from first-hit ray casting
over a beam/azimuth grid with Gaussian coordinate noise; one forward-facing
pinhole camera per scene renders a feature map (per pixel, the unit class
embedding of the visible surface plus noise) and an instance mask map. The
class-embedding table is drawn once from a seed shared by both domains,
which is exactly what makes the guided feature space common across them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import dataio
from .core import SOURCE, TARGET, CameraCalibration, DomainSample, FeatureMap, MaskMap, PointCloud

EMBED_DIM = 16
IMAGE_SIZE = 96
SENSOR_HEIGHT = 1.8
MAX_RANGE = 70.0
HIT_EPS = 1e-9

# Object shape families, cycled by class id for num_classes != 6:
# (kind, half_x range, half_y range, height range, distance range)
_FAMILIES = (
    ("box", (2.5, 5.0), (2.5, 5.0), (5.0, 9.0), (15.0, 45.0)),  # building
    ("box", (1.6, 2.4), (0.8, 1.1), (1.3, 1.9), (5.0, 30.0)),  # vehicle
    ("cyl", (0.08, 0.18), None, (3.0, 6.0), (5.0, 30.0)),  # pole
    ("cyl", (0.7, 1.6), None, (1.2, 3.0), (5.0, 35.0)),  # vegetation
    ("box", (1.5, 3.5), (0.15, 0.35), (0.5, 0.9), (4.0, 25.0)),  # barrier
)


@dataclass(frozen=True)
class DomainParams:
    """Knobs for one synthetic domain."""

    beam_count: int = 64
    azimuth_steps: int = 72
    pitch_lo: float = -0.42
    pitch_hi: float = 0.10
    object_lo: int = 6
    object_hi: int = 12
    object_scale: float = 1.0
    coord_noise: float = 0.02
    feature_noise: float = 0.05
    num_classes: int = 6
    class_embed_seed: int = 7
    domain_seed: int = 1

    def __post_init__(self):
        if self.beam_count < 2:
            raise ValueError("beam_count must be >= 2")
        if self.azimuth_steps < 8:
            raise ValueError("azimuth_steps must be >= 8")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (ground plus one object class)")
        if not (1 <= self.object_lo <= self.object_hi):
            raise ValueError("object count range must satisfy 1 <= lo <= hi")


def default_source_params() -> DomainParams:
    return DomainParams()


def default_target_params() -> DomainParams:
    # Half the beams and more coordinate noise: a density-and-noise shift.
    return DomainParams(beam_count=32, coord_noise=0.05, domain_seed=2)


def class_embeddings(seed: int, num_classes: int) -> np.ndarray:
    """Unit, mutually orthogonal embeddings for every class plus one for sky.

    Row layout: rows [0, num_classes) are the point classes, row num_classes
    is the sky/no-hit embedding (never a point label).
    """
    count = num_classes + 1
    if count > EMBED_DIM:
        raise ValueError(f"at most {EMBED_DIM - 1} classes supported")
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(EMBED_DIM, count))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for reproducibility
    return q.T.copy()


@dataclass(frozen=True)
class _Obj:
    kind: str  # "box" or "cyl"
    cls: int
    cx: float
    cy: float
    hx: float  # box half-extent x, or cylinder radius
    hy: float
    height: float


def _sample_objects(params: DomainParams, rng: np.random.Generator) -> list:
    count = int(rng.integers(params.object_lo, params.object_hi + 1))
    objs = []
    for _ in range(count):
        cls = int(rng.integers(1, params.num_classes))
        kind, rx, ry, rh, rd = _FAMILIES[(cls - 1) % len(_FAMILIES)]
        s = params.object_scale
        hx = float(rng.uniform(*rx)) * s
        hy = float(rng.uniform(*ry)) * s if ry is not None else hx
        height = float(rng.uniform(*rh)) * s
        dist = float(rng.uniform(*rd))
        # Bias placement toward the camera frustum so masks and features
        # cover real instances; the rest lands anywhere on the circle.
        if rng.random() < 0.7:
            az = float(rng.uniform(-0.55, 0.55))
        else:
            az = float(rng.uniform(0.0, 2.0 * np.pi))
        objs.append(_Obj(kind=kind, cls=cls, cx=dist * np.cos(az), cy=dist * np.sin(az), hx=hx, hy=hy, height=height))
    return objs


def _cast(origin: np.ndarray, dirs: np.ndarray, objs: list) -> tuple:
    """First-hit ray casting. Returns (t, hit_index): hit_index is -1 for no
    hit, 0 for ground, i+1 for objs[i]; t is the metric hit distance for
    unit-length dirs."""
    m = dirs.shape[0]
    t_best = np.full(m, np.inf)
    idx_best = np.full(m, -1, dtype=np.int64)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -origin[2] / dz
    ok = (dz < 0) & (t_ground > HIT_EPS) & (t_ground <= MAX_RANGE)
    t_best[ok] = t_ground[ok]
    idx_best[ok] = 0

    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    for i, ob in enumerate(objs):
        if ob.kind == "box":
            lo = np.array([ob.cx - ob.hx, ob.cy - ob.hy, 0.0])
            hi = np.array([ob.cx + ob.hx, ob.cy + ob.hy, ob.height])
            t1 = (lo - origin) / safe
            t2 = (hi - origin) / safe
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            hit = (tmax >= tmin) & (tmin > HIT_EPS) & (tmin <= MAX_RANGE)
            t_obj = tmin
        else:
            ox = origin[0] - ob.cx
            oy = origin[1] - ob.cy
            a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
            b = 2.0 * (ox * dirs[:, 0] + oy * dirs[:, 1])
            c = ox * ox + oy * oy - ob.hx * ob.hx
            disc = b * b - 4.0 * a * c
            with np.errstate(divide="ignore", invalid="ignore"):
                t_obj = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
            z_at = origin[2] + t_obj * dirs[:, 2]
            hit = (disc >= 0) & (a > 1e-12) & (t_obj > HIT_EPS) & (t_obj <= MAX_RANGE)
            hit &= (z_at >= 0.0) & (z_at <= ob.height)
        closer = hit & (t_obj < t_best)
        t_best[closer] = t_obj[closer]
        idx_best[closer] = i + 1
    return t_best, idx_best


def _default_calibration() -> CameraCalibration:
    # Forward-facing camera: world x forward / y left / z up maps to camera
    # x right / y down / z forward; center sits at (0.2, 0, 1.6).
    f = IMAGE_SIZE / 2.0
    cx = (IMAGE_SIZE - 1) / 2.0
    k = np.array([[f, 0.0, cx], [0.0, f, cx], [0.0, 0.0, 1.0]])
    r = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    center = np.array([0.2, 0.0, 1.6])
    t = -r @ center
    return CameraCalibration(intrinsic=k, rotation=r, translation=t, width=IMAGE_SIZE, height=IMAGE_SIZE)


def _render_views(objs, params, embeds, rng) -> tuple:
    calib = _default_calibration()
    us, vs = np.meshgrid(np.arange(IMAGE_SIZE, dtype=np.float64), np.arange(IMAGE_SIZE, dtype=np.float64))
    pix = np.stack([us.ravel(), vs.ravel(), np.ones(IMAGE_SIZE * IMAGE_SIZE)], axis=0)
    dirs_cam = np.linalg.solve(calib.intrinsic, pix)
    dirs_world = (calib.rotation.T @ dirs_cam).T
    dirs_world /= np.linalg.norm(dirs_world, axis=1, keepdims=True)
    center = -calib.rotation.T @ calib.translation

    _, idx = _cast(center, dirs_world, objs)
    pix_cls = np.full(idx.shape, params.num_classes, dtype=np.int64)  # sky
    pix_cls[idx == 0] = 0
    obj_cls = np.array([ob.cls for ob in objs], dtype=np.int64)
    hit_obj = idx > 0
    pix_cls[hit_obj] = obj_cls[idx[hit_obj] - 1]

    feats = embeds[pix_cls].astype(np.float64)
    feats += rng.normal(0.0, params.feature_noise, size=feats.shape)
    fmap = FeatureMap(feats.reshape(IMAGE_SIZE, IMAGE_SIZE, EMBED_DIM).astype(np.float32))

    inst = np.where(idx > 0, idx, 0).astype(np.uint16)
    mask = MaskMap(inst.reshape(IMAGE_SIZE, IMAGE_SIZE))
    return calib, fmap, mask


def gen_scene(params: DomainParams, scene_seed: int, domain: str = SOURCE, sample_id: int = 0) -> DomainSample:
    """Generate one labeled scene with a single camera view.

    Deterministic in (params, scene_seed): the rng stream is seeded from
    (domain_seed, scene_seed) alone.
    """
    rng = np.random.default_rng([params.domain_seed, scene_seed])
    objs = _sample_objects(params, rng)

    pitches = np.linspace(params.pitch_lo, params.pitch_hi, params.beam_count)
    azimuths = np.linspace(0.0, 2.0 * np.pi, params.azimuth_steps, endpoint=False)
    ph, az = np.meshgrid(pitches, azimuths, indexing="ij")
    ph = ph.ravel()
    az = az.ravel()
    dirs = np.stack([np.cos(ph) * np.cos(az), np.cos(ph) * np.sin(az), np.sin(ph)], axis=1)
    origin = np.array([0.0, 0.0, SENSOR_HEIGHT])

    t, idx = _cast(origin, dirs, objs)
    hit = idx >= 0
    pts = origin + t[hit, None] * dirs[hit]
    pts = pts + rng.normal(0.0, params.coord_noise, size=pts.shape)
    labels = np.zeros(pts.shape[0], dtype=np.int64)
    obj_cls = np.array([ob.cls for ob in objs], dtype=np.int64)
    from_obj = idx[hit] > 0
    labels[from_obj] = obj_cls[idx[hit][from_obj] - 1]
    intensity = np.exp(-t[hit] / 40.0) + rng.normal(0.0, 0.02, size=pts.shape[0])

    embeds = class_embeddings(params.class_embed_seed, params.num_classes)
    calib, fmap, mask = _render_views(objs, params, embeds, rng)

    cloud = PointCloud(positions=pts, intensity=intensity, labels=labels)
    return DomainSample(cloud=cloud, views=((calib, fmap, mask),), domain=domain, sample_id=sample_id)


# Target sample ids start here so the two manifests never collide.
TARGET_ID_BASE = 100000


def gen_domain_pair(
    src_params: DomainParams,
    tgt_params: DomainParams,
    scenes_per_domain: int,
    seed: int,
    out_dir,
) -> tuple:
    """Write a full synthetic source/target dataset under out_dir.

    Produces out_dir/{source,target}/scene_* files in the dataio formats
    plus out_dir/source_manifest.txt and out_dir/target_manifest.txt;
    returns the two manifest paths. Target ground-truth labels are written
    too: training ignores them and they exist for evaluation.
    """
    out_dir = os.fspath(out_dir)
    manifests = []
    for domain, params, id_base in ((SOURCE, src_params, 0), (TARGET, tgt_params, TARGET_ID_BASE)):
        sub = "source" if domain == SOURCE else "target"
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        entries = []
        for i in range(scenes_per_domain):
            sample = gen_scene(params, scene_seed=seed * 1000003 + i, domain=domain, sample_id=id_base + i)
            stem = os.path.join(out_dir, sub, f"scene_{i:04d}")
            dataio.write_point_cloud(stem + ".pcda", sample.cloud)
            calib, fmap, mask = sample.views[0]
            dataio.write_calibration(stem + ".calib", calib)
            dataio.write_feature_map(stem + ".fmap", fmap)
            dataio.write_mask_map(stem + ".imsk", mask)
            entries.append(
                dataio.ManifestEntry(
                    sample_id=sample.sample_id,
                    domain=domain,
                    cloud_path=stem + ".pcda",
                    views=((stem + ".calib", stem + ".fmap", stem + ".imsk"),),
                )
            )
        manifest_path = os.path.join(out_dir, f"{sub}_manifest.txt")
        dataio.write_manifest(manifest_path, entries)
        manifests.append(manifest_path)
    return tuple(manifests)
