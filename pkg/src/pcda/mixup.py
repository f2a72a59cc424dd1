"""Scene-level and instance-level point cloud mix-up, plus standard augmentations.

Every mix carries per-point provenance (sample_id, original index) so that
guided features for a mixed cloud are later sampled from each point's own
original views, never from a composited image. Each mix also records a
replayable recipe: feeding the same two samples and the recipe back through
replay_recipe reproduces the result exactly.

Boundary conventions are half-open everywhere, so a point belongs to
exactly one side of any split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IGNORE, DomainSample, PointCloud
from .projection import sample_mask_ids

POLAR = "polar"
RANGE = "range"
LASER = "laser"
INSTANCE = "instance"
STRATEGIES = (POLAR, RANGE, LASER, INSTANCE)

TWO_PI = 2.0 * np.pi


class NoMasksAvailable(Exception):
    def __init__(self, sample_id):
        super().__init__(f"sample {sample_id}: no nonzero instance ids cover any point")


@dataclass(frozen=True)
class MixConfig:
    """Strategy weights, instance-count range, and rng seed for hybrid mixing."""

    weights: np.ndarray  # 4 non-negative reals, order (polar, range, laser, instance)
    instance_lo: int = 20
    instance_hi: int = 30
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != len(STRATEGIES) or np.any(w < 0) or not np.sum(w) > 0:
            raise ValueError("weights must be 4 non-negative reals with positive sum")
        if not (1 <= self.instance_lo <= self.instance_hi):
            raise ValueError("instance range must satisfy 1 <= lo <= hi")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class MixRecipe:
    """Everything needed to replay one mix of two fixed samples."""

    strategy: str
    a_id: int
    b_id: int
    seed: int
    theta0: float | None = None
    r0: float | None = None
    phi0: float | None = None
    instance_ids: tuple | None = None

    def to_line(self) -> str:
        parts = [f"strategy={self.strategy}", f"a={self.a_id}", f"b={self.b_id}"]
        if self.theta0 is not None:
            parts.append(f"theta0={self.theta0!r}")
        if self.r0 is not None:
            parts.append(f"r0={self.r0!r}")
        if self.phi0 is not None:
            parts.append(f"phi0={self.phi0!r}")
        if self.instance_ids is not None:
            parts.append("ids=" + ",".join(str(i) for i in self.instance_ids))
        parts.append(f"seed={self.seed}")
        return " ".join(parts)

    @staticmethod
    def from_line(line: str) -> "MixRecipe":
        kv = dict(tok.split("=", 1) for tok in line.split())
        ids = kv.get("ids")
        return MixRecipe(
            strategy=kv["strategy"],
            a_id=int(kv["a"]),
            b_id=int(kv["b"]),
            seed=int(kv["seed"]),
            theta0=float(kv["theta0"]) if "theta0" in kv else None,
            r0=float(kv["r0"]) if "r0" in kv else None,
            phi0=float(kv["phi0"]) if "phi0" in kv else None,
            instance_ids=tuple(int(i) for i in ids.split(",")) if ids is not None else None,
        )


@dataclass(frozen=True)
class MixedCloud:
    cloud: PointCloud
    provenance: np.ndarray  # (n, 2) int64: (sample_id, original point index)
    recipe: MixRecipe


def _gather(cloud: PointCloud, idx: np.ndarray, want_intensity: bool, want_labels: bool) -> tuple:
    pos = cloud.positions[idx]
    if want_intensity:
        inten = cloud.intensity[idx] if cloud.intensity is not None else np.zeros(idx.size)
    else:
        inten = None
    if want_labels:
        labels = cloud.labels[idx] if cloud.labels is not None else np.full(idx.size, IGNORE, dtype=np.int64)
    else:
        labels = None
    return pos, inten, labels


def _combine(a: DomainSample, idx_a, b: DomainSample, idx_b, recipe: MixRecipe) -> MixedCloud:
    """Concatenate selected points of a then b, carrying labels and intensity.

    Intensity and labels are kept when either input has them; the side
    lacking them is filled with 0 intensity / IGNORE labels.
    """
    want_intensity = a.cloud.intensity is not None or b.cloud.intensity is not None
    want_labels = a.cloud.labels is not None or b.cloud.labels is not None
    pos_a, int_a, lab_a = _gather(a.cloud, idx_a, want_intensity, want_labels)
    pos_b, int_b, lab_b = _gather(b.cloud, idx_b, want_intensity, want_labels)
    cloud = PointCloud(
        positions=np.concatenate([pos_a, pos_b], axis=0),
        intensity=np.concatenate([int_a, int_b]) if want_intensity else None,
        labels=np.concatenate([lab_a, lab_b]) if want_labels else None,
    )
    prov = np.concatenate(
        [
            np.stack([np.full(idx_a.size, a.sample_id, dtype=np.int64), idx_a.astype(np.int64)], axis=1),
            np.stack([np.full(idx_b.size, b.sample_id, dtype=np.int64), idx_b.astype(np.int64)], axis=1),
        ],
        axis=0,
    )
    return MixedCloud(cloud=cloud, provenance=prov, recipe=recipe)


def azimuth(positions: np.ndarray) -> np.ndarray:
    return np.arctan2(positions[:, 1], positions[:, 0])


def planar_radius(positions: np.ndarray) -> np.ndarray:
    return np.hypot(positions[:, 0], positions[:, 1])


def pitch(positions: np.ndarray) -> np.ndarray:
    return np.arctan2(positions[:, 2], np.hypot(positions[:, 0], positions[:, 1]))


def polar_mix(a: DomainSample, b: DomainSample, theta0: float, seed: int = 0) -> MixedCloud:
    """Semi-circular split: a inside the arc [theta0, theta0 + pi), b outside."""
    in_arc_a = np.mod(azimuth(a.cloud.positions) - theta0, TWO_PI) < np.pi
    in_arc_b = np.mod(azimuth(b.cloud.positions) - theta0, TWO_PI) < np.pi
    recipe = MixRecipe(strategy=POLAR, a_id=a.sample_id, b_id=b.sample_id, seed=seed, theta0=float(theta0))
    return _combine(a, np.flatnonzero(in_arc_a), b, np.flatnonzero(~in_arc_b), recipe)


def range_mix(a: DomainSample, b: DomainSample, r0: float, seed: int = 0) -> MixedCloud:
    """Radial split: a's inner disc (radius < r0), b's outer ring (radius >= r0)."""
    if not r0 > 0:
        raise ValueError("r0 must be positive")
    near_a = planar_radius(a.cloud.positions) < r0
    near_b = planar_radius(b.cloud.positions) < r0
    recipe = MixRecipe(strategy=RANGE, a_id=a.sample_id, b_id=b.sample_id, seed=seed, r0=float(r0))
    return _combine(a, np.flatnonzero(near_a), b, np.flatnonzero(~near_b), recipe)


def laser_mix(a: DomainSample, b: DomainSample, phi0: float = 0.0, seed: int = 0) -> MixedCloud:
    """Pitch split: a's points at pitch >= phi0, b's points below."""
    high_a = pitch(a.cloud.positions) >= phi0
    high_b = pitch(b.cloud.positions) >= phi0
    recipe = MixRecipe(strategy=LASER, a_id=a.sample_id, b_id=b.sample_id, seed=seed, phi0=float(phi0))
    return _combine(a, np.flatnonzero(high_a), b, np.flatnonzero(~high_b), recipe)


def _usable_instance_ids(donor: DomainSample, mask_ids: np.ndarray | None) -> tuple:
    if mask_ids is None:
        mask_ids = sample_mask_ids(donor)
    available = np.unique(mask_ids)
    available = available[available != 0]
    return mask_ids, available


def instance_mix(
    donor: DomainSample,
    recipient: DomainSample,
    cfg: MixConfig,
    rng: np.random.Generator,
    mask_ids: np.ndarray | None = None,
) -> MixedCloud:
    """Append whole donor instances (by mask id) onto the recipient cloud.

    The donor cloud is projected into its own views and each point takes the
    instance id of the pixel it lands on; k is drawn uniformly from the
    configured range and min(k, available) distinct nonzero ids are chosen
    without replacement. mask_ids, when given, must be the precomputed
    per-point ids of the donor (used by the trainer to avoid re-projecting).
    """
    mask_ids, available = _usable_instance_ids(donor, mask_ids)
    if available.size == 0:
        raise NoMasksAvailable(donor.sample_id)
    k = int(rng.integers(cfg.instance_lo, cfg.instance_hi + 1))
    chosen = rng.choice(available, size=min(k, available.size), replace=False)
    chosen = np.sort(chosen)
    recipe = MixRecipe(
        strategy=INSTANCE,
        a_id=donor.sample_id,
        b_id=recipient.sample_id,
        seed=cfg.seed,
        instance_ids=tuple(int(i) for i in chosen),
    )
    return _instance_combine(donor, recipient, mask_ids, chosen, recipe)


def _instance_combine(donor, recipient, mask_ids, chosen, recipe) -> MixedCloud:
    keep_donor = np.flatnonzero(np.isin(mask_ids, chosen))
    all_recipient = np.arange(recipient.cloud.n)
    return _combine(recipient, all_recipient, donor, keep_donor, recipe)


def hybrid_mix(
    a: DomainSample,
    b: DomainSample,
    cfg: MixConfig,
    rng: np.random.Generator,
    a_mask_ids: np.ndarray | None = None,
) -> MixedCloud:
    """Draw one strategy proportional to cfg.weights and apply it.

    polar draws its split angle uniformly; range draws its radius between
    the 25th and 75th percentile of the union's planar radii; laser splits
    at pitch 0; instance uses a as the donor. If instance is drawn but a
    has no usable masks, the strategy is redrawn among the scene-level
    three (uniformly when their weights are all zero).
    """
    p = cfg.weights / np.sum(cfg.weights)
    strategy = STRATEGIES[int(rng.choice(len(STRATEGIES), p=p))]
    if strategy == INSTANCE:
        try:
            return instance_mix(a, b, cfg, rng, mask_ids=a_mask_ids)
        except NoMasksAvailable:
            scene_w = cfg.weights[:3]
            if not np.sum(scene_w) > 0:
                scene_w = np.ones(3)
            strategy = STRATEGIES[int(rng.choice(3, p=scene_w / np.sum(scene_w)))]
    if strategy == POLAR:
        return polar_mix(a, b, float(rng.uniform(0.0, TWO_PI)), seed=cfg.seed)
    if strategy == RANGE:
        radii = np.concatenate([planar_radius(a.cloud.positions), planar_radius(b.cloud.positions)])
        q25, q75 = np.percentile(radii, [25.0, 75.0])
        return range_mix(a, b, float(rng.uniform(q25, q75)), seed=cfg.seed)
    return laser_mix(a, b, 0.0, seed=cfg.seed)


def replay_recipe(a: DomainSample, b: DomainSample, recipe: MixRecipe) -> MixedCloud:
    """Reproduce a recorded mix exactly from the same two input samples."""
    if (recipe.a_id, recipe.b_id) != (a.sample_id, b.sample_id):
        raise ValueError(
            f"recipe is for samples ({recipe.a_id}, {recipe.b_id}), got ({a.sample_id}, {b.sample_id})"
        )
    if recipe.strategy == POLAR:
        return polar_mix(a, b, recipe.theta0, seed=recipe.seed)
    if recipe.strategy == RANGE:
        return range_mix(a, b, recipe.r0, seed=recipe.seed)
    if recipe.strategy == LASER:
        return laser_mix(a, b, recipe.phi0, seed=recipe.seed)
    if recipe.strategy == INSTANCE:
        mask_ids, available = _usable_instance_ids(a, None)
        if available.size == 0:
            raise NoMasksAvailable(a.sample_id)
        return _instance_combine(a, b, mask_ids, np.asarray(recipe.instance_ids, dtype=np.int64), recipe)
    raise ValueError(f"unknown strategy {recipe.strategy!r}")


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the standard geometric augmentation."""

    flip_x: bool
    scale: float
    angle: float

    def apply_to_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """Apply the linear part (flip, z-rotation, scale) to 3-vectors."""
        x = np.where(self.flip_x, -vectors[:, 0], vectors[:, 0])
        y = vectors[:, 1]
        c = np.cos(self.angle)
        s = np.sin(self.angle)
        out = np.empty_like(vectors)
        out[:, 0] = self.scale * (c * x - s * y)
        out[:, 1] = self.scale * (s * x + c * y)
        out[:, 2] = self.scale * vectors[:, 2]
        return out


def draw_augment(rng: np.random.Generator) -> AugmentParams:
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.95, 1.05))
    angle = float(rng.uniform(0.0, TWO_PI))
    return AugmentParams(flip_x=flip, scale=scale, angle=angle)


def apply_augment(cloud: PointCloud, params: AugmentParams) -> PointCloud:
    return PointCloud(
        positions=params.apply_to_vectors(cloud.positions),
        intensity=cloud.intensity,
        labels=cloud.labels,
    )


def standard_augment(cloud: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Random x-flip (p = 0.5), uniform scale in [0.95, 1.05], and a uniform
    rotation about the vertical axis. Labels and intensity pass through."""
    return apply_augment(cloud, draw_augment(rng))
