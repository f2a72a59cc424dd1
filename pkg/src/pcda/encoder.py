"""Desk-scale point encoder with segmentation head and joint training loop.

The encoder is a per-point two-layer MLP over [x, y, z, intensity-or-zero,
local context]; the local context is the mean offset to each point's k
nearest neighbors, which gives the per-point model minimal neighborhood
awareness. Gradients are hand-derived and the optimizer is AdamW with
decoupled weight decay. Only this 3D branch ever trains; guided features
from the image side are frozen inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .alignment import AlignmentBatch, align_loss
from .core import IGNORE, DomainSample, PointCloud
from .dataio import BadMagic, TruncatedFile
from .metrics import ConfusionMatrix, accumulate, miou
from .mixup import MixConfig, apply_augment, draw_augment, hybrid_mix
from .projection import guided_features, sample_mask_ids

# Neighbor count for the local-context features. Fixed (not configurable)
# so checkpoints evaluate exactly as they trained.
K_NEIGHBORS = 8
C_LOCAL = 3
INPUT_DIM = 4 + C_LOCAL

CHECKPOINT_MAGIC = b"PADM"

PARAM_ORDER = ("W1", "b1", "W2", "b2", "Wc", "bc")

# Embedding width when no sample carries a feature map to dictate it.
DEFAULT_EMBED_DIM = 16


class NoValidLabels(Exception):
    def __init__(self):
        super().__init__("every label is IGNORE; segmentation loss undefined")


@dataclass(frozen=True)
class PointEncoder:
    W1: np.ndarray  # (h1, INPUT_DIM)
    b1: np.ndarray  # (h1,)
    W2: np.ndarray  # (d, h1)
    b2: np.ndarray  # (d,)

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W2.shape[0]


@dataclass(frozen=True)
class SegHead:
    Wc: np.ndarray  # (num_classes, d)
    bc: np.ndarray  # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.Wc.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8  # samples per step, per domain
    learning_rate: float = 0.01
    lam: float = 1.0  # alignment weight in L_seg + lam * L_align
    epochs: int = 8
    mixed_proportion: float = 0.5  # mixed fraction of the step's clouds
    tau: float = 0.9  # pseudo-label confidence threshold
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    hidden_width: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.mixed_proportion <= 1.0:
            raise ValueError("mixed_proportion must be in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")


def init_model(rng: np.random.Generator, d: int, num_classes: int, hidden: int = 32) -> tuple:
    """He-scaled random initialization; biases start tiny but nonzero so an
    all-dead rectifier cannot yield an exactly zero embedding."""
    w1 = rng.normal(0.0, np.sqrt(2.0 / INPUT_DIM), size=(hidden, INPUT_DIM))
    b1 = np.full(hidden, 0.01)
    w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(d, hidden))
    b2 = rng.normal(0.0, 0.01, size=d)
    wc = rng.normal(0.0, np.sqrt(1.0 / d), size=(num_classes, d))
    bc = np.zeros(num_classes)
    return PointEncoder(W1=w1, b1=b1, W2=w2, b2=b2), SegHead(Wc=wc, bc=bc)


# ---------------------------------------------------------------------------
# features and forward/backward


def local_context(cloud: PointCloud, k: int = K_NEIGHBORS) -> np.ndarray:
    """Mean offset to each point's k nearest neighbors (k capped at n-1)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = cloud.n
    if n < 1:
        raise ValueError("cloud must be nonempty")
    if n == 1:
        return np.zeros((1, C_LOCAL))
    k_eff = min(k, n - 1)
    pts = cloud.positions
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k_eff + 1)
    neighbors = idx[:, 1:]
    return np.mean(pts[neighbors] - pts[:, None, :], axis=1)


def build_inputs(cloud: PointCloud, ctx: np.ndarray) -> np.ndarray:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(cloud.n)
    return np.concatenate([cloud.positions, inten[:, None], ctx], axis=1)


def _forward_arrays(enc: PointEncoder, head: SegHead, x: np.ndarray) -> tuple:
    pre = x @ enc.W1.T + enc.b1
    hid = np.maximum(pre, 0.0)
    emb = hid @ enc.W2.T + enc.b2
    logits = emb @ head.Wc.T + head.bc
    return pre, hid, emb, logits


def forward(enc: PointEncoder, head: SegHead, cloud: PointCloud) -> tuple:
    """Per-point embeddings (n, d) and class logits (n, num_classes)."""
    ctx = local_context(cloud)
    _, _, emb, logits = _forward_arrays(enc, head, build_inputs(cloud, ctx))
    return emb, logits


def _backward_arrays(enc, head, x, pre, hid, emb, grad_logits, grad_embeddings) -> dict:
    grad_emb_total = grad_logits @ head.Wc + grad_embeddings
    grad_hid = grad_emb_total @ enc.W2
    grad_pre = grad_hid * (pre > 0.0)
    return {
        "W1": grad_pre.T @ x,
        "b1": grad_pre.sum(axis=0),
        "W2": grad_emb_total.T @ hid,
        "b2": grad_emb_total.sum(axis=0),
        "Wc": grad_logits.T @ emb,
        "bc": grad_logits.sum(axis=0),
    }


def backward(enc: PointEncoder, head: SegHead, cloud: PointCloud, grad_logits, grad_embeddings) -> dict:
    """Exact reverse-mode parameter gradients for both incoming paths.

    grad_logits carries the segmentation path, grad_embeddings the
    alignment path; either may be zero.
    """
    ctx = local_context(cloud)
    x = build_inputs(cloud, ctx)
    pre, hid, emb, _ = _forward_arrays(enc, head, x)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    grad_embeddings = np.asarray(grad_embeddings, dtype=np.float64)
    return _backward_arrays(enc, head, x, pre, hid, emb, grad_logits, grad_embeddings)


def seg_loss(logits: np.ndarray, labels: np.ndarray) -> tuple:
    """Mean cross-entropy over non-IGNORE points with its logit gradient."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    valid = np.flatnonzero(labels != IGNORE)
    if valid.size == 0:
        raise NoValidLabels()
    lg = logits[valid]
    m = lg.max(axis=1, keepdims=True)
    shifted = lg - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - lse
    loss = float(-np.sum(logp[np.arange(valid.size), labels[valid]]) / valid.size)
    grad = np.zeros_like(logits)
    soft = np.exp(logp)
    soft[np.arange(valid.size), labels[valid]] -= 1.0
    grad[valid] = soft / valid.size
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    t: int
    m: dict
    v: dict

    @staticmethod
    def zeros_like(params: dict) -> "AdamState":
        return AdamState(
            t=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def optimizer_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple:
    """One AdamW update with decoupled weight decay and bias correction."""
    t = state.t + 1
    new_params = {}
    new_m = {}
    new_v = {}
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for key, p in params.items():
        g = grads[key]
        p = p * (1.0 - cfg.learning_rate * cfg.weight_decay)
        m = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * (g * g)
        new_params[key] = p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(t=t, m=new_m, v=new_v)


def params_of(enc: PointEncoder, head: SegHead) -> dict:
    return {"W1": enc.W1, "b1": enc.b1, "W2": enc.W2, "b2": enc.b2, "Wc": head.Wc, "bc": head.bc}


def model_of(params: dict) -> tuple:
    enc = PointEncoder(W1=params["W1"], b1=params["b1"], W2=params["W2"], b2=params["b2"])
    return enc, SegHead(Wc=params["Wc"], bc=params["bc"])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, enc: PointEncoder, head: SegHead) -> None:
    dims = (INPUT_DIM, enc.hidden, enc.dim, head.num_classes, C_LOCAL)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5I", *dims))
        for key, arr in zip(PARAM_ORDER, (enc.W1, enc.b1, enc.W2, enc.b2, head.Wc, head.bc)):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(path, CHECKPOINT_MAGIC, data[:4], 0)
    if len(data) < 24:
        raise TruncatedFile(path, 24, len(data), 0)
    input_dim, h1, d, num_classes, c_local = struct.unpack("<5I", data[4:24])
    shapes = [(h1, input_dim), (h1,), (d, h1), (d,), (num_classes, d), (num_classes,)]
    offset = 24
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise TruncatedFile(path, end - offset, len(data) - offset, offset)
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset = end
    enc = PointEncoder(W1=arrays[0], b1=arrays[1], W2=arrays[2], b2=arrays[3])
    head = SegHead(Wc=arrays[4], bc=arrays[5])
    return enc, head


# ---------------------------------------------------------------------------
# training


@dataclass
class _Prep:
    """Per-sample arrays precomputed once: geometry is static, so context,
    coverage, and guided features are sampled on unaugmented points."""

    sample_id: int
    positions: np.ndarray
    intensity: np.ndarray
    ctx: np.ndarray
    seg_labels: np.ndarray  # IGNORE-filled when labels must not train
    guided: np.ndarray
    covered: np.ndarray
    mask_ids: np.ndarray | None


def _prep_sample(sample: DomainSample, use_labels: bool, want_guided: bool, want_masks: bool, d: int) -> _Prep:
    cloud = sample.cloud
    n = cloud.n
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(n)
    if use_labels and cloud.labels is not None:
        seg_labels = cloud.labels.copy()
    else:
        seg_labels = np.full(n, IGNORE, dtype=np.int64)
    if want_guided and sample.views:
        guided, covered = guided_features(sample)
    else:
        guided, covered = np.zeros((n, d)), np.zeros(n, dtype=bool)
    mask_ids = sample_mask_ids(sample) if want_masks else None
    return _Prep(
        sample_id=sample.sample_id,
        positions=cloud.positions,
        intensity=inten,
        ctx=local_context(cloud) if n else np.zeros((0, C_LOCAL)),
        seg_labels=seg_labels,
        guided=guided,
        covered=covered,
        mask_ids=mask_ids,
    )


def _augmented_inputs(prep: _Prep, rng: np.random.Generator) -> np.ndarray:
    # k-NN sets are invariant under flip/rotation/uniform scale, so the
    # cached context transforms with the same linear map as the points.
    params = draw_augment(rng)
    pos = params.apply_to_vectors(prep.positions)
    ctx = params.apply_to_vectors(prep.ctx)
    return np.concatenate([pos, prep.intensity[:, None], ctx], axis=1)


@dataclass
class TrainResult:
    encoder: PointEncoder
    head: SegHead
    log_lines: list
    target_mious: list


def evaluate(enc: PointEncoder, head: SegHead, samples, num_classes: int, ctx_cache: dict | None = None) -> float:
    """mIoU of argmax predictions against the samples' own labels."""
    cm = ConfusionMatrix(num_classes)
    for s in samples:
        if s.cloud.labels is None or s.cloud.n == 0:
            continue
        if ctx_cache is not None:
            ctx = ctx_cache.get(s.sample_id)
            if ctx is None:
                ctx = ctx_cache[s.sample_id] = local_context(s.cloud)
        else:
            ctx = local_context(s.cloud)
        _, _, _, logits = _forward_arrays(enc, head, build_inputs(s.cloud, ctx))
        accumulate(cm, s.cloud.labels, np.argmax(logits, axis=1))
    return miou(cm)


def pseudo_labels(enc: PointEncoder, head: SegHead, samples, tau: float) -> tuple:
    """Predicted labels for target samples, thresholded at confidence tau.

    Per point the argmax class is kept when its softmax probability is at
    least tau, else IGNORE. Returns (relabeled samples, kept fraction).
    """
    out = []
    kept = 0
    total = 0
    for s in samples:
        _, logits = forward(enc, head, s.cloud)
        m = logits.max(axis=1, keepdims=True)
        probs = np.exp(logits - m)
        probs /= probs.sum(axis=1, keepdims=True)
        pred = np.argmax(probs, axis=1)
        conf = probs[np.arange(probs.shape[0]), pred]
        labels = np.where(conf >= tau, pred, IGNORE).astype(np.int64)
        kept += int(np.sum(labels != IGNORE))
        total += labels.size
        out.append(replace(s, cloud=PointCloud(s.cloud.positions, s.cloud.intensity, labels)))
    fraction = kept / total if total else 0.0
    return out, fraction


def _mix_counts(n_normal: int, proportion: float) -> int:
    if proportion <= 0.0 or n_normal == 0:
        return 0
    if proportion >= 1.0:
        return 4 * n_normal  # capped; an all-mixed step has no labeled anchor
    return int(round(n_normal * proportion / (1.0 - proportion)))


def train(
    source_samples,
    target_samples,
    mix_cfg: MixConfig | None,
    cfg: TrainConfig,
    num_classes: int,
    eval_samples=None,
    init: tuple | None = None,
    use_target_labels: bool = False,
) -> TrainResult:
    """Joint training over source, target, and hybrid-mixed clouds.

    Source samples contribute segmentation and alignment loss; target
    samples contribute alignment only unless use_target_labels is set
    (the pseudo-label retraining stage). Mixed clouds are generated per
    step with hybrid_mix when mix_cfg is given and mixed_proportion > 0,
    and their guided features come from each point's original views via
    provenance. Deterministic given cfg.seed.
    """
    if not source_samples:
        raise ValueError("source manifest is empty")
    rng = np.random.default_rng(cfg.seed)

    d = None
    for s in list(source_samples) + list(target_samples):
        if s.views:
            d = s.views[0][1].channels
            break
    if d is None:
        d = DEFAULT_EMBED_DIM
    if init is not None:
        enc, head = init
    else:
        enc, head = init_model(rng, d=d, num_classes=num_classes, hidden=cfg.hidden_width)

    use_align = cfg.lam > 0.0
    mixing = mix_cfg is not None and cfg.mixed_proportion > 0.0 and len(target_samples) > 0
    want_masks = mixing and mix_cfg.weights[3] > 0
    use_target = use_align or use_target_labels or mixing

    prep = {}
    for s in source_samples:
        prep[s.sample_id] = _prep_sample(s, use_labels=True, want_guided=use_align, want_masks=want_masks, d=d)
    if use_target:
        for s in target_samples:
            prep[s.sample_id] = _prep_sample(
                s, use_labels=use_target_labels, want_guided=use_align, want_masks=want_masks, d=d
            )

    src_ids = [s.sample_id for s in source_samples]
    tgt_ids = [s.sample_id for s in target_samples] if use_target else []
    by_id = {s.sample_id: s for s in list(source_samples) + list(target_samples)}

    params = params_of(enc, head)
    state = AdamState.zeros_like(params)
    steps = max(1, -(-len(src_ids) // cfg.batch_size))
    log_lines = []
    target_mious = []
    eval_ctx_cache = {}

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(src_ids))
        seg_sum = 0.0
        align_sum = 0.0
        for step in range(steps):
            batch_ids = [src_ids[i] for i in order[step * cfg.batch_size : (step + 1) * cfg.batch_size]]
            if tgt_ids:
                take = rng.choice(len(tgt_ids), size=min(cfg.batch_size, len(tgt_ids)), replace=False)
                batch_ids += [tgt_ids[i] for i in take]

            xs, labels, guided, covered = [], [], [], []
            for sid in batch_ids:
                p = prep[sid]
                xs.append(_augmented_inputs(p, rng))
                labels.append(p.seg_labels)
                guided.append(p.guided)
                covered.append(p.covered)

            n_mix = _mix_counts(len(batch_ids), cfg.mixed_proportion) if mixing else 0
            for _ in range(n_mix):
                si = src_ids[int(rng.integers(len(src_ids)))]
                ti = tgt_ids[int(rng.integers(len(tgt_ids)))]
                a_id, b_id = (si, ti) if rng.random() < 0.5 else (ti, si)
                mixed = hybrid_mix(by_id[a_id], by_id[b_id], mix_cfg, rng, a_mask_ids=prep[a_id].mask_ids)
                sid_col, idx_col = mixed.provenance[:, 0], mixed.provenance[:, 1]
                mlab = np.empty(mixed.cloud.n, dtype=np.int64)
                mguided = np.empty((mixed.cloud.n, d))
                mcovered = np.empty(mixed.cloud.n, dtype=bool)
                for origin in (a_id, b_id):
                    rows = sid_col == origin
                    src = prep[origin]
                    mlab[rows] = src.seg_labels[idx_col[rows]]
                    mguided[rows] = src.guided[idx_col[rows]]
                    mcovered[rows] = src.covered[idx_col[rows]]
                aug = apply_augment(mixed.cloud, draw_augment(rng))
                ctx = local_context(aug)
                xs.append(build_inputs(aug, ctx))
                labels.append(mlab)
                guided.append(mguided)
                covered.append(mcovered)

            x = np.concatenate(xs, axis=0)
            lab = np.concatenate(labels)
            pre, hid, emb, logits = _forward_arrays(enc, head, x)

            if np.any(lab != IGNORE):
                sl, grad_logits = seg_loss(logits, lab)
            else:
                sl, grad_logits = 0.0, np.zeros_like(logits)
            if use_align:
                batch = AlignmentBatch(emb, np.concatenate(guided, axis=0), np.concatenate(covered))
                al, grad_emb = align_loss(batch)
                grad_emb = cfg.lam * grad_emb
            else:
                al, grad_emb = 0.0, np.zeros_like(emb)

            grads = _backward_arrays(enc, head, x, pre, hid, emb, grad_logits, grad_emb)
            params, state = optimizer_step(params, grads, state, cfg)
            enc, head = model_of(params)
            seg_sum += sl
            align_sum += al

        ep_miou = (
            evaluate(enc, head, eval_samples, num_classes, ctx_cache=eval_ctx_cache)
            if eval_samples
            else float("nan")
        )
        target_mious.append(ep_miou)
        log_lines.append(f"{epoch} {seg_sum / steps:.6f} {align_sum / steps:.6f} {ep_miou:.6f}")

    return TrainResult(encoder=enc, head=head, log_lines=log_lines, target_mious=target_mious)
