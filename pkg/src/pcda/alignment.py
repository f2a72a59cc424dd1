"""Cosine alignment loss between trainable and guided point embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Covered rows with a norm at or below this are treated as a dead encoder.
EPS_NORM = 1e-12


class DegenerateNorm(Exception):
    def __init__(self, index, side):
        super().__init__(f"row {index}: {side} embedding norm below {EPS_NORM}")
        self.index = index


@dataclass(frozen=True)
class AlignmentBatch:
    """Trainable embeddings, frozen guided embeddings, and coverage mask.

    Rows of f_guided for uncovered points are never read and may hold
    anything.
    """

    f_point: np.ndarray  # (n, d) float64, trainable side
    f_guided: np.ndarray  # (n, d) float64, frozen side
    covered: np.ndarray  # (n,) bool

    def __post_init__(self):
        fp = np.asarray(self.f_point, dtype=np.float64)
        fg = np.asarray(self.f_guided, dtype=np.float64)
        cov = np.asarray(self.covered, dtype=bool).reshape(-1)
        if fp.shape != fg.shape or fp.ndim != 2 or cov.shape[0] != fp.shape[0]:
            raise ValueError(f"shape mismatch: f_point {fp.shape}, f_guided {fg.shape}, covered {cov.shape}")
        object.__setattr__(self, "f_point", fp)
        object.__setattr__(self, "f_guided", fg)
        object.__setattr__(self, "covered", cov)


def align_loss(batch: AlignmentBatch) -> tuple:
    """Mean (1 - cosine similarity) over covered rows, with its gradient.

    Returns (loss, grad) where grad is (n, d) with respect to f_point only;
    the guided side is frozen and uncovered rows get exactly zero gradient.
    Raises DegenerateNorm if any covered row of either side has a norm at
    or below EPS_NORM. With no covered rows the loss and gradient are zero.
    """
    n, d = batch.f_point.shape
    grad = np.zeros((n, d))
    idx = np.flatnonzero(batch.covered)
    if idx.size == 0:
        return 0.0, grad

    fp = batch.f_point[idx]
    fg = batch.f_guided[idx]
    norm_p = np.sqrt(np.sum(fp * fp, axis=1))
    norm_g = np.sqrt(np.sum(fg * fg, axis=1))
    for side, norms in (("trainable", norm_p), ("guided", norm_g)):
        bad = np.flatnonzero(~(norms > EPS_NORM))
        if bad.size:
            raise DegenerateNorm(int(idx[bad[0]]), side)

    dots = np.sum(fg * fp, axis=1)
    # Clamp so rounding can never push the loss outside [0, 2].
    cos = np.clip(dots / (norm_g * norm_p), -1.0, 1.0)
    n_cov = idx.size
    loss = float(np.sum(1.0 - cos) / n_cov)

    inv = 1.0 / (norm_g * norm_p)
    grad_rows = -(fg * inv[:, None] - (cos / (norm_p * norm_p))[:, None] * fp) / n_cov
    grad[idx] = grad_rows
    return loss, grad
