"""Feature-affinity distillation losses.

Each guidance tap is pooled by 0.25 per spatial dimension, flattened, and
multiplied with its own transpose, giving a per-item C x C affinity (Gram)
matrix of pairwise channel correlations.  The distillation loss penalises
the gap between the student's and the frozen teacher's affinity matrices
with one of three metrics:

* ``kl``  -- rows are clamped to be non-negative, epsilon-smoothed and
  normalised into probability distributions, then KL(student || teacher)
  is averaged over rows;
* ``l2`` / ``l1`` -- squared / absolute entrywise difference, averaged over
  the C x C entries, with each matrix first divided by its pooled spatial
  count so that taps of different resolutions are comparable.

Alternatively the same metrics can be applied directly to the tap tensors
(``gram=False``), which requires the paired taps to share shapes.

The total training objective is the student's reconstruction error plus
``w_fa`` times the mean of the per-level affinity terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

KL_EPS = 1e-8
LOSS_KINDS = ("l2", "l1", "kl")


@dataclass
class FALossConfig:
    kind: str = "l2"
    w_fa: float = 0.25
    pool_factor: float = 0.25
    gram: bool = True   # False applies the metric to raw taps instead

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, "
                             f"got {self.kind!r}")
        if self.w_fa < 0:
            raise ValueError(f"w_fa must be non-negative, got {self.w_fa}")
        if not self.gram and self.kind == "kl":
            raise ValueError("kl is defined on affinity distributions only")


def affinity(tap, pool_factor=0.25):
    """(B,C,H,W) tap -> (B,C,C) Gram matrix of its pooled, flattened rows."""
    t = tap.tensor if hasattr(tap, "tensor") else tap
    if t.ndim != 4 or min(t.shape) < 1:
        raise T.DimensionError(f"affinity expects non-empty (B,C,H,W), got "
                               f"{t.shape}")
    pooled = T.avg_pool2d(t, pool_factor)
    flat = T.flatten_spatial(pooled)
    return T.batched_matmul(flat, T.transpose_last2(flat))


def pooled_positions(shape, pool_factor=0.25):
    """Number of spatial positions after pooling (pad-then-pool rule)."""
    k = int(round(1.0 / pool_factor))
    h, w = shape[2], shape[3]
    return -(-h // k) * -(-w // k)


def _row_distributions(m):
    """Turn Gram rows into strictly positive probability rows: negatives are
    clamped (activations can be signed), then epsilon-smoothed and
    normalised to sum one.  The smoothing offset is relative to the matrix
    magnitude (and treated as constant by the gradient): a fixed absolute
    epsilon would make the loss depend on the overall feature scale, which
    row normalisation is meant to remove."""
    scale = float(np.mean(np.abs(m.data)))
    eps = KL_EPS * scale if scale > 0 else KL_EPS
    return T.normalize_last(T.relu(m), eps=eps)


def fa_loss_kl(h, c):
    """Mean over rows of KL(H || C) = sum H*log(H/C) between the two
    affinity matrices' row distributions; >= 0, zero iff identical."""
    if h.shape != c.shape:
        raise T.DimensionError(f"fa_loss_kl: {h.shape} vs {c.shape}")
    hd = _row_distributions(h)
    cd = _row_distributions(c)
    per_entry = T.hadamard(hd, T.sub(T.log(hd), T.log(cd)))
    rows = h.size // h.shape[-1]
    return T.scale(T.sum_all(per_entry), 1.0 / rows)


def fa_loss_gram(h, c, kind="l2", norm_h=1, norm_c=1):
    """Entrywise metric between affinity matrices, averaged over the C x C
    entries; ``norm_*`` divide each side by its pooled spatial count so
    matrices from different tap resolutions live on the same scale."""
    if h.shape != c.shape:
        raise T.DimensionError(f"fa_loss_gram: {h.shape} vs {c.shape}")
    diff = T.sub(T.scale(h, 1.0 / norm_h), T.scale(c, 1.0 / norm_c))
    if kind == "l2":
        return T.mean_all(T.hadamard(diff, diff))
    if kind == "l1":
        return T.mean_all(T.abs_(diff))
    raise ValueError(f"fa_loss_gram supports l2/l1, got {kind!r}")


def fa_loss_pixel(h, c, norm="l2"):
    """Same metrics applied directly to the tap tensors (pixel level)."""
    ht = h.tensor if hasattr(h, "tensor") else h
    ct = c.tensor if hasattr(c, "tensor") else c
    if ht.shape != ct.shape:
        raise T.DimensionError(f"fa_loss_pixel: {ht.shape} vs {ct.shape}")
    diff = T.sub(ht, ct)
    if norm == "l2":
        return T.mean_all(T.hadamard(diff, diff))
    if norm == "l1":
        return T.mean_all(T.abs_(diff))
    raise ValueError(f"fa_loss_pixel norm must be l2 or l1, got {norm!r}")


def fa_term(student_tap, teacher_tap, cfg):
    """Distillation term for one paired tap level."""
    s = student_tap.tensor if hasattr(student_tap, "tensor") else student_tap
    t = teacher_tap.tensor if hasattr(teacher_tap, "tensor") else teacher_tap
    if not cfg.gram:
        return fa_loss_pixel(s, t, norm=cfg.kind)
    gs = affinity(s, cfg.pool_factor)
    gt = affinity(t, cfg.pool_factor)
    if cfg.kind == "kl":
        return fa_loss_kl(gs, gt)
    return fa_loss_gram(gs, gt, kind=cfg.kind,
                        norm_h=pooled_positions(s.shape, cfg.pool_factor),
                        norm_c=pooled_positions(t.shape, cfg.pool_factor))


def pair_taps(student_taps, teacher_taps):
    """Student tap k pairs with teacher level min(k, n_teacher - 1)."""
    n = len(teacher_taps)
    return [(st, teacher_taps[min(k, n - 1)])
            for k, st in enumerate(student_taps)]


def total_loss(l_mse_s, fa_terms, cfg):
    """L_total = L_mse + w_fa * mean(fa_terms).  Multi-level terms are
    averaged, not summed, so w_fa keeps its meaning when the number of tap
    levels changes."""
    if not np.isfinite(l_mse_s.data).all() or l_mse_s.item() < 0:
        raise ValueError(f"reconstruction loss must be finite and >= 0, "
                         f"got {l_mse_s.data}")
    for term in fa_terms:
        if not np.isfinite(term.data).all() or term.item() < 0:
            raise ValueError(f"affinity terms must be finite and >= 0, "
                             f"got {term.data}")
    if not fa_terms:
        return l_mse_s
    acc = fa_terms[0]
    for term in fa_terms[1:]:
        acc = T.add(acc, term)
    return T.add(l_mse_s, T.scale(acc, cfg.w_fa / len(fa_terms)))
