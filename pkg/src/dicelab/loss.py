"""Dice loss over a reduction partition, with exact analytic gradient.

Forward, per subset s of the chosen partition:

    sdsc(s) = (2 * sum_s(y * p) + eps) / (sum_s(y) + sum_s(p) + eps)
    loss    = 1 - mean over counted subsets of sdsc(s)

Backward, for an element w inside subset s, with S = sum_s(y) + sum_s(p) + eps
and N = 2 * sum_s(y * p) + eps:

    dloss/dp_w = -(1/K) * (2 * y_w / S - N / S^2)

where K is the number of counted subsets. Because S and N aggregate over the
whole subset, the gradient takes at most two distinct values per subset, one
for y_w = 0 and one for y_w = 1.

Variants: the leaf variant drops subsets whose ground truth is empty (they get
zero gradient and do not count toward K); the marginal variant first folds the
predicted probabilities of unavailable classes into the background column and
routes the background gradient back to them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    EpsilonShapeError,
    InvalidConfigError,
    MissingLabelNotEmptyError,
    NotADistributionError,
    ShapeMismatchError,
)
from .tensor import (
    BatchTensor,
    ReductionScheme,
    Shape,
    SubsetSpec,
    SubsetStats,
    _wrap,
    broadcast_per_subset,
    scheme_sums,
    subset_class_tags,
)

DISTRIBUTION_TOL = 1e-6


class Variant(enum.Enum):
    STANDARD = "standard"
    LEAF = "leaf"
    MARGINAL = "marginal"


@dataclass(frozen=True)
class AvailabilityMask:
    """Per (batch element, class) flag: is this class labeled in this element?"""

    available: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.available, dtype=bool)
        if arr.ndim != 2:
            raise ShapeMismatchError(f"availability mask must be 2-D (B, C), got ndim {arr.ndim}")
        object.__setattr__(self, "available", arr)


@dataclass(frozen=True)
class DiceLossConfig:
    """Scheme, smoothing epsilon (scalar or per-class) and variant.

    Per-class epsilon requires a scheme whose subsets are class-pure
    (image-wise or batch-wise). background_class is required for the
    marginal variant and disallowed otherwise.
    """

    scheme: ReductionScheme
    epsilon: float | Sequence[float] | np.ndarray = 1e-7
    variant: Variant = Variant.STANDARD
    background_class: int | None = None

    def __post_init__(self):
        eps = self.epsilon
        if np.isscalar(eps):
            if float(eps) < 0.0:
                raise InvalidConfigError(f"epsilon must be non-negative, got {eps}")
        else:
            vec = np.asarray(eps, dtype=np.float64).reshape(-1)
            if np.any(vec < 0.0):
                raise InvalidConfigError("per-class epsilon entries must be non-negative")
            if not self.scheme.class_pure:
                raise EpsilonShapeError(
                    f"per-class epsilon requires a class-pure scheme, got {self.scheme.value}"
                )
            object.__setattr__(self, "epsilon", vec)
        if self.variant is Variant.MARGINAL:
            if self.background_class is None or self.background_class < 0:
                raise InvalidConfigError("marginal variant requires a background_class index")
        elif self.background_class is not None:
            raise InvalidConfigError("background_class is only meaningful for the marginal variant")


@dataclass(frozen=True)
class LossOutput:
    """Loss value plus per-subset diagnostics for the counted subsets."""

    value: float
    per_subset: list[tuple[int, SubsetStats, float]]
    effective_subset_count: int


def leaf_filter(gt: BatchTensor, subsets: list[SubsetSpec]) -> list[SubsetSpec]:
    """Keep only subsets whose ground truth contains foreground, order preserved."""
    flat = gt.flat()
    return [s for s in subsets if float(np.sum(flat[s.members])) > 0.0]


def marginal_merge(
    gt: BatchTensor,
    pred: BatchTensor,
    mask: AvailabilityMask,
    background_class: int,
) -> tuple[BatchTensor, BatchTensor, np.ndarray]:
    """Fold unavailable-class predictions into the background column.

    Predictions must be softmax-style (class columns sum to 1 per pixel) and
    the ground truth of every unavailable class must already be empty. Merged
    columns are zeroed in place of being physically removed; the returned
    routing table maps, per batch element, each original class to the merged
    column that now carries it (itself when available, background otherwise).
    """
    if gt.shape != pred.shape:
        raise ShapeMismatchError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    B, C, I = gt.shape.as_tuple()
    if C < 2:
        raise InvalidConfigError("marginal merging requires multiclass (C >= 2) predictions")
    if not (0 <= background_class < C):
        raise InvalidConfigError(f"background_class {background_class} out of range for C={C}")
    avail = mask.available
    if avail.shape != (B, C):
        raise ShapeMismatchError(f"availability mask shape {avail.shape} != (B, C)=({B}, {C})")
    if not np.all(avail[:, background_class]):
        raise InvalidConfigError("background class must be available in every batch element")

    col_sums = pred.data.sum(axis=1)
    if np.any(np.abs(col_sums - 1.0) > DISTRIBUTION_TOL):
        worst = float(np.max(np.abs(col_sums - 1.0)))
        raise NotADistributionError(f"prediction columns must sum to 1 per pixel (max dev {worst:.3g})")

    unavailable = ~avail
    if np.any(gt.data[unavailable] != 0.0):
        raise MissingLabelNotEmptyError("ground truth of an unavailable class contains foreground")

    merged_pred = pred.data.copy()
    spill = (merged_pred * unavailable[:, :, None]).sum(axis=1)
    merged_pred[unavailable] = 0.0
    merged_pred[:, background_class, :] += spill

    routing = np.where(avail, np.arange(C)[None, :], background_class)
    return (_wrap(gt.shape, gt.data.copy()), _wrap(gt.shape, merged_pred), routing)


def _eps_per_subset(cfg: DiceLossConfig, shape: Shape, n_subsets: int) -> np.ndarray:
    eps = cfg.epsilon
    if np.isscalar(eps):
        return np.full(n_subsets, float(eps))
    vec = np.asarray(eps, dtype=np.float64)
    if vec.size != shape.classes:
        raise EpsilonShapeError(
            f"per-class epsilon has {vec.size} entries but tensor has {shape.classes} classes"
        )
    tags = subset_class_tags(cfg.scheme, shape)
    return vec[tags]


def _marginal_kept(cfg: DiceLossConfig, shape: Shape, avail: np.ndarray) -> np.ndarray:
    """Subsets excluded from the mean because every cell they cover was merged away."""
    B, C, _ = shape.as_tuple()
    bg = cfg.background_class
    if cfg.scheme is ReductionScheme.IMAGE_WISE:
        kept = avail.copy()
        kept[:, bg] = True
        return kept.reshape(B * C)
    if cfg.scheme is ReductionScheme.BATCH_WISE:
        kept = avail.any(axis=0)
        kept[bg] = True
        return kept
    n = B if cfg.scheme is ReductionScheme.CLASS_WISE else 1
    return np.ones(n, dtype=bool)


def _evaluate(gt: BatchTensor, pred: BatchTensor, cfg: DiceLossConfig,
              mask: AvailabilityMask | None):
    """Shared forward pipeline; returns everything backward needs as well."""
    if gt.shape != pred.shape:
        raise ShapeMismatchError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    shape = gt.shape
    routing = None
    if cfg.variant is Variant.MARGINAL:
        if mask is None:
            raise InvalidConfigError("marginal variant requires an availability mask")
        gt, pred, routing = marginal_merge(gt, pred, mask, cfg.background_class)
        kept = _marginal_kept(cfg, shape, mask.available)
    else:
        kept = None

    y = gt.data
    p = pred.data
    inter = scheme_sums(cfg.scheme, shape, y * p)
    gsum = scheme_sums(cfg.scheme, shape, y)
    psum = scheme_sums(cfg.scheme, shape, p)
    n_subsets = inter.size
    eps = _eps_per_subset(cfg, shape, n_subsets)

    if cfg.variant is Variant.LEAF:
        kept = gsum > 0.0
    elif kept is None:
        kept = np.ones(n_subsets, dtype=bool)

    S = gsum + psum + eps
    N = 2.0 * inter + eps
    sdsc = np.zeros(n_subsets)
    sdsc[kept] = N[kept] / S[kept]
    K = int(np.count_nonzero(kept))
    value = 1.0 - float(sdsc[kept].mean()) if K > 0 else 0.0
    return value, (shape, y, inter, gsum, psum, S, N, sdsc, kept, K, routing)


def dice_forward(
    gt: BatchTensor,
    pred: BatchTensor,
    cfg: DiceLossConfig,
    mask: AvailabilityMask | None = None,
) -> LossOutput:
    """Dice loss value plus per-subset scores (counted subsets only)."""
    value, (_, _, inter, gsum, psum, _, _, sdsc, kept, K, _) = _evaluate(gt, pred, cfg, mask)
    per_subset = [
        (int(i), SubsetStats(float(inter[i]), float(gsum[i]), float(psum[i])), float(sdsc[i]))
        for i in np.flatnonzero(kept)
    ]
    return LossOutput(value=value, per_subset=per_subset, effective_subset_count=K)


def dice_backward(
    gt: BatchTensor,
    pred: BatchTensor,
    cfg: DiceLossConfig,
    mask: AvailabilityMask | None = None,
) -> BatchTensor:
    """Analytic gradient of the loss with respect to every prediction element.

    Dropped subsets (leaf variant, or marginal columns merged away) receive
    exactly zero; for the marginal variant the gradient is computed on the
    merged maps and routed back through the background sum.
    """
    _, (shape, y, _, _, _, S, N, _, kept, K, routing) = _evaluate(gt, pred, cfg, mask)
    n_subsets = S.size
    g0 = np.zeros(n_subsets)
    g1 = np.zeros(n_subsets)
    if K > 0:
        ratio = N[kept] / (S[kept] * S[kept])
        g0[kept] = ratio / K
        g1[kept] = -(2.0 / S[kept] - ratio) / K
    grad = np.where(
        y == 1.0,
        broadcast_per_subset(cfg.scheme, shape, g1),
        broadcast_per_subset(cfg.scheme, shape, g0),
    )
    if routing is not None:
        grad = np.take_along_axis(grad, routing[:, :, None], axis=1)
    return _wrap(shape, grad)
