"""Mask and segmentation objectives: focal, dice, pairwise-cosine diversity,
the per-component concept loss over matched mask unions, per-pixel
cross-entropy and the beta-weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

DICE_EPS = 1e-6
PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    """Balancing weights: rho scales dice, gamma the cosine diversity term,
    beta the whole concept loss against cross-entropy."""

    rho: float = 1.0
    gamma: float = 0.25
    beta: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("rho", "gamma", "beta", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"LossWeights.{name} must be >= 0")


def _check_same_shape(op, pred, target):
    if pred.shape != target.shape:
        raise ad.ShapeError(f"{op}: pred {pred.shape} vs target {target.shape}")


def focal_loss(pred, target, focal_gamma=2.0):
    """Mean of -(1 - p_t)^gamma * log(p_t) with p_t = pred on the target's
    support and 1 - pred elsewhere. No class-balance factor."""
    pred = as_tensor(pred)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    _check_same_shape("focal_loss", pred.data, t)
    p = ad.clamp(pred, PROB_FLOOR, 1.0 - PROB_FLOOR)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    return (-(ad.power(1.0 - p_t, focal_gamma) * ad.log(p_t))).mean()


def dice_loss(pred, target):
    """Soft dice with squared denominator: 1 - (2*sum(p*t)+eps)/(sum(p^2)+sum(t^2)+eps)."""
    pred = as_tensor(pred)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    _check_same_shape("dice_loss", pred.data, t)
    inter = (pred * t).sum()
    denom = (pred * pred).sum() + float((t * t).sum())
    return 1.0 - (2.0 * inter + DICE_EPS) * ad.power(denom + DICE_EPS, -1.0)


def cosine_similarity(a, b):
    """Cosine of two masks as flattened vectors; norms must be nonzero."""
    a, b = as_tensor(a), as_tensor(b)
    assert np.any(a.data) and np.any(b.data), "cosine_similarity: zero-norm mask"
    dot = (a * b).sum()
    na = ad.power((a * a).sum(), 0.5)
    nb = ad.power((b * b).sum(), 0.5)
    return dot * ad.power(na * nb, -1.0)


def cosine_pair_loss(masks):
    """Mean cosine similarity over unordered pairs; 0 for fewer than 2 masks."""
    if len(masks) < 2:
        return Tensor(0.0)
    terms = [
        cosine_similarity(masks[i], masks[k])
        for i in range(len(masks))
        for k in range(i + 1, len(masks))
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _region_mask(p_flat, region, num_regions):
    """Pick one soft mask column out of flattened region masks (WH, K)."""
    picker = np.zeros((num_regions, 1))
    picker[region, 0] = 1.0
    return ad.matmul(p_flat, Tensor(picker))


def concept_loss(p, components, assignment, weights):
    """Supervision of latent regions by ground-truth connected components.

    For each component j, the masks matched to it are summed, clamped to
    [0, 1] and scored with focal + rho*dice against the component's binary
    mask; gamma weights the mean pairwise cosine similarity of the raw masks
    competing for that component.
    """
    p = as_tensor(p)
    w_dim, h_dim, num_regions = p.data.shape
    p_flat = p.reshape(w_dim * h_dim, num_regions)

    by_component = {}
    for region, comp in assignment.pairs:
        by_component.setdefault(comp, []).append(region)

    total = Tensor(0.0)
    for comp_idx, comp in enumerate(components):
        regions = by_component.get(comp_idx)
        if not regions:
            raise ValueError(f"concept_loss: component {comp_idx} has no matched region")
        masks = [_region_mask(p_flat, r, num_regions) for r in sorted(regions)]
        union = masks[0]
        for m in masks[1:]:
            union = union + m
        union = ad.clamp(union, 0.0, 1.0)
        target = np.asarray(comp.mask, dtype=np.float64).reshape(-1, 1)
        total = total + focal_loss(union, target, weights.focal_gamma)
        total = total + weights.rho * dice_loss(union, target)
        total = total + weights.gamma * cosine_pair_loss(masks)
    return total


def pixel_cross_entropy(logits, labels):
    """Mean over pixels of -log softmax(logits)[true class]."""
    logits = as_tensor(logits)
    class_ids = np.asarray(getattr(labels, "class_ids", labels))
    w_dim, h_dim, num_classes = logits.data.shape
    if class_ids.shape != (w_dim, h_dim):
        raise ad.ShapeError(f"pixel_cross_entropy: labels {class_ids.shape} vs logits {logits.data.shape}")
    if class_ids.min() < 0 or class_ids.max() >= num_classes:
        raise ValueError(f"pixel_cross_entropy: class id outside [0, {num_classes})")
    onehot = np.zeros((w_dim, h_dim, num_classes))
    ww, hh = np.meshgrid(np.arange(w_dim), np.arange(h_dim), indexing="ij")
    onehot[ww, hh, class_ids] = 1.0
    probs = (ad.softmax(logits, axis=-1) * onehot).sum(axis=-1)
    return (-ad.log(probs)).mean()


def total_loss(ce, concept, beta):
    """Cross-entropy plus beta times the concept supervision term."""
    if beta < 0:
        raise ValueError("total_loss: beta must be >= 0")
    ce = as_tensor(ce)
    if beta == 0.0:
        return ce  # supervision-off path: concept term contributes nothing
    return ce + beta * as_tensor(concept)
