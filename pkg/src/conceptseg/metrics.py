"""Entropy and variance metrics over token histograms.

Each token's soft mask votes per-pixel for the ground-truth label beneath
it; the normalized vote histogram's entropy measures how semantically pure
the token is (lower = purer), and the across-token variance of the
histograms measures how diverse the token set is (higher = more diverse).
Both exist at class level and, where instance ids are available, at
instance level over "things" pixels.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np


class UndefinedHistogramError(ValueError):
    """Raised when a mask has zero total weight over the labeled pixels."""


@dataclass
class TokenHistogram:
    """Normalized soft-vote distribution over the labels present in one image."""

    bins: dict[int, float]
    token: int = 0

    def entropy(self):
        """Shannon entropy in nats; 0*log(0) taken as 0."""
        probs = np.array(list(self.bins.values()))
        nz = probs[probs > 0]
        return float(-(nz * np.log(nz)).sum())

    def as_array(self, label_order):
        return np.array([self.bins.get(label, 0.0) for label in label_order])


def token_histogram(mask, labels, present):
    """Histogram of `mask`'s weight over each label in `present`.

    Pixels whose label is not in `present` are excluded. Raises
    UndefinedHistogramError if no weight falls on labeled pixels.
    """
    mask = np.asarray(mask, dtype=np.float64)
    labels = np.asarray(labels)
    if mask.shape != labels.shape:
        raise ValueError(f"token_histogram: mask {mask.shape} vs labels {labels.shape}")
    if mask.min() < 0:
        raise ValueError("token_histogram: mask weights must be non-negative")
    present = sorted(set(int(v) for v in present))
    labeled = np.isin(labels, present)
    total = mask[labeled].sum()
    if total <= 0:
        raise UndefinedHistogramError("zero total mask weight over labeled pixels")
    return TokenHistogram({lab: float(mask[labels == lab].sum() / total) for lab in present})


def image_histograms(masks, labels, present):
    """Per-token histograms for one image; masks is (W, H, K)."""
    masks = np.asarray(getattr(masks, "data", masks), dtype=np.float64)
    out = []
    for k in range(masks.shape[2]):
        hist = token_histogram(masks[:, :, k], labels, present)
        hist.token = k
        out.append(hist)
    return out


def semantics_score(histograms):
    """Dataset mean of per-image mean token entropy (natural log)."""
    per_image = [float(np.mean([h.entropy() for h in hists])) for hists in histograms]
    return float(np.mean(per_image))


def diversity_score(histograms):
    """Dataset mean of per-image across-token histogram variance.

    Per image: variance of each bin's value across tokens, averaged over
    bins. Images with fewer than 2 tokens score 0 with a warning.
    """
    per_image = []
    for hists in histograms:
        if len(hists) < 2:
            warnings.warn("diversity_score: fewer than 2 tokens, scoring 0", stacklevel=2)
            per_image.append(0.0)
            continue
        order = sorted(hists[0].bins)
        table = np.stack([h.as_array(order) for h in hists])  # (K, bins)
        per_image.append(float(table.var(axis=0).mean()))
    return float(np.mean(per_image))


def class_metrics(masks, label_map):
    """(mean token entropy, histogram diversity) with class-id bins, one image."""
    present = np.unique(label_map.class_ids)
    hists = image_histograms(masks, label_map.class_ids, present)
    return semantics_score([hists]), diversity_score([hists]), hists


def instance_metrics(masks, label_map):
    """(mean token entropy, histogram diversity) with instance-id bins over
    "things" pixels; classes without instances are excluded."""
    if label_map.instance_ids is None:
        raise ValueError("instance_metrics: label map has no instance ids")
    inst = label_map.instance_ids
    present = np.unique(inst[inst > 0])
    if present.size == 0:
        raise UndefinedHistogramError("no instance-labeled pixels in image")
    hists = image_histograms(masks, inst, present)
    return semantics_score([hists]), diversity_score([hists]), hists


@dataclass
class MetricsReport:
    """Dataset-level semantics/diversity scores plus per-image breakdown."""

    s_class: float
    d_class: float
    s_instance: float | None
    d_instance: float | None
    images: list[dict] = field(default_factory=list)

    def to_dict(self):
        return {
            "s_class": self.s_class,
            "s_instance": self.s_instance,
            "d_class": self.d_class,
            "d_instance": self.d_instance,
            "images": self.images,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def metrics_report(samples, ids=None):
    """Aggregate all four scores over (masks, label_map) pairs.

    Instance scores are None unless every image carries instance ids.
    """
    if not samples:
        raise ValueError("metrics_report: empty dataset")
    if ids is None:
        ids = list(range(len(samples)))
    class_hists, inst_hists, images = [], [], []
    have_instances = all(lm.instance_ids is not None for _, lm in samples)
    for sample_id, (masks, label_map) in zip(ids, samples):
        s_c, d_c, hists_c = class_metrics(masks, label_map)
        entry = {
            "id": sample_id,
            "s_class": s_c,
            "d_class": d_c,
            "class_entropies": [h.entropy() for h in hists_c],
            "class_histograms": [{str(k): v for k, v in h.bins.items()} for h in hists_c],
        }
        class_hists.append(hists_c)
        if have_instances:
            s_i, d_i, hists_i = instance_metrics(masks, label_map)
            entry.update({
                "s_instance": s_i,
                "d_instance": d_i,
                "instance_entropies": [h.entropy() for h in hists_i],
                "instance_histograms": [{str(k): v for k, v in h.bins.items()} for h in hists_i],
            })
            inst_hists.append(hists_i)
        images.append(entry)
    return MetricsReport(
        s_class=semantics_score(class_hists),
        d_class=diversity_score(class_hists),
        s_instance=semantics_score(inst_hists) if have_instances else None,
        d_instance=diversity_score(inst_hists) if have_instances else None,
        images=images,
    )
